use std::io::{BufRead, BufReader};
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const PSK: &str = "00112233445566778899aabbccddeeff";
const GATE: &str = "0f0e0d0c0b0a09080706050403020100";
const OTHER: &str = "ffffffffffffffffffffffffffffffff";

fn capsule() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capsule"))
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("psk"), PSK).unwrap();
        std::fs::write(w.path("gate"), GATE).unwrap();
        let o = capsule()
            .args(["corpus", "build", "--out"])
            .arg(w.path("corpus"))
            .arg("--key-file")
            .arg(w.path("gate"))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        w
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cap(&self, name: &str) -> PathBuf {
        self.path(&format!("corpus/v1/{name}.cap"))
    }

    fn write_config(&self, extra: &str) -> PathBuf {
        let cfg = format!(
            r#"device_id = 7
listen = "127.0.0.1:0"
psk = "{PSK}"
gatekeeper_key = "{GATE}"
rng_seed = 42

[sim]
latency_ms = 10

[[sim.sensors]]
name = "t0"
label = "temperature"
waveform = {{ kind = "constant", value = 21.5 }}
{extra}"#
        );
        let p = self.path("device.toml");
        std::fs::write(&p, cfg).unwrap();
        p
    }
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(config: &Path, extra: &[&str]) -> Server {
    let mut child = capsule()
        .args(["device", "run", "--config"])
        .arg(config)
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("banner: {line:?}")).to_string();
    Server { child, addr }
}

fn client(w: &Workspace, s: &Server, args: &[&str]) -> Output {
    let mut c = capsule();
    c.arg(args[0]).args(["--target", &s.addr, "--timeout-ms", "500", "--device-id", "7"]);
    c.arg("--psk-file").arg(w.path("psk"));
    c.arg("--seq-file").arg(w.path("seq"));
    c.args(&args[1..]).output().unwrap()
}

fn first_line(o: &Output) -> String {
    text(o).lines().next().unwrap_or_default().to_string()
}

fn payload_text(o: &Output) -> String {
    text(o).lines().find_map(|l| l.strip_prefix("text: ")).unwrap_or_default().to_string()
}

#[test]
fn gate_sign_accepts_valid_and_rejects_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.wasm");
    std::fs::write(&good, wat::parse_str("(module (func (export \"f\") (result i32) i32.const 1))").unwrap()).unwrap();
    let o = capsule()
        .args(["gate", "sign"])
        .arg(&good)
        .arg("-o")
        .arg(dir.path().join("good.cap"))
        .args(["--key", GATE])
        .output()
        .unwrap();
    assert!(o.status.success());
    let pkg = std::fs::read(dir.path().join("good.cap")).unwrap();
    let wasm = std::fs::read(&good).unwrap();
    assert_eq!(pkg.len(), 4 + wasm.len() + 16);
    assert_eq!(&pkg[4..4 + wasm.len()], wasm.as_slice());

    // Second function body returns i64 where i32 is declared.
    let bad = dir.path().join("bad.wasm");
    let src = "(module (func) (func (result i32) nop i64.const 1))";
    std::fs::write(&bad, wat::parse_str(src).unwrap()).unwrap();
    let o = capsule()
        .args(["gate", "sign"])
        .arg(&bad)
        .arg("-o")
        .arg(dir.path().join("bad.cap"))
        .env("CAPSULE_GATE_KEY_FILE", {
            let p = dir.path().join("k");
            std::fs::write(&p, GATE).unwrap();
            p
        })
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("func 1") && err.contains("offset"), "{err}");
    assert!(!dir.path().join("bad.cap").exists());
}

#[test]
fn operator_session_against_a_device() {
    let w = Workspace::new();
    let s = start(&w.write_config(""), &[]);

    let o = client(&w, &s, &["deploy", "vm1", w.cap("sensor-v1").to_str().unwrap()]);
    assert_eq!(first_line(&o), "2.01");
    assert!(o.status.success());

    let o = client(&w, &s, &["get", "/vm1/sensor1/temp"]);
    assert_eq!(first_line(&o), "2.05");
    let milli: i64 = payload_text(&o).parse().unwrap();
    assert!((21_400..=21_600).contains(&milli), "{milli}");

    let o = client(&w, &s, &["update", "vm1", w.cap("sensor-v2").to_str().unwrap()]);
    assert_eq!(first_line(&o), "2.04");
    assert_eq!(payload_text(&o), "vm1,2");

    let o = client(&w, &s, &["get", "/vm1/sensor1/temp"]);
    assert!(payload_text(&o).ends_with(" mC"), "{}", text(&o));

    let o = client(&w, &s, &["get", "/missing"]);
    assert_eq!(first_line(&o), "4.04");
    assert_eq!(o.status.code(), Some(1));

    let o = client(&w, &s, &["run", w.cap("fib").to_str().unwrap(), "--payload", "10"]);
    assert_eq!((first_line(&o).as_str(), payload_text(&o).as_str()), ("2.05", "55"));
    let hex_line = text(&o).lines().nth(1).unwrap().to_string();
    assert_eq!(hex_line, "hex: 3535");

    let o = client(&w, &s, &["deploy", "c", w.cap("counter").to_str().unwrap()]);
    assert!(o.status.success());
    let o = client(&w, &s, &["post", "/c/count"]);
    assert_eq!((first_line(&o).as_str(), payload_text(&o).as_str()), ("2.04", "1"));

    let o = client(&w, &s, &["delete", "c"]);
    assert_eq!(first_line(&o), "2.02");
    let o = client(&w, &s, &["list"]);
    assert!(o.status.success());
    assert!(payload_text(&o).contains("vm1") && !payload_text(&o).contains("c,"), "{}", text(&o));
}

#[test]
fn reads_are_idempotent_and_seq_increases() {
    let w = Workspace::new();
    let cfg = w.write_config("[[preload]]\nprefix = \"c\"\npackage = \"corpus/v1/counter.cap\"\n");
    let s = start(&cfg, &[]);
    let seq = || -> u64 { std::fs::read_to_string(w.path("seq")).unwrap().trim().parse().unwrap() };

    let before = text(&client(&w, &s, &["list"]));
    let mut last = seq();
    for _ in 0..3 {
        let o = client(&w, &s, &["get", "/c/count"]);
        assert_eq!(payload_text(&o), "0");
        let now = seq();
        assert!(now > last, "{now} after {last}");
        last = now;
    }
    assert_eq!(text(&client(&w, &s, &["list"])), before);
}

#[test]
fn wrong_keys_are_refused() {
    let w = Workspace::new();
    let s = start(&w.write_config(""), &[]);

    let foreign = w.path("foreign.cap");
    let o = capsule()
        .args(["gate", "sign", w.path("corpus/v1/fib.wasm").to_str().unwrap(), "-o"])
        .arg(&foreign)
        .args(["--key", OTHER])
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = client(&w, &s, &["deploy", "vm1", foreign.to_str().unwrap()]);
    assert_eq!(first_line(&o), "4.01");
    assert_eq!(o.status.code(), Some(1));

    // Raw bytecode carries no stamp at all.
    let o = client(&w, &s, &["deploy", "vm1", w.path("corpus/v1/fib.wasm").to_str().unwrap()]);
    assert_eq!(first_line(&o), "4.01");

    // A client with the wrong psk gets no authenticated answer.
    let o = capsule()
        .args(["get", "/vm-control", "--target", &s.addr, "--timeout-ms", "100", "--attempts", "2", "--psk", OTHER])
        .arg("--seq-file")
        .arg(w.path("seq2"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no response after 2 attempts"));
}

#[test]
fn fleet_targets_and_cli_preload() {
    let w = Workspace::new();
    let cfg = w.write_config("");
    let c = format!("c={}", w.cap("counter").display());
    let a = start(&cfg, &["--preload", &c]);
    let b = start(&cfg, &["--preload", &c]);

    let o = capsule()
        .args(["post", "/c/count", "--target", &a.addr, "--target", &b.addr])
        .arg("--psk-file")
        .arg(w.path("psk"))
        .arg("--seq-file")
        .arg(w.path("seq"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let out = text(&o);
    assert!(out.contains(&format!("{} 2.04", a.addr)) && out.contains(&format!("{} 2.04", b.addr)), "{out}");
    assert_eq!(out.lines().filter(|l| l.ends_with("text: 1")).count(), 2);
}

#[test]
fn device_run_exit_codes() {
    let w = Workspace::new();
    let bad = w.path("bad.toml");
    std::fs::write(&bad, "device_id = \"seven\"\n").unwrap();
    let o = capsule().args(["device", "run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let cfg = w.write_config("[[preload]]\nprefix = \"x\"\npackage = \"nope.cap\"\n");
    let o = capsule().args(["device", "run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let cfg = w.write_config("");
    let taken = UdpSocket::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let o = capsule().args(["device", "run", "--config"]).arg(&cfg).args(["--listen", &addr]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_csv_and_jsonl() {
    let w = Workspace::new();
    let out = w.path("report.csv");
    let o = capsule()
        .args(["bench", "--capsule"])
        .arg(w.cap("fib"))
        .args(["--export", "fib", "--args", "25", "--iters", "5", "--out"])
        .arg(&out)
        .arg("--key-file")
        .arg(w.path("gate"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(text(&o).contains("outcome=values[i64:75025]"), "{}", text(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "name,iter,time_us,fuel,peak_linmem,peak_hostmem,gmean_us,gstd");
    assert_eq!(lines.len(), 6);
    let fuel: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap()).collect();
    assert!(fuel.windows(2).all(|p| p[0] == p[1]));
    assert!(lines[1].starts_with("fib/fib,"));

    let o = capsule()
        .args(["bench", "--capsule"])
        .arg(w.path("corpus/v1/floats.wasm"))
        .args(["--export", "float_mix", "--args", "100", "--iters", "3", "--format", "jsonl"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(text(&o).lines().count(), 3);

    let o = capsule()
        .args(["bench", "--capsule"])
        .arg(w.cap("fib"))
        .args(["--export", "fib", "--args", "1,2"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    // A tampered stamp is refused when the key is known.
    let o = capsule()
        .args(["bench", "--capsule"])
        .arg(w.cap("fib"))
        .args(["--export", "fib", "--args", "3", "--key", OTHER])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn keygen_prints_fresh_keys() {
    let a = text(&capsule().arg("keygen").output().unwrap());
    let b = text(&capsule().arg("keygen").output().unwrap());
    assert_eq!(a.trim().len(), 32);
    assert!(a.trim().chars().all(|c| c.is_ascii_hexdigit()));
    assert_ne!(a, b);
}
