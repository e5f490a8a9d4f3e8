//! `capsule`: gatekeeper stamping, capsule deployment, queries, benches and
//! the device server, in one binary.
//!
//! Client sub-commands print the response code on the first line, then
//! `hex:` and `text:` lines for the payload. Exit status is 0 iff every
//! response is 2.xx, 1 for any other response code and 2 for transport,
//! key or usage errors.

use std::fs;
use std::io::{self, Write};
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use capsule_core::bench::{emit, run_bench, BenchSpec, ReportFormat};
use capsule_core::client::{Client, ClientConfig, Response};
use capsule_core::coap::code;
use capsule_core::device::{Device, DeviceConfig};
use capsule_core::secure::{gate_stamp, parse_key, split_package, verify_stamp, Key, TAG_LEN};
use capsule_core::transport::{serve_udp, UdpTransport};
use capsule_wasm::{ValType, Value};

#[derive(Parser)]
#[command(name = "capsule", version, about = "Operate capsule devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gatekeeper operations.
    #[command(subcommand)]
    Gate(GateCmd),
    /// Deploy a stamped package at /<prefix>.
    Deploy {
        #[command(flatten)]
        conn: Conn,
        prefix: String,
        package: PathBuf,
    },
    /// Replace the capsule at /<prefix>; the old one keeps serving on failure.
    Update {
        #[command(flatten)]
        conn: Conn,
        prefix: String,
        package: PathBuf,
    },
    /// Terminate the capsule at /<prefix>.
    Delete {
        #[command(flatten)]
        conn: Conn,
        prefix: String,
    },
    /// List capsules (id, version, kind, ram estimate).
    List {
        #[command(flatten)]
        conn: Conn,
    },
    /// Run an ephemeral capsule and print its output.
    Run {
        #[command(flatten)]
        conn: Conn,
        package: PathBuf,
        #[command(flatten)]
        body: Body,
    },
    /// GET a path.
    Get {
        #[command(flatten)]
        conn: Conn,
        path: String,
    },
    /// PUT to a path.
    Put {
        #[command(flatten)]
        conn: Conn,
        path: String,
        #[command(flatten)]
        body: Body,
    },
    /// POST to a path.
    Post {
        #[command(flatten)]
        conn: Conn,
        path: String,
        #[command(flatten)]
        body: Body,
    },
    /// Time an export locally and write a report.
    Bench(BenchArgs),
    /// Device server.
    #[command(subcommand)]
    Device(DeviceCmd),
    /// Example capsules.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Print a fresh random 16-byte key as hex.
    Keygen,
}

#[derive(Subcommand)]
enum GateCmd {
    /// Validate bytecode and write a stamped package.
    Sign {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        key: GateKey,
    },
}

#[derive(Subcommand)]
enum DeviceCmd {
    /// Serve CoAP over UDP until killed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
        /// Extra package to deploy at boot, as `prefix=path` or `path`
        /// (prefix = file stem).
        #[arg(long)]
        preload: Vec<String>,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Write bytecode, stamped packages and a manifest under <out>/v1.
    Build {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        key: GateKey,
    },
}

#[derive(Args, Clone)]
struct GateKey {
    /// Gatekeeper key, hex.
    #[arg(long, conflicts_with = "key_file")]
    key: Option<String>,
    /// File holding the gatekeeper key as hex.
    #[arg(long, env = "CAPSULE_GATE_KEY_FILE")]
    key_file: Option<PathBuf>,
}

impl GateKey {
    fn get(&self) -> Result<Option<Key>> {
        read_key(self.key.as_deref(), self.key_file.as_deref())
    }

    fn require(&self) -> Result<Key> {
        self.get()?.ok_or_else(|| anyhow!("gatekeeper key required (--key, --key-file or CAPSULE_GATE_KEY_FILE)"))
    }
}

#[derive(Args, Clone)]
struct Conn {
    /// Device address; repeat to address a fleet.
    #[arg(long, default_value = "127.0.0.1:5683")]
    target: Vec<String>,
    /// Our sender id in the envelope.
    #[arg(long, default_value_t = 1)]
    sender: u32,
    /// Accept replies only from this device id.
    #[arg(long)]
    device_id: Option<u32>,
    /// Pre-shared key, hex.
    #[arg(long, conflicts_with = "psk_file")]
    psk: Option<String>,
    #[arg(long, env = "CAPSULE_PSK_FILE")]
    psk_file: Option<PathBuf>,
    /// Next-sequence-number file, shared by all invocations.
    #[arg(long, env = "CAPSULE_SEQ_FILE", default_value = ".capsule-seq")]
    seq_file: PathBuf,
    /// First attempt's timeout; doubles on each retry.
    #[arg(long, default_value_t = 2000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    attempts: u32,
}

#[derive(Args, Clone)]
struct Body {
    /// Payload as UTF-8 text.
    #[arg(long, conflicts_with = "payload_file")]
    payload: Option<String>,
    #[arg(long)]
    payload_file: Option<PathBuf>,
}

impl Body {
    fn bytes(&self) -> Result<Vec<u8>> {
        match (&self.payload, &self.payload_file) {
            (Some(s), _) => Ok(s.as_bytes().to_vec()),
            (None, Some(p)) => fs::read(p).with_context(|| p.display().to_string()),
            (None, None) => Ok(Vec::new()),
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Raw `.wasm` or a stamped package.
    #[arg(long)]
    capsule: PathBuf,
    #[arg(long)]
    export: String,
    /// Comma-separated arguments, parsed by the export's parameter types.
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    args: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 1_000_000_000)]
    fuel: u64,
    #[arg(long, default_value_t = 32768)]
    page_size: u32,
    /// Report name; defaults to `<file stem>/<export>`.
    #[arg(long)]
    name: Option<String>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Verifies the stamp of a package when given.
    #[command(flatten)]
    key: GateKey,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

fn read_key(hex_key: Option<&str>, file: Option<&Path>) -> Result<Option<Key>> {
    let text = match (hex_key, file) {
        (Some(k), _) => k.to_string(),
        (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading key {}", p.display()))?,
        (None, None) => return Ok(None),
    };
    parse_key(&text).map(Some).map_err(|e| anyhow!(e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Send one request to every target. Ok(true) iff all answered 2.xx.
fn send(conn: &Conn, method: u8, path: &str, payload: &[u8]) -> Result<bool> {
    let psk = read_key(conn.psk.as_deref(), conn.psk_file.as_deref())?
        .ok_or_else(|| anyhow!("pre-shared key required (--psk, --psk-file or CAPSULE_PSK_FILE)"))?;
    let path = path.trim_start_matches('/');
    let fleet = conn.target.len() > 1;
    let mut all_ok = true;
    for target in &conn.target {
        let mut cfg = ClientConfig::new(target.clone(), conn.sender, psk);
        cfg.device_id = conn.device_id;
        cfg.seq_file = Some(conn.seq_file.clone());
        cfg.timeout = Duration::from_millis(conn.timeout_ms);
        cfg.attempts = conn.attempts;
        let transport = UdpTransport::connect(target).with_context(|| format!("connecting to {target}"))?;
        let mut client = Client::new(cfg, transport)?;
        let resp = client.request(method, path, payload).with_context(|| target.to_string())?;
        let prefix = if fleet { format!("{target} ") } else { String::new() };
        print_response(&prefix, &resp);
        all_ok &= resp.is_success();
    }
    Ok(all_ok)
}

fn print_response(prefix: &str, r: &Response) {
    let p = &r.message.payload;
    println!("{prefix}{}", code::to_string(r.code()));
    println!("{prefix}hex: {}", hex::encode(p));
    println!("{prefix}text: {}", String::from_utf8_lossy(p).replace('\n', "\\n"));
}

fn parse_args(text: &str, params: &[ValType]) -> Result<Vec<Value>> {
    let parts: Vec<&str> = if text.trim().is_empty() {
        Vec::new()
    } else {
        text.split(',').map(str::trim).collect()
    };
    if parts.len() != params.len() {
        bail!("export takes {} argument(s), got {}", params.len(), parts.len());
    }
    parts
        .iter()
        .zip(params)
        .map(|(s, t)| {
            let v = match t {
                ValType::I32 => s.parse::<i32>().map(Value::I32).map_err(|e| e.to_string()),
                ValType::I64 => s.parse::<i64>().map(Value::I64).map_err(|e| e.to_string()),
                ValType::F32 => s.parse::<f32>().map(Value::F32).map_err(|e| e.to_string()),
                ValType::F64 => s.parse::<f64>().map(Value::F64).map_err(|e| e.to_string()),
            };
            v.map_err(|e| anyhow!("argument {s:?} as {t}: {e}"))
        })
        .collect()
}

fn bench(a: &BenchArgs) -> Result<bool> {
    let bytes = read(&a.capsule)?;
    let wasm = if bytes.starts_with(b"\0asm") {
        bytes
    } else if let Some(key) = a.key.get()? {
        verify_stamp(&key, &bytes)?.to_vec()
    } else {
        let (pkg, _) = split_package(&bytes)?;
        pkg[4..pkg.len() - TAG_LEN].to_vec()
    };
    let module = capsule_wasm::load(&wasm).context("loading capsule")?;
    let ty = module
        .export_func_type(&a.export)
        .ok_or_else(|| anyhow!("no exported function {:?}", a.export))?;
    let args = parse_args(&a.args, &ty.params)?;
    let stem = a.capsule.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut spec = BenchSpec::new(a.name.clone().unwrap_or(format!("{stem}/{}", a.export)), wasm, &a.export, args);
    spec.iterations = a.iters;
    spec.warmup = a.warmup;
    spec.fuel = a.fuel;
    spec.page_size = a.page_size;
    let report = run_bench(&spec)?;
    let format = match a.format {
        Format::Csv => ReportFormat::Csv,
        Format::Jsonl => ReportFormat::Jsonl,
    };
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| p.display().to_string())?;
            emit(std::slice::from_ref(&report), format, io::BufWriter::new(f))?;
            println!(
                "{} gmean_us={:.3} gstd={:.4} fuel={} outcome={}",
                report.name,
                report.gmean_us,
                report.gstd,
                report.fuel().unwrap_or(0),
                report.outcome.as_deref().unwrap_or("-")
            );
        }
        None => emit(std::slice::from_ref(&report), format, io::stdout().lock())?,
    }
    if let Some(e) = &report.error {
        eprintln!("error: {e}");
    }
    Ok(report.valid)
}

fn device_run(config: &Path, listen: Option<&str>, preload: &[String]) -> ExitCode {
    let cfg = match DeviceConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(1);
        }
    };
    let addr = listen.map(str::to_string).unwrap_or_else(|| cfg.listen.clone());
    let mut device = Device::new(cfg);
    let base = config.parent().unwrap_or(Path::new("."));
    if let Err(e) = device.preload_from_config(base) {
        eprintln!("error: preload {e}");
        return ExitCode::from(1);
    }
    for p in preload {
        let (prefix, path) = match p.split_once('=') {
            Some((prefix, path)) => (prefix.to_string(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(p);
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, path)
            }
        };
        let loaded = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|b| device.preload(&prefix, &b).map_err(|e| e.to_string()));
        if let Err(e) = loaded {
            eprintln!("error: preload {prefix} from {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    let socket = match UdpSocket::bind(&addr) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: bind {addr}: {e}");
            return ExitCode::from(2);
        }
    };
    let local = socket.local_addr().map(|a| a.to_string()).unwrap_or(addr);
    println!("listening on {local}");
    let _ = io::stdout().flush();
    let stop = AtomicBool::new(false);
    match serve_udp(&mut device, &socket, &stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    use capsule_core::coap::code::{DELETE, GET, POST, PUT};
    let control = |rest: &str| format!("vm-control/{}", rest.trim_matches('/'));
    match cmd {
        Command::Gate(GateCmd::Sign { input, out, key }) => {
            let key = key.require()?;
            let wasm = read(&input)?;
            let pkg = gate_stamp(&key, &wasm).with_context(|| input.display().to_string())?;
            fs::write(&out, &pkg).with_context(|| out.display().to_string())?;
            println!("{} ({} bytes)", out.display(), pkg.len());
            Ok(true)
        }
        Command::Deploy { conn, prefix, package } | Command::Update { conn, prefix, package } => {
            send(&conn, PUT, &control(&prefix), &read(&package)?)
        }
        Command::Delete { conn, prefix } => send(&conn, DELETE, &control(&prefix), &[]),
        Command::List { conn } => send(&conn, GET, "vm-control", &[]),
        Command::Run { conn, package, body } => {
            let mut payload = read(&package)?;
            payload.extend(body.bytes()?);
            send(&conn, POST, "vm-control/run", &payload)
        }
        Command::Get { conn, path } => send(&conn, GET, &path, &[]),
        Command::Put { conn, path, body } => send(&conn, PUT, &path, &body.bytes()?),
        Command::Post { conn, path, body } => send(&conn, POST, &path, &body.bytes()?),
        Command::Bench(a) => bench(&a),
        Command::Device(_) => unreachable!("handled in main"),
        Command::Corpus(CorpusCmd::Build { out, key }) => {
            let key = key.require()?;
            let stamp = |w: &[u8]| gate_stamp(&key, w).expect("corpus capsules validate");
            let m = capsule_corpus::build_corpus(&out, &stamp)?;
            for e in &m.capsule {
                println!("{} {} {}", e.name, e.package, e.sha256);
            }
            Ok(true)
        }
        Command::Keygen => {
            let mut k = [0u8; 16];
            getrandom::fill(&mut k).map_err(|e| anyhow!("{e}"))?;
            println!("{}", hex::encode(k));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Device(DeviceCmd::Run { config, listen, preload }) = &cli.command {
        return device_run(config, listen.as_deref(), preload);
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
