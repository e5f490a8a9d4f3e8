use std::env;
use std::fs;
use std::path::{Path, PathBuf};

type Substitutions = &'static [(&'static str, &'static str)];

/// (output name, source, template substitutions)
const CAPSULES: &[(&str, &str, Substitutions)] = &[
    ("fib", "fib.wat", &[]),
    ("sensor-once", "sensor_once.wat", &[]),
    ("counter", "counter.wat", &[]),
    (
        "sensor-v1",
        "sensor.wat",
        &[("VERSION", "1"), ("SUFFIX", ""), ("SUFFIX_LEN", "0"), ("SUFFIX_LEN_PLUS_1", "1")],
    ),
    (
        "sensor-v2",
        "sensor.wat",
        &[("VERSION", "2"), ("SUFFIX", " mC"), ("SUFFIX_LEN", "3"), ("SUFFIX_LEN_PLUS_1", "4")],
    ),
    ("fletcher32", "fletcher32.wat", &[]),
    ("crc32", "crc32.wat", &[]),
    ("matmul", "matmul.wat", &[]),
    ("statemachine", "statemachine.wat", &[]),
    ("floats", "floats.wat", &[]),
    ("memgrow", "memgrow.wat", &[]),
    ("spin", "spin.wat", &[]),
    ("oob", "oob.wat", &[]),
    ("bad-alloc", "bad_alloc.wat", &[]),
    ("init-fails", "init_fails.wat", &[]),
    ("init-traps", "init_traps.wat", &[]),
    ("crashy", "crashy.wat", &[]),
];

fn expand(dir: &Path, text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        match line.trim().strip_prefix(";;@include ") {
            Some(name) => {
                let inc = dir.join("include").join(format!("{}.wat", name.trim()));
                out.push_str(&fs::read_to_string(&inc).unwrap_or_else(|e| panic!("{}: {e}", inc.display())));
            }
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

fn main() {
    let src = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap()).join("wat");
    let out = PathBuf::from(env::var("OUT_DIR").unwrap());
    println!("cargo:rerun-if-changed=wat");
    for (name, file, subs) in CAPSULES {
        let mut text = expand(&src, &fs::read_to_string(src.join(file)).unwrap());
        for (k, v) in subs.iter() {
            text = text.replace(&format!("{{{{{k}}}}}"), v);
        }
        assert!(!text.contains("{{"), "{name}: unexpanded template");
        let wasm = wat::parse_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        fs::write(out.join(format!("{name}.wasm")), wasm).unwrap();
    }
}
