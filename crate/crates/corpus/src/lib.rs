//! Example capsules, bench workloads and adversarial capsules.
//!
//! Sources live in `wat/` and are assembled by the build script.

use std::fs;
use std::io;
use std::path::Path;

use capsule_wasm::Value;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[cfg(feature = "oracle")]
pub mod conformance;

macro_rules! capsule {
    ($name:literal) => {
        include_bytes!(concat!(env!("OUT_DIR"), "/", $name, ".wasm"))
    };
}

pub const FIB: &[u8] = capsule!("fib");
pub const SENSOR_ONCE: &[u8] = capsule!("sensor-once");
pub const COUNTER: &[u8] = capsule!("counter");
pub const SENSOR_V1: &[u8] = capsule!("sensor-v1");
pub const SENSOR_V2: &[u8] = capsule!("sensor-v2");
pub const FLETCHER32: &[u8] = capsule!("fletcher32");
pub const CRC32: &[u8] = capsule!("crc32");
pub const MATMUL: &[u8] = capsule!("matmul");
pub const STATEMACHINE: &[u8] = capsule!("statemachine");
pub const FLOATS: &[u8] = capsule!("floats");
pub const MEMGROW: &[u8] = capsule!("memgrow");
pub const SPIN: &[u8] = capsule!("spin");
pub const OOB: &[u8] = capsule!("oob");
pub const BAD_ALLOC: &[u8] = capsule!("bad-alloc");
pub const INIT_FAILS: &[u8] = capsule!("init-fails");
pub const INIT_TRAPS: &[u8] = capsule!("init-traps");
pub const CRASHY: &[u8] = capsule!("crashy");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Ephemeral,
    Persistent,
    /// Bare exports for benches and tests, no capsule ABI.
    Workload,
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub kind: Kind,
    pub wasm: &'static [u8],
    /// `host` bindings the capsule imports, in declaration order.
    pub imports: &'static [&'static str],
    pub oracle: &'static str,
}

const SENSOR_IMPORTS: &[&str] = &["trigger_measurements", "wait_for_reading", "rng_u32", "log"];

pub const ENTRIES: &[CorpusEntry] = &[
    CorpusEntry {
        name: "fib",
        kind: Kind::Ephemeral,
        wasm: FIB,
        imports: &[],
        oracle: "run(\"10\") = \"55\"; fib(n) is the n-th Fibonacci number",
    },
    CorpusEntry {
        name: "sensor-once",
        kind: Kind::Ephemeral,
        wasm: SENSOR_ONCE,
        imports: SENSOR_IMPORTS,
        oracle: "run = temperature in milli-degrees plus noise in [-100, 100], logged as temp=<value>",
    },
    CorpusEntry {
        name: "counter",
        kind: Kind::Persistent,
        wasm: COUNTER,
        imports: &[],
        oracle: "GET count = 2.05 n; POST count = 2.04 n+1; DELETE count = 2.02",
    },
    CorpusEntry {
        name: "sensor-v1",
        kind: Kind::Persistent,
        wasm: SENSOR_V1,
        imports: SENSOR_IMPORTS,
        oracle: "GET sensor1/temp = 2.05 milli-degrees plus noise, logged; GET version = 2.05 \"1\"",
    },
    CorpusEntry {
        name: "sensor-v2",
        kind: Kind::Persistent,
        wasm: SENSOR_V2,
        imports: SENSOR_IMPORTS,
        oracle: "GET sensor1/temp = 2.05 \"<milli> mC\"; GET version = 2.05 \"2\"",
    },
    CorpusEntry {
        name: "fletcher32",
        kind: Kind::Ephemeral,
        wasm: FLETCHER32,
        imports: &[],
        oracle: "run(\"abcde\") = 4031760169 (0xF04FC729)",
    },
    CorpusEntry {
        name: "crc32",
        kind: Kind::Ephemeral,
        wasm: CRC32,
        imports: &[],
        oracle: "run(\"123456789\") = 3421780262 (0xCBF43926)",
    },
    CorpusEntry {
        name: "matmul",
        kind: Kind::Ephemeral,
        wasm: MATMUL,
        imports: &[],
        oracle: "matmul(n) = sum of (A x B), A[i][j] = i + j, B[i][j] = i - j",
    },
    CorpusEntry {
        name: "statemachine",
        kind: Kind::Ephemeral,
        wasm: STATEMACHINE,
        imports: &[],
        oracle: "sm(steps) matches the reference state machine",
    },
    CorpusEntry {
        name: "floats",
        kind: Kind::Workload,
        wasm: FLOATS,
        imports: &[],
        oracle: "float_mix(n), float_mix32(n) bit-equal to the reference loop",
    },
    CorpusEntry {
        name: "memgrow",
        kind: Kind::Workload,
        wasm: MEMGROW,
        imports: &[],
        oracle: "grow(n) = 1 + n pages",
    },
    CorpusEntry {
        name: "spin",
        kind: Kind::Ephemeral,
        wasm: SPIN,
        imports: &[],
        oracle: "OutOfFuel with fuel consumed = budget",
    },
    CorpusEntry {
        name: "oob",
        kind: Kind::Ephemeral,
        wasm: OOB,
        imports: &[],
        oracle: "Trap(MemOutOfBounds) at exactly the memory length",
    },
    CorpusEntry {
        name: "bad-alloc",
        kind: Kind::Ephemeral,
        wasm: BAD_ALLOC,
        imports: &[],
        oracle: "Trapped(MemOutOfBounds) when the host copies the input",
    },
    CorpusEntry {
        name: "init-fails",
        kind: Kind::Persistent,
        wasm: INIT_FAILS,
        imports: &[],
        oracle: "deploy fails with InitFailed(1)",
    },
    CorpusEntry {
        name: "init-traps",
        kind: Kind::Persistent,
        wasm: INIT_TRAPS,
        imports: &[],
        oracle: "deploy fails with InitFailed(Unreachable)",
    },
    CorpusEntry {
        name: "crashy",
        kind: Kind::Persistent,
        wasm: CRASHY,
        imports: &[],
        oracle: "ok = 2.05; spin, scribble, div, deep, bigresp = 5.00; capsule stays Ready",
    },
];

pub fn entry(name: &str) -> Option<&'static CorpusEntry> {
    ENTRIES.iter().find(|e| e.name == name)
}

/// A deterministic export call used for fuel and timing checks.
#[derive(Clone, Debug)]
pub struct Workload {
    pub name: String,
    pub capsule: &'static str,
    pub wasm: &'static [u8],
    pub export: &'static str,
    pub args: Vec<Value>,
}

fn w(capsule: &'static str, export: &'static str, arg: Option<i32>) -> Workload {
    let wasm = entry(capsule).expect("known capsule").wasm;
    let args: Vec<Value> = arg.into_iter().map(Value::I32).collect();
    let name = match arg {
        Some(a) => format!("{capsule}/{export}({a})"),
        None => format!("{capsule}/{export}()"),
    };
    Workload {
        name,
        capsule,
        wasm,
        export,
        args,
    }
}

/// Twenty workloads spanning every instruction class the corpus uses,
/// two of which end in a trap.
pub fn workloads() -> Vec<Workload> {
    vec![
        w("fib", "fib", Some(0)),
        w("fib", "fib", Some(10)),
        w("fib", "fib", Some(25)),
        w("fib", "fib", Some(90)),
        w("fletcher32", "fletcher_bench", Some(16)),
        w("fletcher32", "fletcher_bench", Some(1024)),
        w("crc32", "crc32_bench", Some(16)),
        w("crc32", "crc32_bench", Some(1024)),
        w("matmul", "matmul", Some(4)),
        w("matmul", "matmul", Some(8)),
        w("matmul", "matmul", Some(16)),
        w("statemachine", "sm", Some(100)),
        w("statemachine", "sm", Some(1000)),
        w("statemachine", "sm", Some(5000)),
        w("floats", "float_mix", Some(100)),
        w("floats", "float_mix", Some(1000)),
        w("floats", "float_mix32", Some(500)),
        w("memgrow", "grow", Some(3)),
        w("oob", "scribble", None),
        w("matmul", "alloc", Some(20000)),
    ]
}

/// Append a custom section so the module is exactly `size` bytes.
/// Custom sections are ignored by the loader, so behaviour is unchanged.
pub fn pad_to(wasm: &[u8], size: usize) -> Option<Vec<u8>> {
    const NAME: &[u8] = b"pad";
    fn leb(mut v: usize, out: &mut Vec<u8>) {
        loop {
            let b = (v & 0x7F) as u8;
            v >>= 7;
            if v == 0 {
                out.push(b);
                return;
            }
            out.push(b | 0x80);
        }
    }
    let leb_len = |v: usize| {
        let mut t = Vec::new();
        leb(v, &mut t);
        t.len()
    };
    // section = 0x00 | leb(content) | leb(name len) | name | filler
    let room = size.checked_sub(wasm.len() + 1)?;
    let content = (1..=5)
        .map(|l| room.checked_sub(l))
        .find_map(|c| c.filter(|&c| leb_len(c) == room - c))?;
    let filler = content.checked_sub(1 + NAME.len())?;
    let mut out = wasm.to_vec();
    out.push(0);
    leb(content, &mut out);
    out.push(NAME.len() as u8);
    out.extend_from_slice(NAME);
    out.resize(out.len() + filler, 0);
    (out.len() == size).then_some(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: Kind,
    pub wasm: String,
    pub package: String,
    pub sha256: String,
    pub size: usize,
    pub imports: Vec<String>,
    pub oracle: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub capsule: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `v1/<name>.wasm`, `v1/<name>.cap` (via `stamp`) and
/// `v1/manifest.toml` under `out`.
pub fn build_corpus(out: &Path, stamp: &dyn Fn(&[u8]) -> Vec<u8>) -> io::Result<Manifest> {
    let dir = out.join(format!("v{MANIFEST_VERSION}"));
    fs::create_dir_all(&dir)?;
    let mut capsule = Vec::new();
    for e in ENTRIES {
        let wasm = format!("{}.wasm", e.name);
        let package = format!("{}.cap", e.name);
        fs::write(dir.join(&wasm), e.wasm)?;
        fs::write(dir.join(&package), stamp(e.wasm))?;
        capsule.push(ManifestEntry {
            name: e.name.to_string(),
            kind: e.kind,
            wasm,
            package,
            sha256: sha256_hex(e.wasm),
            size: e.wasm.len(),
            imports: e.imports.iter().map(|s| s.to_string()).collect(),
            oracle: e.oracle.to_string(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        capsule,
    };
    let text = toml::to_string(&manifest).map_err(io::Error::other)?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> io::Result<Manifest> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(io::Error::other)
}
