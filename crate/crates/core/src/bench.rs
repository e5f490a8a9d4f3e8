//! Timing, fuel and peak-memory measurement of capsule exports.
//!
//! Each iteration gets a fresh instance; only the `invoke` is timed.
//! Geometric statistics cover the post-warmup iterations: the geometric
//! mean, and the geometric standard deviation `exp(sd(ln t))` (a factor,
//! so 1.05 means 5%).
//!
//! Thread CPU time is recorded next to wall time where the platform has it.
//! It excludes time other processes ran on the same core, which is what
//! separates interpreter jitter from a busy machine. It is not part of the
//! CSV/JSONL columns.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use capsule_wasm::{load, ExecOutcome, Instance, InstanceLimits, ValidatedModule, Value};
use serde::Serialize;
use thiserror::Error;

use crate::host::{host_imports, HostState, SensorSimConfig};

pub const CSV_COLUMNS: [&str; 8] = [
    "name",
    "iter",
    "time_us",
    "fuel",
    "peak_linmem",
    "peak_hostmem",
    "gmean_us",
    "gstd",
];

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub name: String,
    pub wasm: Vec<u8>,
    pub export: String,
    pub args: Vec<Value>,
    pub iterations: usize,
    pub warmup: usize,
    pub fuel: u64,
    pub page_size: u32,
    pub rng_seed: u64,
    pub sensors: SensorSimConfig,
}

impl BenchSpec {
    pub fn new(name: impl Into<String>, wasm: Vec<u8>, export: impl Into<String>, args: Vec<Value>) -> Self {
        Self {
            name: name.into(),
            wasm,
            export: export.into(),
            args,
            iterations: 10,
            warmup: 1,
            fuel: 1_000_000_000,
            page_size: 32768,
            rng_seed: 0,
            sensors: SensorSimConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least 3 iterations are needed, got {0}")]
    TooFewIterations(usize),
    #[error("capsule rejected: {0}")]
    Load(#[from] capsule_wasm::LoadError),
    #[error("instantiation failed: {0}")]
    Instantiate(#[from] capsule_wasm::InstantiationError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub time_us: f64,
    /// Thread CPU time, when available.
    pub cpu_us: Option<f64>,
    pub fuel: u64,
    pub peak_linmem: u64,
    pub peak_hostmem: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub name: String,
    pub rows: Vec<IterationRecord>,
    pub gmean_us: f64,
    pub gstd: f64,
    /// Geometric standard deviation of thread CPU time.
    pub gstd_cpu: Option<f64>,
    /// False when an iteration failed; `rows` then holds what completed.
    pub valid: bool,
    pub error: Option<String>,
    pub outcome: Option<String>,
}

impl BenchReport {
    pub fn fuel_identical(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].fuel == w[1].fuel)
    }

    pub fn fuel(&self) -> Option<u64> {
        self.rows.first().map(|r| r.fuel)
    }
}

/// `(geometric mean, geometric standard deviation)` of positive samples.
pub fn geometric_stats(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let logs: Vec<f64> = samples.iter().map(|t| t.max(f64::MIN_POSITIVE).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = if logs.len() > 1 {
        logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean.exp(), var.sqrt().exp())
}

#[cfg(unix)]
fn thread_cpu_time() -> Option<Duration> {
    let mut t = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `t` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut t) };
    (rc == 0).then(|| Duration::new(t.tv_sec as u64, t.tv_nsec as u32))
}

#[cfg(not(unix))]
fn thread_cpu_time() -> Option<Duration> {
    None
}

fn run_once(
    module: &ValidatedModule,
    spec: &BenchSpec,
    limits: InstanceLimits,
    iter: usize,
) -> Result<(IterationRecord, ExecOutcome), String> {
    let imports = host_imports();
    let mut host = HostState::new(spec.rng_seed, spec.sensors.clone(), 64);
    let mut inst = Instance::instantiate(module, &imports, limits, &mut host).map_err(|e| e.to_string())?;
    let cpu_start = thread_cpu_time();
    let start = Instant::now();
    let r = inst.invoke(&mut host, &spec.export, &spec.args, spec.fuel);
    let elapsed = start.elapsed();
    let cpu = cpu_start.zip(thread_cpu_time()).map(|(a, b)| (b - a).as_secs_f64() * 1e6);
    let r = r.map_err(|e| e.to_string())?;
    let rec = IterationRecord {
        iter,
        time_us: elapsed.as_secs_f64() * 1e6,
        cpu_us: cpu,
        fuel: r.fuel_consumed,
        // Memory never shrinks, so the final length is the peak.
        peak_linmem: inst.memory_len() as u64,
        peak_hostmem: inst.last_stats().peak_host_bytes() as u64,
    };
    Ok((rec, r.outcome))
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    if spec.iterations < 3 {
        return Err(BenchError::TooFewIterations(spec.iterations));
    }
    let module = load(&spec.wasm)?;
    let limits = InstanceLimits {
        page_size: spec.page_size,
        initial_fuel: spec.fuel,
        ..Default::default()
    };
    // Surface link errors up front rather than as a failed iteration.
    Instance::instantiate(
        &module,
        &host_imports(),
        limits,
        &mut HostState::new(spec.rng_seed, spec.sensors.clone(), 64),
    )?;
    let mut rows = Vec::with_capacity(spec.iterations);
    let mut error = None;
    let mut outcome = None;
    for i in 0..spec.warmup + spec.iterations {
        match run_once(&module, spec, limits, i.saturating_sub(spec.warmup)) {
            Ok((rec, out)) => {
                if !out.is_values() {
                    error = Some(out.to_string());
                    break;
                }
                outcome = Some(out.to_string());
                if i >= spec.warmup {
                    rows.push(rec);
                }
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let times: Vec<f64> = rows.iter().map(|r| r.time_us).collect();
    let (gmean_us, gstd) = geometric_stats(&times);
    let cpu: Option<Vec<f64>> = rows.iter().map(|r| r.cpu_us).collect();
    let gstd_cpu = cpu.filter(|c| !c.is_empty()).map(|c| geometric_stats(&c).1);
    Ok(BenchReport {
        name: spec.name.clone(),
        valid: error.is_none(),
        rows,
        gmean_us,
        gstd,
        gstd_cpu,
        error,
        outcome,
    })
}

#[derive(Serialize)]
struct Row<'a> {
    name: &'a str,
    iter: usize,
    time_us: f64,
    fuel: u64,
    peak_linmem: u64,
    peak_hostmem: u64,
    gmean_us: f64,
    gstd: f64,
}

fn rows(reports: &[BenchReport]) -> impl Iterator<Item = Row<'_>> {
    reports.iter().flat_map(|r| {
        r.rows.iter().map(move |x| Row {
            name: &r.name,
            iter: x.iter,
            time_us: x.time_us,
            fuel: x.fuel,
            peak_linmem: x.peak_linmem,
            peak_hostmem: x.peak_hostmem,
            gmean_us: r.gmean_us,
            gstd: r.gstd,
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

pub fn emit<W: Write>(reports: &[BenchReport], format: ReportFormat, out: W) -> io::Result<()> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(CSV_COLUMNS)?;
            for row in rows(reports) {
                w.serialize(row)?;
            }
            w.flush()
        }
        ReportFormat::Jsonl => {
            let mut out = out;
            for row in rows(reports) {
                serde_json::to_writer(&mut out, &row)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        }
    }
}
