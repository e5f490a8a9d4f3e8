//! The `host` import namespace: rng, clock, log and the simulated sensors.
//!
//! | import | signature | notes |
//! |--------|-----------|-------|
//! | `rng_u32` | `() -> i32` | ChaCha8 seeded from the device config |
//! | `time_now_ms` | `() -> i64` | simulated clock, 0 at boot |
//! | `sleep_ms` | `(i32) -> ()` | advances the clock; negative counts as 0 |
//! | `log` | `(ptr i32, len i32) -> ()` | UTF-8-lossy line into the device log |
//! | `trigger_measurements` | `() -> i32` | 0 ok, 1 no sensors |
//! | `wait_for_reading` | `(filter i32, out i32) -> i32` | see [`WaitStatus`] |
//!
//! Reading record written by `wait_for_reading`, 16 bytes little-endian:
//! `label: u32 | value: f64 | reserved: u32 = 0`.

use std::collections::VecDeque;

use capsule_wasm::{Caller, FuncType, HostImportTable, TrapKind, ValType, Value};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MODULE: &str = "host";
pub const READING_LEN: u32 = 16;

/// Every binding the device offers, as `(module, field)`.
pub const ALL_BINDINGS: [&str; 6] = [
    "rng_u32",
    "time_now_ms",
    "sleep_ms",
    "log",
    "trigger_measurements",
    "wait_for_reading",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorLabel {
    Temperature = 0,
    Humidity = 1,
    Accel = 2,
    Light = 3,
}

impl SensorLabel {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: i32) -> Option<Self> {
        Some(match c {
            0 => SensorLabel::Temperature,
            1 => SensorLabel::Humidity,
            2 => SensorLabel::Accel,
            3 => SensorLabel::Light,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Waveform {
    Constant { value: f64 },
    /// `start + step * k` for the k-th measurement.
    Ramp { start: f64, step: f64 },
    /// Cycles through the list.
    Scripted { values: Vec<f64> },
}

impl Waveform {
    pub fn sample(&self, k: u64) -> f64 {
        match self {
            Waveform::Constant { value } => *value,
            Waveform::Ramp { start, step } => start + step * k as f64,
            Waveform::Scripted { values } if values.is_empty() => 0.0,
            Waveform::Scripted { values } => values[(k % values.len() as u64) as usize],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    #[serde(default)]
    pub name: String,
    pub label: SensorLabel,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSimConfig {
    #[serde(default = "default_latency")]
    pub latency_ms: u64,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
}

fn default_latency() -> u64 {
    10
}

impl Default for SensorSimConfig {
    fn default() -> Self {
        Self {
            latency_ms: default_latency(),
            sensors: Vec::new(),
        }
    }
}

impl SensorSimConfig {
    pub fn validate(&self) -> Result<(), String> {
        for s in &self.sensors {
            if let Waveform::Scripted { values } = &s.waveform {
                if values.is_empty() {
                    return Err(format!("sensor {:?}: scripted waveform needs values", s.name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorReading {
    pub label: SensorLabel,
    pub value: f64,
    pub timestamp_ms: u64,
}

impl SensorReading {
    pub fn to_bytes(&self) -> [u8; READING_LEN as usize] {
        let mut b = [0u8; READING_LEN as usize];
        b[..4].copy_from_slice(&self.label.code().to_le_bytes());
        b[4..12].copy_from_slice(&self.value.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < READING_LEN as usize {
            return None;
        }
        Some(Self {
            label: SensorLabel::from_code(u32::from_le_bytes(b[..4].try_into().ok()?) as i32)?,
            value: f64::from_le_bytes(b[4..12].try_into().ok()?),
            timestamp_ms: 0,
        })
    }
}

/// In-band results of `wait_for_reading`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaitStatus {
    Ok = 0,
    NoMatchingSensor = 1,
    NotTriggered = 2,
    BadFilter = 3,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub capsule: String,
    pub text: String,
    pub time_ms: u64,
}

/// Device-owned simulation state behind the bindings.
#[derive(Clone, Debug)]
pub struct HostState {
    rng: ChaCha8Rng,
    clock_ms: u64,
    log: VecDeque<LogEntry>,
    log_capacity: usize,
    sensors: SensorSimConfig,
    /// Completed measurement cycles; selects the waveform sample.
    cycles: u64,
    pending_ready_at: Option<u64>,
    last_readings: Vec<SensorReading>,
    /// Capsule currently executing, used to tag log lines.
    pub current_capsule: String,
}

impl HostState {
    pub fn new(seed: u64, sensors: SensorSimConfig, log_capacity: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock_ms: 0,
            log: VecDeque::new(),
            log_capacity,
            sensors,
            cycles: 0,
            pending_ready_at: None,
            last_readings: Vec::new(),
            current_capsule: String::new(),
        }
    }

    pub fn rng_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    pub fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    /// Host-side clock step.
    pub fn advance(&mut self, ms: u64) {
        self.clock_ms = self.clock_ms.saturating_add(ms);
    }

    pub fn log(&self) -> impl Iterator<Item = &LogEntry> {
        self.log.iter()
    }

    pub fn log_lines(&self) -> Vec<(String, String)> {
        self.log
            .iter()
            .map(|e| (e.capsule.clone(), e.text.clone()))
            .collect()
    }

    pub fn push_log(&mut self, text: String) {
        if self.log_capacity == 0 {
            return;
        }
        while self.log.len() >= self.log_capacity {
            self.log.pop_front();
        }
        self.log.push_back(LogEntry {
            capsule: self.current_capsule.clone(),
            text,
            time_ms: self.clock_ms,
        });
    }

    pub fn trigger(&mut self) -> i32 {
        if self.sensors.sensors.is_empty() {
            return 1;
        }
        // A second trigger restarts the latency.
        self.pending_ready_at = Some(self.clock_ms + self.sensors.latency_ms);
        0
    }

    /// Complete a pending measurement and return the first match.
    pub fn wait(&mut self, filter: i32) -> Result<SensorReading, WaitStatus> {
        let want = match filter {
            -1 => None,
            c => Some(SensorLabel::from_code(c).ok_or(WaitStatus::BadFilter)?),
        };
        let idx = self
            .sensors
            .sensors
            .iter()
            .position(|s| want.is_none_or(|l| s.label == l))
            .ok_or(WaitStatus::NoMatchingSensor)?;
        let ready_at = self.pending_ready_at.take().ok_or(WaitStatus::NotTriggered)?;
        self.clock_ms = self.clock_ms.max(ready_at);
        let k = self.cycles;
        self.cycles += 1;
        self.last_readings = self
            .sensors
            .sensors
            .iter()
            .map(|s| SensorReading {
                label: s.label,
                value: s.waveform.sample(k),
                timestamp_ms: self.clock_ms,
            })
            .collect();
        Ok(self.last_readings[idx])
    }

    pub fn last_readings(&self) -> &[SensorReading] {
        &self.last_readings
    }
}

fn arg_i32(args: &[Value], i: usize) -> i32 {
    args.get(i).and_then(Value::as_i32).unwrap_or(0)
}

/// The full binding table. Restrict it with [`HostImportTable::restrict`]
/// to scope a capsule's capabilities.
pub fn host_imports() -> HostImportTable<HostState> {
    use ValType::*;
    let mut t = HostImportTable::new();
    t.define(MODULE, "rng_u32", FuncType::new([], [I32]), |c: &mut Caller<'_, HostState>, _| {
        Ok(Some(Value::I32(c.data.rng_u32() as i32)))
    });
    t.define(MODULE, "time_now_ms", FuncType::new([], [I64]), |c: &mut Caller<'_, HostState>, _| {
        Ok(Some(Value::I64(c.data.now_ms() as i64)))
    });
    t.define(MODULE, "sleep_ms", FuncType::new([I32], []), |c: &mut Caller<'_, HostState>, a| {
        c.data.advance(arg_i32(a, 0).max(0) as u64);
        Ok(None)
    });
    t.define(MODULE, "log", FuncType::new([I32, I32], []), |c: &mut Caller<'_, HostState>, a| {
        let bytes = c.read(arg_i32(a, 0) as u32, arg_i32(a, 1) as u32)?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        c.data.push_log(text);
        Ok(None)
    });
    t.define(
        MODULE,
        "trigger_measurements",
        FuncType::new([], [I32]),
        |c: &mut Caller<'_, HostState>, _| Ok(Some(Value::I32(c.data.trigger()))),
    );
    t.define(
        MODULE,
        "wait_for_reading",
        FuncType::new([I32, I32], [I32]),
        |c: &mut Caller<'_, HostState>, a| {
            let out = arg_i32(a, 1) as u32;
            // Bounds first, so a bad pointer traps without consuming a reading.
            let in_bounds = c
                .memory()
                .is_some_and(|m| m.effective(out, 0, READING_LEN as usize).is_some());
            if !in_bounds {
                return Err(TrapKind::MemOutOfBounds);
            }
            match c.data.wait(arg_i32(a, 0)) {
                Ok(r) => {
                    c.write(out, &r.to_bytes())?;
                    Ok(Some(Value::I32(WaitStatus::Ok as i32)))
                }
                Err(s) => Ok(Some(Value::I32(s as i32))),
            }
        },
    );
    t
}
