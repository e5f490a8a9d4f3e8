//! Capsule lifecycle under device resource budgets.
//!
//! In-capsule ABI (all integers little-endian):
//!
//! | message | layout |
//! |---------|--------|
//! | request | `method: u8` (1 GET, 2 POST, 3 PUT, 4 DELETE) `| path_len: u16 | path | payload` |
//! | response | `code: u8` (CoAP code byte) `| payload` |
//! | `run`/`handle` result | `i64 = (ptr << 32) \| len` |
//!
//! Required exports: ephemeral `alloc(i32)->i32`, `run(i32,i32)->i64`;
//! persistent `alloc(i32)->i32`, `init()->i32`, `handle(i32,i32)->i64`.
//! The `alloc` call and the `run`/`handle` call share one fuel budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use capsule_wasm::{
    load, ExecOutcome, FuncType, HostImportTable, Instance, InstanceLimits, InstantiationError,
    InvokeError, LoadError, TrapKind, ValType, ValidatedModule, Value,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coap::code;
use crate::host::{host_imports, HostState, ALL_BINDINGS, MODULE};

pub const RESERVED_PREFIXES: [&str; 3] = ["vm-control", "well-known", ".well-known"];
pub const DEFAULT_INSTANCE_OVERHEAD: u64 = 4096;
pub const DEFAULT_EPHEMERAL_FUEL: u64 = 10_000_000;
pub const DEFAULT_REQUEST_FUEL: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    pub page_size: u32,
    pub ram_budget: u64,
    pub flash_budget: u64,
    pub instance_overhead: u64,
    pub ephemeral_fuel: u64,
    pub request_fuel: u64,
    pub call_depth: u32,
    /// Canary bytes around each linear memory (0 disables).
    pub guard_bytes: usize,
    /// Host bindings capsules on this device may link against.
    pub allowed_bindings: Vec<String>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            page_size: 32768,
            ram_budget: 256 * 1024,
            flash_budget: 1024 * 1024,
            instance_overhead: DEFAULT_INSTANCE_OVERHEAD,
            ephemeral_fuel: DEFAULT_EPHEMERAL_FUEL,
            request_fuel: DEFAULT_REQUEST_FUEL,
            call_depth: 512,
            guard_bytes: 0,
            allowed_bindings: ALL_BINDINGS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CapsuleKind {
    Ephemeral,
    Persistent(String),
}

impl fmt::Display for CapsuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapsuleKind::Ephemeral => f.write_str("ephemeral"),
            CapsuleKind::Persistent(_) => f.write_str("persistent"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapsuleState {
    Initializing,
    Ready,
    Terminated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ResourceBudget {
    pub flash_budget: u64,
    pub ram_budget: u64,
    pub flash_used: u64,
    pub ram_used: u64,
}

impl ResourceBudget {
    pub fn ram_available(&self) -> u64 {
        self.ram_budget.saturating_sub(self.ram_used)
    }

    pub fn flash_available(&self) -> u64 {
        self.flash_budget.saturating_sub(self.flash_used)
    }
}

/// `linear_memory + bytecode + overhead`.
pub fn estimate_ram(linear_memory: u64, bytecode_size: u64, overhead: u64) -> u64 {
    linear_memory + bytecode_size + overhead
}

/// Admit `estimate` more bytes of RAM, with `released` bytes counted as free.
pub fn admit(budget: &ResourceBudget, estimate: u64, released: u64) -> Result<(), CapsuleError> {
    let available = budget.ram_available() + released;
    if estimate > available {
        return Err(CapsuleError::BudgetExceeded {
            resource: "ram",
            needed: estimate,
            available,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitFailure {
    Code(i32),
    Trap(TrapKind),
    OutOfFuel,
}

impl fmt::Display for InitFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitFailure::Code(c) => write!(f, "init returned {c}"),
            InitFailure::Trap(t) => write!(f, "init trapped: {t}"),
            InitFailure::OutOfFuel => f.write_str("init ran out of fuel"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum CapsuleError {
    #[error("prefix {0:?} must match [a-z0-9-]{{1,32}} and not be reserved")]
    InvalidPrefix(String),
    #[error("prefix {0:?} already taken")]
    PrefixTaken(String),
    #[error("validation failed: {0}")]
    ValidationFailed(#[from] LoadError),
    #[error("missing or mistyped export {0:?}")]
    MissingExport(&'static str),
    #[error("instantiation failed: {0}")]
    LinkFailed(InstantiationError),
    #[error("{0}")]
    InitFailed(InitFailure),
    #[error("{resource} budget exceeded: need {needed} bytes, {available} available")]
    BudgetExceeded {
        resource: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("no capsule {0:?}")]
    CapsuleNotFound(String),
    #[error("capsule trapped: {0}")]
    Trapped(TrapKind),
    #[error("capsule ran out of fuel after {consumed}")]
    OutOfFuel { consumed: u64 },
    #[error("host error: {0}")]
    Host(String),
}

impl CapsuleError {
    fn from_invoke(e: InvokeError) -> Self {
        match e {
            // Exports are type-checked before any invoke, so these only
            // come from misbehaving host functions.
            InvokeError::NoSuchExport(_) | InvokeError::ArgTypeMismatch { .. } => {
                CapsuleError::Host(e.to_string())
            }
            InvokeError::Internal(m) | InvokeError::Host(m) => CapsuleError::Host(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleRequest {
    pub method: u8,
    /// Sub-path below the capsule prefix, no leading slash.
    pub path: String,
    pub payload: Vec<u8>,
}

impl CapsuleRequest {
    pub fn new(method: u8, path: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            method,
            path: path.into(),
            payload: payload.into(),
        }
    }

    pub fn get(path: impl Into<String>) -> Self {
        Self::new(code::GET, path, Vec::new())
    }

    pub fn encode(&self) -> Vec<u8> {
        let path = self.path.as_bytes();
        let mut out = Vec::with_capacity(3 + path.len() + self.payload.len());
        out.push(self.method);
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        let (&method, rest) = b.split_first()?;
        let plen = u16::from_le_bytes(rest.get(..2)?.try_into().ok()?) as usize;
        let path = rest.get(2..2 + plen)?;
        Some(Self {
            method,
            path: String::from_utf8(path.to_vec()).ok()?,
            payload: rest[2 + plen..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleResponse {
    pub code: u8,
    pub payload: Vec<u8>,
}

impl CapsuleResponse {
    /// An empty response is reported as 5.00.
    pub fn decode(b: &[u8]) -> Self {
        match b.split_first() {
            Some((&code, payload)) => Self {
                code,
                payload: payload.to_vec(),
            },
            None => Self {
                code: code::INTERNAL_SERVER_ERROR,
                payload: Vec::new(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EphemeralOutput {
    pub id: String,
    pub output: Vec<u8>,
    pub fuel_consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Handled {
    pub response: CapsuleResponse,
    pub fuel_consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CapsuleInfo {
    pub id: String,
    pub version: u32,
    pub kind: String,
    pub ram_estimate: u64,
}

pub struct Capsule {
    pub id: String,
    pub kind: CapsuleKind,
    pub bytecode_size: u64,
    pub version: u32,
    pub fuel_budget: u64,
    pub state: CapsuleState,
    instance: Instance<HostState>,
}

impl fmt::Debug for Capsule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Capsule")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("version", &self.version)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl Capsule {
    pub fn instance(&self) -> &Instance<HostState> {
        &self.instance
    }

    pub fn linear_memory(&self) -> u64 {
        self.instance.memory_len() as u64
    }

    fn estimate(&self, overhead: u64) -> u64 {
        estimate_ram(self.linear_memory(), self.bytecode_size, overhead)
    }
}

pub fn valid_prefix(p: &str) -> bool {
    (1..=32).contains(&p.len())
        && p.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        && !RESERVED_PREFIXES.contains(&p)
}

fn check_export(m: &ValidatedModule, name: &'static str, ty: FuncType) -> Result<(), CapsuleError> {
    match m.export_func_type(name) {
        Some(t) if *t == ty => Ok(()),
        _ => Err(CapsuleError::MissingExport(name)),
    }
}

fn check_abi(m: &ValidatedModule, persistent: bool) -> Result<(), CapsuleError> {
    use ValType::*;
    check_export(m, "alloc", FuncType::new([I32], [I32]))?;
    if persistent {
        check_export(m, "init", FuncType::new([], [I32]))?;
        check_export(m, "handle", FuncType::new([I32, I32], [I64]))
    } else {
        check_export(m, "run", FuncType::new([I32, I32], [I64]))
    }
}

fn initial_memory(m: &ValidatedModule, page_size: u32) -> u64 {
    m.module()
        .memories
        .first()
        .map_or(0, |mt| mt.limits.min as u64 * page_size as u64)
}

fn outcome_value(outcome: ExecOutcome, consumed: u64) -> Result<Value, CapsuleError> {
    match outcome {
        ExecOutcome::Values(vs) => vs
            .into_iter()
            .next()
            .ok_or_else(|| CapsuleError::Host("missing result".into())),
        ExecOutcome::Trap(t) => Err(CapsuleError::Trapped(t)),
        ExecOutcome::OutOfFuel => Err(CapsuleError::OutOfFuel { consumed }),
    }
}

/// Pass `input` through `alloc` and call `entry`, returning the bytes the
/// packed result points at and the total fuel.
fn call_abi(
    inst: &mut Instance<HostState>,
    host: &mut HostState,
    entry: &str,
    input: &[u8],
    fuel: u64,
) -> Result<(Vec<u8>, u64), CapsuleError> {
    let len = input.len() as i32;
    let a = inst
        .invoke(host, "alloc", &[Value::I32(len)], fuel)
        .map_err(CapsuleError::from_invoke)?;
    let mut used = a.fuel_consumed;
    let ptr = outcome_value(a.outcome, used)?.as_i32().unwrap_or(0);
    inst.mem_write(ptr as u32, input)
        .map_err(|_| CapsuleError::Trapped(TrapKind::MemOutOfBounds))?;
    let r = inst
        .invoke(host, entry, &[Value::I32(ptr), Value::I32(len)], fuel - used)
        .map_err(CapsuleError::from_invoke)?;
    used += r.fuel_consumed;
    let packed = outcome_value(r.outcome, used)?.as_i64().unwrap_or(0) as u64;
    let (optr, olen) = ((packed >> 32) as u32, packed as u32);
    let out = inst
        .mem_read(optr, olen)
        .map_err(|_| CapsuleError::Trapped(TrapKind::MemOutOfBounds))?;
    Ok((out, used))
}

/// All capsules on one device plus the host state their bindings act on.
pub struct CapsuleManager {
    config: ManagerConfig,
    capsules: BTreeMap<String, Capsule>,
    budget: ResourceBudget,
    next_ephemeral: u64,
    host: HostState,
    imports: HostImportTable<HostState>,
}

impl fmt::Debug for CapsuleManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CapsuleManager")
            .field("capsules", &self.capsules)
            .field("budget", &self.budget)
            .finish_non_exhaustive()
    }
}

impl CapsuleManager {
    pub fn new(config: ManagerConfig, host: HostState) -> Self {
        let allowed: BTreeSet<&str> = config.allowed_bindings.iter().map(String::as_str).collect();
        let imports = host_imports().restrict(allowed.into_iter().map(|f| (MODULE, f)));
        Self {
            budget: ResourceBudget {
                flash_budget: config.flash_budget,
                ram_budget: config.ram_budget,
                ..Default::default()
            },
            config,
            capsules: BTreeMap::new(),
            next_ephemeral: 0,
            host,
            imports,
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn host(&self) -> &HostState {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut HostState {
        &mut self.host
    }

    pub fn budget(&self) -> ResourceBudget {
        self.budget
    }

    pub fn get(&self, prefix: &str) -> Option<&Capsule> {
        self.capsules.get(prefix)
    }

    pub fn prefixes(&self) -> impl Iterator<Item = &str> {
        self.capsules.keys().map(String::as_str)
    }

    pub fn list(&self) -> Vec<CapsuleInfo> {
        self.capsules
            .values()
            .map(|c| CapsuleInfo {
                id: c.id.clone(),
                version: c.version,
                kind: c.kind.to_string(),
                ram_estimate: c.estimate(self.config.instance_overhead),
            })
            .collect()
    }

    /// `(ram, flash)` summed from scratch over live capsules.
    pub fn recompute(&self) -> (u64, u64) {
        self.capsules.values().fold((0, 0), |(r, f), c| {
            (r + c.estimate(self.config.instance_overhead), f + c.bytecode_size)
        })
    }

    fn refresh_accounting(&mut self) {
        let (ram, flash) = self.recompute();
        self.budget.ram_used = ram;
        self.budget.flash_used = flash;
    }

    fn limits(&self, fuel: u64) -> InstanceLimits {
        InstanceLimits {
            page_size: self.config.page_size,
            call_depth: self.config.call_depth,
            initial_fuel: fuel,
            guard_bytes: self.config.guard_bytes,
            ..Default::default()
        }
    }

    /// Pages a capsule may hold given `ram_free` bytes for it in total.
    fn page_cap(&self, ram_free: u64, bytecode: u64) -> u32 {
        let mem = ram_free.saturating_sub(bytecode + self.config.instance_overhead);
        (mem / self.config.page_size.max(1) as u64).min(u32::MAX as u64) as u32
    }

    /// Validate, check the ABI, admit against both budgets and instantiate.
    /// `released` is the (ram, flash) a replaced capsule gives back.
    fn prepare(
        &mut self,
        id: &str,
        bytecode: &[u8],
        persistent: bool,
        fuel: u64,
        released: (u64, u64),
    ) -> Result<Instance<HostState>, CapsuleError> {
        let module = load(bytecode)?;
        check_abi(&module, persistent)?;
        let size = bytecode.len() as u64;
        let flash_free = self.budget.flash_available() + released.1;
        if size > flash_free {
            return Err(CapsuleError::BudgetExceeded {
                resource: "flash",
                needed: size,
                available: flash_free,
            });
        }
        let est = estimate_ram(initial_memory(&module, self.config.page_size), size, self.config.instance_overhead);
        admit(&self.budget, est, released.0)?;
        let ram_free = self.budget.ram_available() + released.0;
        let mut limits = self.limits(fuel);
        limits.max_memory_pages = self.page_cap(ram_free, size);
        self.host.current_capsule = id.to_string();
        Instance::instantiate(&module, &self.imports, limits, &mut self.host).map_err(|e| match e {
            InstantiationError::StartTrapped(ExecOutcome::Trap(t)) if persistent => {
                CapsuleError::InitFailed(InitFailure::Trap(t))
            }
            InstantiationError::StartTrapped(ExecOutcome::OutOfFuel) if persistent => {
                CapsuleError::InitFailed(InitFailure::OutOfFuel)
            }
            InstantiationError::StartTrapped(ExecOutcome::Trap(t)) => CapsuleError::Trapped(t),
            InstantiationError::StartTrapped(ExecOutcome::OutOfFuel) => {
                CapsuleError::OutOfFuel { consumed: fuel }
            }
            InstantiationError::Invoke(e) => CapsuleError::from_invoke(e),
            other => CapsuleError::LinkFailed(other),
        })
    }

    fn run_init(&mut self, inst: &mut Instance<HostState>, fuel: u64) -> Result<(), CapsuleError> {
        let r = inst
            .invoke(&mut self.host, "init", &[], fuel)
            .map_err(CapsuleError::from_invoke)?;
        match r.outcome {
            ExecOutcome::Values(v) if v.first() == Some(&Value::I32(0)) => Ok(()),
            ExecOutcome::Values(v) => Err(CapsuleError::InitFailed(InitFailure::Code(
                v.first().and_then(Value::as_i32).unwrap_or(-1),
            ))),
            ExecOutcome::Trap(t) => Err(CapsuleError::InitFailed(InitFailure::Trap(t))),
            ExecOutcome::OutOfFuel => Err(CapsuleError::InitFailed(InitFailure::OutOfFuel)),
        }
    }

    /// Launch, run to completion, release.
    pub fn run_ephemeral(&mut self, bytecode: &[u8], input: &[u8], fuel: u64) -> Result<EphemeralOutput, CapsuleError> {
        self.next_ephemeral += 1;
        let id = format!("eph-{}", self.next_ephemeral);
        let mut inst = self.prepare(&id, bytecode, false, fuel, (0, 0))?;
        let (output, fuel_consumed) = call_abi(&mut inst, &mut self.host, "run", input, fuel)?;
        Ok(EphemeralOutput {
            id,
            output,
            fuel_consumed,
        })
    }

    pub fn deploy_persistent(&mut self, bytecode: &[u8], prefix: &str) -> Result<CapsuleInfo, CapsuleError> {
        if !valid_prefix(prefix) {
            return Err(CapsuleError::InvalidPrefix(prefix.to_string()));
        }
        if self.capsules.contains_key(prefix) {
            return Err(CapsuleError::PrefixTaken(prefix.to_string()));
        }
        self.install(prefix, bytecode, 1, (0, 0))
    }

    fn install(&mut self, prefix: &str, bytecode: &[u8], version: u32, released: (u64, u64)) -> Result<CapsuleInfo, CapsuleError> {
        let fuel = self.config.request_fuel;
        let mut inst = self.prepare(prefix, bytecode, true, fuel, released)?;
        self.run_init(&mut inst, fuel)?;
        let capsule = Capsule {
            id: prefix.to_string(),
            kind: CapsuleKind::Persistent(prefix.to_string()),
            bytecode_size: bytecode.len() as u64,
            version,
            fuel_budget: fuel,
            state: CapsuleState::Ready,
            instance: inst,
        };
        let info = CapsuleInfo {
            id: capsule.id.clone(),
            version,
            kind: capsule.kind.to_string(),
            ram_estimate: capsule.estimate(self.config.instance_overhead),
        };
        // `init` may have grown memory; it was capped by the same headroom.
        self.capsules.insert(prefix.to_string(), capsule);
        self.refresh_accounting();
        Ok(info)
    }

    /// Swap in new bytecode. Any failure leaves the old version serving.
    pub fn update_capsule(&mut self, prefix: &str, bytecode: &[u8]) -> Result<CapsuleInfo, CapsuleError> {
        let old = self
            .capsules
            .get(prefix)
            .ok_or_else(|| CapsuleError::CapsuleNotFound(prefix.to_string()))?;
        let released = (old.estimate(self.config.instance_overhead), old.bytecode_size);
        let version = old.version + 1;
        let fuel = self.config.request_fuel;
        let mut inst = self.prepare(prefix, bytecode, true, fuel, released)?;
        self.run_init(&mut inst, fuel)?;
        let c = self.capsules.get_mut(prefix).expect("checked above");
        c.state = CapsuleState::Terminated;
        c.instance = inst;
        c.bytecode_size = bytecode.len() as u64;
        c.version = version;
        c.state = CapsuleState::Ready;
        self.refresh_accounting();
        let c = &self.capsules[prefix];
        Ok(CapsuleInfo {
            id: c.id.clone(),
            version,
            kind: c.kind.to_string(),
            ram_estimate: c.estimate(self.config.instance_overhead),
        })
    }

    pub fn terminate(&mut self, prefix: &str) -> Result<CapsuleInfo, CapsuleError> {
        let mut c = self
            .capsules
            .remove(prefix)
            .ok_or_else(|| CapsuleError::CapsuleNotFound(prefix.to_string()))?;
        c.state = CapsuleState::Terminated;
        self.refresh_accounting();
        Ok(CapsuleInfo {
            id: c.id.clone(),
            version: c.version,
            kind: c.kind.to_string(),
            ram_estimate: c.estimate(self.config.instance_overhead),
        })
    }

    /// Route a request into a persistent capsule. Traps and fuel
    /// exhaustion are returned as errors; the capsule stays Ready.
    pub fn handle_request(&mut self, prefix: &str, req: &CapsuleRequest) -> Result<Handled, CapsuleError> {
        let overhead = self.config.instance_overhead;
        let ram_free = {
            let c = self
                .capsules
                .get(prefix)
                .ok_or_else(|| CapsuleError::CapsuleNotFound(prefix.to_string()))?;
            self.budget.ram_available() + c.estimate(overhead)
        };
        let c = &self.capsules[prefix];
        let cap = self.page_cap(ram_free, c.bytecode_size);
        let fuel = c.fuel_budget;
        self.host.current_capsule = prefix.to_string();
        let c = self.capsules.get_mut(prefix).expect("checked above");
        c.instance.set_memory_limit_pages(cap);
        let result = call_abi(&mut c.instance, &mut self.host, "handle", &req.encode(), fuel);
        self.refresh_accounting();
        let (out, fuel_consumed) = result?;
        Ok(Handled {
            response: CapsuleResponse::decode(&out),
            fuel_consumed,
        })
    }
}
