//! Instantiation and the fuel-metered interpreter.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{HostMemOutOfBounds, InstantiationError, InvokeError, TrapKind};
use crate::instr::{Instr, LoadKind};
use crate::memory::{LinearMemory, DEFAULT_PAGE_SIZE, MIN_PAGE_SIZE};
use crate::numeric::{self, NumError};
use crate::types::*;
use crate::validate::{BranchTarget, Validated, ValidatedModule, MAX_PAGES};

/// Result of running a function to completion or until it stops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecOutcome {
    Values(Vec<Value>),
    Trap(TrapKind),
    OutOfFuel,
}

impl ExecOutcome {
    pub fn is_values(&self) -> bool {
        matches!(self, ExecOutcome::Values(_))
    }
}

impl fmt::Display for ExecOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecOutcome::Values(vs) => {
                f.write_str("values[")?;
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            ExecOutcome::Trap(t) => write!(f, "trap: {t}"),
            ExecOutcome::OutOfFuel => f.write_str("out of fuel"),
        }
    }
}

/// Outcome plus the fuel it cost.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub outcome: ExecOutcome,
    pub fuel_consumed: u64,
}

/// Interpreter-side resource usage of the last invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub peak_stack_slots: usize,
    pub peak_frames: usize,
}

impl ExecStats {
    /// Bytes of interpreter state at the peak (value stack plus frames).
    pub fn peak_host_bytes(&self) -> usize {
        self.peak_stack_slots * std::mem::size_of::<Value>()
            + self.peak_frames * std::mem::size_of::<Frame>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceLimits {
    /// Bytes per linear-memory page: a power of two in `256..=65536`.
    pub page_size: u32,
    /// Upper bound on memory pages regardless of what the module declares.
    pub max_memory_pages: u32,
    /// Maximum number of nested wasm frames.
    pub call_depth: u32,
    /// Maximum number of value-stack slots (locals plus operands).
    pub max_stack_slots: usize,
    /// Fuel available to the start function.
    pub initial_fuel: u64,
    /// Canary bytes placed on each side of linear memory.
    pub guard_bytes: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self {
            page_size: DEFAULT_PAGE_SIZE,
            max_memory_pages: MAX_PAGES,
            call_depth: 512,
            max_stack_slots: 1 << 20,
            initial_fuel: 1_000_000,
            guard_bytes: 0,
        }
    }
}

/// What a host function sees while it runs: the calling instance's memory
/// and the embedder's context.
pub struct Caller<'a, T> {
    memory: Option<&'a mut LinearMemory>,
    pub data: &'a mut T,
}

impl<'a, T> Caller<'a, T> {
    pub fn memory(&self) -> Option<&LinearMemory> {
        self.memory.as_deref()
    }

    pub fn memory_mut(&mut self) -> Option<&mut LinearMemory> {
        self.memory.as_deref_mut()
    }

    /// Copy `len` bytes out of capsule memory; bad ranges trap.
    pub fn read(&self, offset: u32, len: u32) -> Result<Vec<u8>, TrapKind> {
        let mem = self.memory().ok_or(TrapKind::MemOutOfBounds)?;
        mem.read(offset, len)
            .map(<[u8]>::to_vec)
            .map_err(|_| TrapKind::MemOutOfBounds)
    }

    pub fn write(&mut self, offset: u32, bytes: &[u8]) -> Result<(), TrapKind> {
        let mem = self.memory_mut().ok_or(TrapKind::MemOutOfBounds)?;
        mem.write(offset, bytes).map_err(|_| TrapKind::MemOutOfBounds)
    }
}

pub type HostFn<T> =
    dyn Fn(&mut Caller<'_, T>, &[Value]) -> Result<Option<Value>, TrapKind> + Send + Sync;

pub struct HostFunc<T> {
    pub ty: FuncType,
    pub func: Arc<HostFn<T>>,
}

impl<T> Clone for HostFunc<T> {
    fn clone(&self) -> Self {
        Self {
            ty: self.ty.clone(),
            func: Arc::clone(&self.func),
        }
    }
}

impl<T> fmt::Debug for HostFunc<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HostFunc({})", self.ty)
    }
}

/// Host functions offered to a module, keyed by `(module, field)`.
pub struct HostImportTable<T> {
    funcs: BTreeMap<(String, String), HostFunc<T>>,
}

impl<T> Clone for HostImportTable<T> {
    fn clone(&self) -> Self {
        Self {
            funcs: self.funcs.clone(),
        }
    }
}

impl<T> Default for HostImportTable<T> {
    fn default() -> Self {
        Self {
            funcs: BTreeMap::new(),
        }
    }
}

impl<T> fmt::Debug for HostImportTable<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.funcs.keys()).finish()
    }
}

impl<T> HostImportTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn define<F>(&mut self, module: &str, field: &str, ty: FuncType, f: F) -> &mut Self
    where
        F: Fn(&mut Caller<'_, T>, &[Value]) -> Result<Option<Value>, TrapKind>
            + Send
            + Sync
            + 'static,
    {
        self.funcs.insert(
            (module.to_string(), field.to_string()),
            HostFunc {
                ty,
                func: Arc::new(f),
            },
        );
        self
    }

    pub fn get(&self, module: &str, field: &str) -> Option<&HostFunc<T>> {
        self.funcs.get(&(module.to_string(), field.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, &str)> {
        self.funcs.keys().map(|(m, f)| (m.as_str(), f.as_str()))
    }

    pub fn len(&self) -> usize {
        self.funcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.funcs.is_empty()
    }

    /// A table holding only the listed `(module, field)` entries.
    pub fn restrict<'n>(&self, allowed: impl IntoIterator<Item = (&'n str, &'n str)>) -> Self {
        let mut out = Self::new();
        for (m, f) in allowed {
            if let Some(h) = self.get(m, f) {
                out.funcs.insert((m.to_string(), f.to_string()), h.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Frame {
    /// Index among defined (non-imported) functions.
    func: usize,
    pc: usize,
    /// Stack index of local 0.
    base: usize,
}

enum Stop {
    Trap(TrapKind),
    OutOfFuel,
    Internal(String),
    Host(String),
}

impl From<TrapKind> for Stop {
    fn from(t: TrapKind) -> Self {
        Stop::Trap(t)
    }
}

fn internal(msg: &str) -> Stop {
    Stop::Internal(msg.to_string())
}

/// A live module instance.
pub struct Instance<T> {
    module: ValidatedModule,
    host: Vec<HostFunc<T>>,
    memory: Option<LinearMemory>,
    globals: Vec<Value>,
    table: Vec<Option<u32>>,
    limits: InstanceLimits,
    stats: ExecStats,
    fuel_consumed_total: u64,
    stack: Vec<Value>,
    frames: Vec<Frame>,
}

impl<T> fmt::Debug for Instance<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Instance")
            .field("memory_len", &self.memory.as_ref().map(|m| m.len()))
            .field("globals", &self.globals)
            .field("limits", &self.limits)
            .finish_non_exhaustive()
    }
}

fn eval_const(e: &ConstExpr, globals: &[Value]) -> Value {
    match *e {
        ConstExpr::I32(v) => Value::I32(v),
        ConstExpr::I64(v) => Value::I64(v),
        ConstExpr::F32(b) => Value::F32(f32::from_bits(b)),
        ConstExpr::F64(b) => Value::F64(f64::from_bits(b)),
        ConstExpr::GlobalGet(i) => globals[i as usize],
    }
}

impl<T> Instance<T> {
    pub fn instantiate(
        module: &ValidatedModule,
        imports: &HostImportTable<T>,
        limits: InstanceLimits,
        data: &mut T,
    ) -> Result<Self, InstantiationError> {
        let ps = limits.page_size;
        if !ps.is_power_of_two() || !(MIN_PAGE_SIZE..=DEFAULT_PAGE_SIZE).contains(&ps) {
            return Err(InstantiationError::InvalidLimits(
                "page size must be a power of two between 256 and 65536",
            ));
        }
        if limits.call_depth == 0 {
            return Err(InstantiationError::InvalidLimits("call depth must be positive"));
        }

        let v = &module.inner;
        let m = &v.module;
        let mut host = Vec::new();
        for imp in &m.imports {
            let unresolved = || InstantiationError::UnresolvedImport {
                module: imp.module.clone(),
                field: imp.field.clone(),
            };
            match imp.kind {
                ImportKind::Func(t) => {
                    let h = imports.get(&imp.module, &imp.field).ok_or_else(unresolved)?;
                    let expected = &m.types[t as usize];
                    if &h.ty != expected {
                        return Err(InstantiationError::SignatureMismatch {
                            module: imp.module.clone(),
                            field: imp.field.clone(),
                            expected: Box::new(expected.clone()),
                            found: Box::new(h.ty.clone()),
                        });
                    }
                    host.push(h.clone());
                }
                // Only functions can be provided by the host.
                _ => return Err(unresolved()),
            }
        }

        let memory = match m.memories.first() {
            None => None,
            Some(mt) => {
                let addr_cap = ((1u64 << 32) / ps as u64).min(u32::MAX as u64) as u32;
                let cap = mt
                    .limits
                    .max
                    .unwrap_or(MAX_PAGES)
                    .min(limits.max_memory_pages)
                    .min(addr_cap);
                if mt.limits.min > cap {
                    return Err(InstantiationError::MemoryLimitExceeded {
                        pages: mt.limits.min,
                        limit: cap,
                    });
                }
                Some(LinearMemory::new(mt.limits.min, cap, ps, limits.guard_bytes))
            }
        };

        let mut globals = Vec::with_capacity(m.globals.len());
        for g in &m.globals {
            let val = eval_const(&g.init, &globals);
            globals.push(val);
        }

        let mut table = match m.tables.first() {
            Some(t) => vec![None; t.limits.min as usize],
            None => Vec::new(),
        };

        // Check every segment before touching memory or table, so a failed
        // instantiation leaves no partial state behind.
        let mut elem_at = Vec::with_capacity(m.elements.len());
        for (i, seg) in m.elements.iter().enumerate() {
            let off = eval_const(&seg.offset, &globals).as_i32().unwrap_or(0) as u32 as usize;
            if off + seg.funcs.len() > table.len() {
                return Err(InstantiationError::ElementSegmentOutOfBounds(i as u32));
            }
            elem_at.push(off);
        }
        let mut data_at = Vec::with_capacity(m.data.len());
        for (i, seg) in m.data.iter().enumerate() {
            let off = eval_const(&seg.offset, &globals).as_i32().unwrap_or(0) as u32;
            let len = memory.as_ref().map_or(0, |mm| mm.len());
            if off as usize + seg.bytes.len() > len {
                return Err(InstantiationError::DataSegmentOutOfBounds(i as u32));
            }
            data_at.push(off);
        }
        for (seg, off) in m.elements.iter().zip(elem_at) {
            for (j, &f) in seg.funcs.iter().enumerate() {
                table[off + j] = Some(f);
            }
        }
        let mut memory = memory;
        if let Some(mem) = memory.as_mut() {
            for (seg, off) in m.data.iter().zip(data_at) {
                mem.write(off, &seg.bytes)
                    .expect("segment bounds checked above");
            }
        }

        let mut inst = Self {
            module: module.clone(),
            host,
            memory,
            globals,
            table,
            limits,
            stats: ExecStats::default(),
            fuel_consumed_total: 0,
            stack: Vec::new(),
            frames: Vec::new(),
        };

        if let Some(start) = m.start {
            let inv = inst.call_index(data, start, &[], limits.initial_fuel)?;
            if !inv.outcome.is_values() {
                return Err(InstantiationError::StartTrapped(inv.outcome));
            }
        }
        Ok(inst)
    }

    pub fn module(&self) -> &ValidatedModule {
        &self.module
    }

    pub fn limits(&self) -> &InstanceLimits {
        &self.limits
    }

    pub fn memory(&self) -> Option<&LinearMemory> {
        self.memory.as_ref()
    }

    pub fn memory_mut(&mut self) -> Option<&mut LinearMemory> {
        self.memory.as_mut()
    }

    /// Current linear memory length in bytes (0 without a memory).
    pub fn memory_len(&self) -> usize {
        self.memory.as_ref().map_or(0, |m| m.len())
    }

    /// Host-side `memory.grow`. Returns the previous page count or -1.
    pub fn memory_grow(&mut self, delta: u32) -> i32 {
        match self.memory.as_mut() {
            Some(m) => m.grow(delta),
            None => -1,
        }
    }

    /// Lower the page count `memory.grow` may reach, e.g. to enforce a RAM
    /// budget. Never raises it above the instantiation cap.
    pub fn set_memory_limit_pages(&mut self, pages: u32) {
        if let Some(m) = self.memory.as_mut() {
            m.set_limit_pages(pages);
        }
    }

    pub fn mem_read(&self, offset: u32, len: u32) -> Result<Vec<u8>, HostMemOutOfBounds> {
        match self.memory.as_ref() {
            Some(m) => m.read(offset, len).map(<[u8]>::to_vec),
            None => Err(HostMemOutOfBounds {
                offset,
                len,
                memory_len: 0,
            }),
        }
    }

    pub fn mem_write(&mut self, offset: u32, bytes: &[u8]) -> Result<(), HostMemOutOfBounds> {
        match self.memory.as_mut() {
            Some(m) => m.write(offset, bytes),
            None => Err(HostMemOutOfBounds {
                offset,
                len: bytes.len() as u32,
                memory_len: 0,
            }),
        }
    }

    /// True when the canary regions around linear memory are untouched.
    pub fn guard_intact(&self) -> bool {
        self.memory.as_ref().is_none_or(|m| m.guard_intact())
    }

    pub fn global(&self, name: &str) -> Option<Value> {
        match self.module.module().exports.get(name) {
            Some(Export {
                kind: ExportKind::Global,
                index,
            }) => self.globals.get(*index as usize).copied(),
            _ => None,
        }
    }

    pub fn last_stats(&self) -> ExecStats {
        self.stats
    }

    /// Fuel consumed by all invocations on this instance.
    pub fn fuel_consumed_total(&self) -> u64 {
        self.fuel_consumed_total
    }

    /// Call an exported function with a fuel budget.
    pub fn invoke(
        &mut self,
        data: &mut T,
        name: &str,
        args: &[Value],
        fuel: u64,
    ) -> Result<Invocation, InvokeError> {
        let index = match self.module.module().exports.get(name) {
            Some(Export {
                kind: ExportKind::Func,
                index,
            }) => *index,
            _ => return Err(InvokeError::NoSuchExport(name.to_string())),
        };
        self.call_index(data, index, args, fuel)
    }

    fn call_index(
        &mut self,
        data: &mut T,
        index: u32,
        args: &[Value],
        fuel: u64,
    ) -> Result<Invocation, InvokeError> {
        let ty = self.module.inner.func_types[index as usize].clone();
        if args.len() != ty.params.len() || args.iter().zip(&ty.params).any(|(a, p)| a.ty() != *p) {
            return Err(InvokeError::ArgTypeMismatch { expected: ty });
        }
        self.stats = ExecStats::default();
        let mut stack = std::mem::take(&mut self.stack);
        let mut frames = std::mem::take(&mut self.frames);
        stack.clear();
        frames.clear();
        stack.extend_from_slice(args);
        let mut remaining = fuel;
        let result = self.execute(data, &mut stack, &mut frames, index, &mut remaining);
        let outcome = match result {
            Ok(()) => ExecOutcome::Values(std::mem::take(&mut stack)),
            Err(Stop::Trap(t)) => ExecOutcome::Trap(t),
            Err(Stop::OutOfFuel) => ExecOutcome::OutOfFuel,
            Err(Stop::Internal(msg)) => {
                debug_assert!(false, "interpreter invariant broken: {msg}");
                self.stack = stack;
                self.frames = frames;
                return Err(InvokeError::Internal(msg));
            }
            Err(Stop::Host(msg)) => {
                self.stack = stack;
                self.frames = frames;
                return Err(InvokeError::Host(msg));
            }
        };
        if let ExecOutcome::Values(vs) = &outcome {
            if vs.len() != ty.results.len() || vs.iter().zip(&ty.results).any(|(v, r)| v.ty() != *r) {
                return Err(InvokeError::Internal("result arity or type mismatch".into()));
            }
        }
        stack.clear();
        frames.clear();
        self.stack = stack;
        self.frames = frames;
        let consumed = fuel - remaining;
        self.fuel_consumed_total += consumed;
        Ok(Invocation {
            outcome,
            fuel_consumed: consumed,
        })
    }

    fn call_host(&mut self, data: &mut T, stack: &mut Vec<Value>, index: usize) -> Result<(), Stop> {
        let h = &self.host[index];
        let n = h.ty.params.len();
        let at = stack
            .len()
            .checked_sub(n)
            .ok_or_else(|| internal("host call stack underflow"))?;
        let mut caller = Caller {
            memory: self.memory.as_mut(),
            data,
        };
        let ret = (h.func)(&mut caller, &stack[at..])?;
        stack.truncate(at);
        match (ret, h.ty.results.first()) {
            (None, None) => Ok(()),
            (Some(v), Some(&t)) if v.ty() == t => {
                stack.push(v);
                Ok(())
            }
            _ => Err(Stop::Host(format!(
                "host function returned {:?}, signature is {}",
                ret.map(|v| v.ty()),
                h.ty
            ))),
        }
    }

    /// Push a frame for defined function `func`, whose arguments are on top
    /// of the stack.
    fn enter(
        &mut self,
        v: &Validated,
        stack: &mut Vec<Value>,
        frames: &mut Vec<Frame>,
        func: usize,
    ) -> Result<Frame, Stop> {
        if frames.len() >= self.limits.call_depth as usize {
            return Err(Stop::Trap(TrapKind::StackExhausted));
        }
        let body = &v.module.funcs[func];
        let nparams = v.func_types[v.num_imported_funcs as usize + func].params.len();
        let base = stack
            .len()
            .checked_sub(nparams)
            .ok_or_else(|| internal("call stack underflow"))?;
        let need = stack.len() + body.locals.len() + v.meta[func].max_height as usize;
        if need > self.limits.max_stack_slots {
            return Err(Stop::Trap(TrapKind::StackExhausted));
        }
        stack.extend(body.locals.iter().map(|l| l.zero()));
        let frame = Frame { func, pc: 0, base };
        frames.push(frame);
        self.stats.peak_stack_slots = self.stats.peak_stack_slots.max(need);
        self.stats.peak_frames = self.stats.peak_frames.max(frames.len());
        Ok(frame)
    }

    fn execute(
        &mut self,
        data: &mut T,
        stack: &mut Vec<Value>,
        frames: &mut Vec<Frame>,
        entry: u32,
        fuel: &mut u64,
    ) -> Result<(), Stop> {
        let v = Arc::clone(&self.module.inner);
        let nimp = v.num_imported_funcs as usize;
        if (entry as usize) < nimp {
            return self.call_host(data, stack, entry as usize);
        }
        let mut fr = self.enter(&v, stack, frames, entry as usize - nimp)?;
        let mut code: &[Instr] = &v.module.funcs[fr.func].code;
        let mut meta = &v.meta[fr.func];

        macro_rules! pop {
            () => {
                match stack.pop() {
                    Some(x) => x,
                    None => return Err(internal("operand stack underflow")),
                }
            };
        }
        macro_rules! pop_i32 {
            () => {
                match pop!() {
                    Value::I32(x) => x,
                    _ => return Err(internal("expected i32 operand")),
                }
            };
        }
        macro_rules! jump {
            ($t:expr) => {{
                let t: BranchTarget = *$t;
                if t.drop > 0 {
                    let len = stack.len();
                    let keep = t.keep as usize;
                    let drop = t.drop as usize;
                    if keep + drop > len {
                        return Err(internal("branch underflow"));
                    }
                    stack.copy_within(len - keep..len, len - keep - drop);
                    stack.truncate(len - drop);
                }
                fr.pc = t.pc as usize;
            }};
        }
        macro_rules! mem {
            () => {
                match self.memory.as_mut() {
                    Some(m) => m,
                    None => return Err(internal("memory instruction without memory")),
                }
            };
        }

        loop {
            if fr.pc >= code.len() {
                let nres = v.func_types[nimp + fr.func].results.len();
                if nres == 1 {
                    let r = pop!();
                    stack.truncate(fr.base);
                    stack.push(r);
                } else {
                    stack.truncate(fr.base);
                }
                frames.pop();
                match frames.last() {
                    None => return Ok(()),
                    Some(f) => {
                        fr = *f;
                        code = &v.module.funcs[fr.func].code;
                        meta = &v.meta[fr.func];
                    }
                }
                continue;
            }
            if *fuel == 0 {
                return Err(Stop::OutOfFuel);
            }
            *fuel -= 1;
            let pc = fr.pc;
            match &code[pc] {
                Instr::Unreachable => return Err(TrapKind::Unreachable.into()),
                Instr::Nop | Instr::Block(_) | Instr::Loop(_) | Instr::End => fr.pc += 1,
                Instr::If(_) => {
                    if pop_i32!() != 0 {
                        fr.pc += 1;
                    } else {
                        jump!(meta.target(pc));
                    }
                }
                Instr::Else => jump!(meta.target(pc)),
                Instr::Br(_) => jump!(meta.target(pc)),
                Instr::BrIf(_) => {
                    if pop_i32!() != 0 {
                        jump!(meta.target(pc));
                    } else {
                        fr.pc += 1;
                    }
                }
                Instr::BrTable { labels, .. } => {
                    let i = (pop_i32!() as u32 as usize).min(labels.len());
                    jump!(meta.table_target(pc, i));
                }
                Instr::Return => fr.pc = code.len(),
                Instr::Call(f) => {
                    let f = *f as usize;
                    fr.pc += 1;
                    if f < nimp {
                        self.call_host(data, stack, f)?;
                    } else {
                        frames.last_mut().expect("frame").pc = fr.pc;
                        fr = self.enter(&v, stack, frames, f - nimp)?;
                        code = &v.module.funcs[fr.func].code;
                        meta = &v.meta[fr.func];
                    }
                }
                Instr::CallIndirect(t) => {
                    let i = pop_i32!() as u32 as usize;
                    let f = match self.table.get(i) {
                        Some(Some(f)) => *f as usize,
                        // An uninitialized element is reported as a table
                        // access fault; the TrapKind set has no null kind.
                        _ => return Err(TrapKind::TableOutOfBounds.into()),
                    };
                    if v.func_types[f] != v.module.types[*t as usize] {
                        return Err(TrapKind::IndirectCallTypeMismatch.into());
                    }
                    fr.pc += 1;
                    if f < nimp {
                        self.call_host(data, stack, f)?;
                    } else {
                        frames.last_mut().expect("frame").pc = fr.pc;
                        fr = self.enter(&v, stack, frames, f - nimp)?;
                        code = &v.module.funcs[fr.func].code;
                        meta = &v.meta[fr.func];
                    }
                }
                Instr::Drop => {
                    pop!();
                    fr.pc += 1;
                }
                Instr::Select => {
                    let c = pop_i32!();
                    let b = pop!();
                    let a = pop!();
                    stack.push(if c != 0 { a } else { b });
                    fr.pc += 1;
                }
                Instr::LocalGet(i) => {
                    let x = *stack
                        .get(fr.base + *i as usize)
                        .ok_or_else(|| internal("local out of range"))?;
                    stack.push(x);
                    fr.pc += 1;
                }
                Instr::LocalSet(i) => {
                    let x = pop!();
                    let slot = stack
                        .get_mut(fr.base + *i as usize)
                        .ok_or_else(|| internal("local out of range"))?;
                    *slot = x;
                    fr.pc += 1;
                }
                Instr::LocalTee(i) => {
                    let x = *stack.last().ok_or_else(|| internal("operand stack underflow"))?;
                    let slot = stack
                        .get_mut(fr.base + *i as usize)
                        .ok_or_else(|| internal("local out of range"))?;
                    *slot = x;
                    fr.pc += 1;
                }
                Instr::GlobalGet(i) => {
                    let x = *self
                        .globals
                        .get(*i as usize)
                        .ok_or_else(|| internal("global out of range"))?;
                    stack.push(x);
                    fr.pc += 1;
                }
                Instr::GlobalSet(i) => {
                    let x = pop!();
                    let slot = self
                        .globals
                        .get_mut(*i as usize)
                        .ok_or_else(|| internal("global out of range"))?;
                    if slot.ty() != x.ty() {
                        return Err(internal("global type confusion"));
                    }
                    *slot = x;
                    fr.pc += 1;
                }
                Instr::Load(kind, arg) => {
                    let addr = pop_i32!() as u32;
                    let mem = mem!();
                    let w = kind.width() as usize;
                    let at = mem
                        .effective(addr, arg.offset, w)
                        .ok_or(TrapKind::MemOutOfBounds)?;
                    let mut buf = [0u8; 8];
                    buf[..w].copy_from_slice(&mem.data()[at..at + w]);
                    let raw = u64::from_le_bytes(buf);
                    stack.push(load_value(*kind, raw));
                    fr.pc += 1;
                }
                Instr::Store(kind, arg) => {
                    let val = pop!();
                    let addr = pop_i32!() as u32;
                    if val.ty() != kind.operand() {
                        return Err(internal("store operand type confusion"));
                    }
                    let mem = mem!();
                    let w = kind.width() as usize;
                    let at = mem
                        .effective(addr, arg.offset, w)
                        .ok_or(TrapKind::MemOutOfBounds)?;
                    let bytes = val.to_bits().to_le_bytes();
                    mem.data_mut()[at..at + w].copy_from_slice(&bytes[..w]);
                    fr.pc += 1;
                }
                Instr::MemorySize => {
                    let pages = mem!().pages();
                    stack.push(Value::I32(pages as i32));
                    fr.pc += 1;
                }
                Instr::MemoryGrow => {
                    let delta = pop_i32!() as u32;
                    let r = mem!().grow(delta);
                    stack.push(Value::I32(r));
                    fr.pc += 1;
                }
                Instr::I32Const(x) => {
                    stack.push(Value::I32(*x));
                    fr.pc += 1;
                }
                Instr::I64Const(x) => {
                    stack.push(Value::I64(*x));
                    fr.pc += 1;
                }
                Instr::F32Const(b) => {
                    stack.push(Value::F32(f32::from_bits(*b)));
                    fr.pc += 1;
                }
                Instr::F64Const(b) => {
                    stack.push(Value::F64(f64::from_bits(*b)));
                    fr.pc += 1;
                }
                Instr::Num(op) => {
                    let r = if op.params().len() == 1 {
                        let a = pop!();
                        numeric::unary(*op, a)
                    } else {
                        let b = pop!();
                        let a = pop!();
                        numeric::binary(*op, a, b)
                    };
                    match r {
                        Ok(x) => stack.push(x),
                        Err(NumError::Trap(t)) => return Err(t.into()),
                        Err(NumError::Operand) => return Err(internal("numeric operand type confusion")),
                    }
                    fr.pc += 1;
                }
            }
        }
    }
}

fn load_value(kind: LoadKind, raw: u64) -> Value {
    use LoadKind::*;
    match kind {
        I32 => Value::I32(raw as u32 as i32),
        I64 => Value::I64(raw as i64),
        F32 => Value::F32(f32::from_bits(raw as u32)),
        F64 => Value::F64(f64::from_bits(raw)),
        I32S8 => Value::I32(raw as u8 as i8 as i32),
        I32U8 => Value::I32(raw as u8 as i32),
        I32S16 => Value::I32(raw as u16 as i16 as i32),
        I32U16 => Value::I32(raw as u16 as i32),
        I64S8 => Value::I64(raw as u8 as i8 as i64),
        I64U8 => Value::I64(raw as u8 as i64),
        I64S16 => Value::I64(raw as u16 as i16 as i64),
        I64U16 => Value::I64(raw as u16 as i64),
        I64S32 => Value::I64(raw as u32 as i32 as i64),
        I64U32 => Value::I64(raw as u32 as i64),
    }
}

