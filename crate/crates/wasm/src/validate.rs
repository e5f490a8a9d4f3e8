//! Module validation and branch side-table construction.
//!
//! Function bodies are type-checked with the operand-stack algorithm from
//! the core specification appendix, including stack polymorphism after
//! unconditional control transfers. While checking, every branching
//! instruction gets a resolved [`BranchTarget`] so the interpreter never has
//! to maintain a runtime label stack.

use std::sync::Arc;

use crate::error::ValidationError;
use crate::instr::{Instr, NumOp};
use crate::parser::{FuncBody, WasmModule};
use crate::types::*;

/// Largest page count a memory may declare.
pub const MAX_PAGES: u32 = 65536;

const NO_TARGET: u32 = u32::MAX;

/// A resolved branch: continue at `pc`, keeping the top `keep` operands and
/// discarding the `drop` operands beneath them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchTarget {
    pub pc: u32,
    pub keep: u32,
    pub drop: u32,
}

/// Per-function data computed during validation.
#[derive(Clone, Debug, Default)]
pub struct FuncMeta {
    /// For each instruction, index into `targets` (or `u32::MAX`).
    /// `br_table` owns `labels.len() + 1` consecutive entries.
    pub side: Vec<u32>,
    pub targets: Vec<BranchTarget>,
    /// Highest operand-stack height reached, excluding locals.
    pub max_height: u32,
}

impl FuncMeta {
    #[inline]
    pub fn target(&self, pc: usize) -> &BranchTarget {
        &self.targets[self.side[pc] as usize]
    }

    #[inline]
    pub fn table_target(&self, pc: usize, index: usize) -> &BranchTarget {
        &self.targets[self.side[pc] as usize + index]
    }
}

#[derive(Debug)]
pub(crate) struct Validated {
    pub module: WasmModule,
    /// Type of every function in the index space (imports first).
    pub func_types: Vec<FuncType>,
    pub num_imported_funcs: u32,
    pub meta: Vec<FuncMeta>,
}

/// A module that passed validation. Cheap to clone.
#[derive(Clone, Debug)]
pub struct ValidatedModule {
    pub(crate) inner: Arc<Validated>,
}

impl ValidatedModule {
    pub fn module(&self) -> &WasmModule {
        &self.inner.module
    }

    pub fn func_type(&self, index: u32) -> Option<&FuncType> {
        self.inner.func_types.get(index as usize)
    }

    /// Signature of an exported function, if the export exists and is one.
    pub fn export_func_type(&self, name: &str) -> Option<&FuncType> {
        match self.inner.module.exports.get(name) {
            Some(Export {
                kind: ExportKind::Func,
                index,
            }) => self.func_type(*index),
            _ => None,
        }
    }

    /// `(module, field, signature)` of each imported function.
    pub fn func_imports(&self) -> impl Iterator<Item = (&str, &str, &FuncType)> {
        self.inner
            .module
            .imported_funcs()
            .map(|(imp, t)| {
                (
                    imp.module.as_str(),
                    imp.field.as_str(),
                    &self.inner.module.types[t as usize],
                )
            })
    }

    pub fn meta(&self, defined_index: usize) -> &FuncMeta {
        &self.inner.meta[defined_index]
    }
}

type Result<T> = std::result::Result<T, ValidationError>;

/// Validate a parsed module.
pub fn validate(module: WasmModule) -> Result<ValidatedModule> {
    let type_of = |t: u32| -> Result<FuncType> {
        module
            .types
            .get(t as usize)
            .cloned()
            .ok_or(ValidationError::UnknownType(t))
    };

    let mut func_types = Vec::new();
    let mut global_types = Vec::new();
    let mut tables = 0usize;
    let mut memories = 0usize;
    for imp in &module.imports {
        match imp.kind {
            ImportKind::Func(t) => func_types.push(type_of(t)?),
            ImportKind::Table(tt) => {
                tables += 1;
                check_limits(tt.limits, u32::MAX)?;
            }
            ImportKind::Memory(mt) => {
                memories += 1;
                check_limits(mt.limits, MAX_PAGES)?;
            }
            ImportKind::Global(gt) => {
                if gt.mutable {
                    // Mutable global imports need the mutable-globals
                    // proposal; the MVP rejects them.
                    return Err(ValidationError::ConstExprRequired(
                        "imported globals must be immutable",
                    ));
                }
                global_types.push(gt);
            }
        }
    }
    let num_imported_funcs = func_types.len() as u32;
    let num_imported_globals = global_types.len() as u32;

    for f in &module.funcs {
        func_types.push(type_of(f.type_index)?);
    }
    for t in &module.tables {
        tables += 1;
        check_limits(t.limits, u32::MAX)?;
    }
    for m in &module.memories {
        memories += 1;
        check_limits(m.limits, MAX_PAGES)?;
    }
    if tables > 1 {
        return Err(ValidationError::MultipleTables);
    }
    if memories > 1 {
        return Err(ValidationError::MultipleMemories);
    }

    for g in &module.globals {
        let t = const_expr_type(&g.init, &global_types, num_imported_globals)?;
        if t != g.ty.content {
            return Err(ValidationError::TypeMismatch {
                func: u32::MAX,
                offset: 0,
                expected: g.ty.content.to_string(),
                found: t.to_string(),
            });
        }
        global_types.push(g.ty);
    }

    for (name, export) in &module.exports {
        let ok = match export.kind {
            ExportKind::Func => (export.index as usize) < func_types.len(),
            ExportKind::Table => (export.index as usize) < tables,
            ExportKind::Memory => (export.index as usize) < memories,
            ExportKind::Global => (export.index as usize) < global_types.len(),
        };
        if !ok {
            return Err(match export.kind {
                ExportKind::Func => ValidationError::UnknownFunc {
                    func: u32::MAX,
                    offset: 0,
                    index: export.index,
                },
                ExportKind::Table => ValidationError::UnknownTable(export.index),
                ExportKind::Memory => ValidationError::UnknownMemory(export.index),
                ExportKind::Global => ValidationError::UnknownGlobal {
                    func: u32::MAX,
                    offset: 0,
                    index: export.index,
                },
            });
        }
        let _ = name;
    }

    if let Some(start) = module.start {
        let ty = func_types.get(start as usize).ok_or(ValidationError::UnknownFunc {
            func: u32::MAX,
            offset: 0,
            index: start,
        })?;
        if !ty.params.is_empty() || !ty.results.is_empty() {
            return Err(ValidationError::InvalidStart(ty.clone()));
        }
    }

    for seg in &module.elements {
        if seg.table as usize >= tables {
            return Err(ValidationError::UnknownTable(seg.table));
        }
        expect_i32_offset(&seg.offset, &global_types, num_imported_globals)?;
        for &f in &seg.funcs {
            if f as usize >= func_types.len() {
                return Err(ValidationError::UnknownFunc {
                    func: u32::MAX,
                    offset: 0,
                    index: f,
                });
            }
        }
    }
    for seg in &module.data {
        if seg.memory as usize >= memories {
            return Err(ValidationError::UnknownMemory(seg.memory));
        }
        expect_i32_offset(&seg.offset, &global_types, num_imported_globals)?;
    }

    let ctx = ModuleCtx {
        types: &module.types,
        func_types: &func_types,
        global_types: &global_types,
        has_table: tables > 0,
        has_memory: memories > 0,
    };
    let mut meta = Vec::with_capacity(module.funcs.len());
    for (i, body) in module.funcs.iter().enumerate() {
        let index = num_imported_funcs + i as u32;
        meta.push(FuncValidator::new(&ctx, index, body)?.run()?);
    }

    Ok(ValidatedModule {
        inner: Arc::new(Validated {
            module,
            func_types,
            num_imported_funcs,
            meta,
        }),
    })
}

fn check_limits(l: Limits, bound: u32) -> Result<()> {
    if l.min > bound || l.max.is_some_and(|m| m > bound) {
        return Err(ValidationError::InvalidLimits("size exceeds bound"));
    }
    if l.max.is_some_and(|m| m < l.min) {
        return Err(ValidationError::InvalidLimits("minimum exceeds maximum"));
    }
    Ok(())
}

fn const_expr_type(e: &ConstExpr, globals: &[GlobalType], imported: u32) -> Result<ValType> {
    Ok(match *e {
        ConstExpr::I32(_) => ValType::I32,
        ConstExpr::I64(_) => ValType::I64,
        ConstExpr::F32(_) => ValType::F32,
        ConstExpr::F64(_) => ValType::F64,
        ConstExpr::GlobalGet(i) => {
            if i >= imported {
                return Err(ValidationError::ConstExprRequired(
                    "global.get in a constant expression must name an imported global",
                ));
            }
            globals[i as usize].content
        }
    })
}

fn expect_i32_offset(e: &ConstExpr, globals: &[GlobalType], imported: u32) -> Result<()> {
    let t = const_expr_type(e, globals, imported)?;
    if t != ValType::I32 {
        return Err(ValidationError::TypeMismatch {
            func: u32::MAX,
            offset: 0,
            expected: "i32".into(),
            found: t.to_string(),
        });
    }
    Ok(())
}

struct ModuleCtx<'a> {
    types: &'a [FuncType],
    func_types: &'a [FuncType],
    global_types: &'a [GlobalType],
    has_table: bool,
    has_memory: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum CtrlKind {
    Func,
    Block,
    Loop,
    If,
    Else,
}

struct Ctrl {
    kind: CtrlKind,
    result: Option<ValType>,
    height: usize,
    unreachable: bool,
    pc: usize,
    /// Targets whose `pc` is patched to just past this frame's `end`.
    pending: Vec<u32>,
    /// For `if`: the target taken when the condition is false.
    if_target: u32,
}

impl Ctrl {
    fn label_arity(&self) -> usize {
        if self.kind == CtrlKind::Loop {
            0
        } else {
            self.result.is_some() as usize
        }
    }

    fn label_type(&self) -> Option<ValType> {
        if self.kind == CtrlKind::Loop {
            None
        } else {
            self.result
        }
    }
}

struct FuncValidator<'a> {
    ctx: &'a ModuleCtx<'a>,
    index: u32,
    body: &'a FuncBody,
    ty: &'a FuncType,
    locals: Vec<ValType>,
    vals: Vec<Option<ValType>>,
    ctrls: Vec<Ctrl>,
    meta: FuncMeta,
    pc: usize,
}

impl<'a> FuncValidator<'a> {
    fn new(ctx: &'a ModuleCtx<'a>, index: u32, body: &'a FuncBody) -> Result<Self> {
        let ty = &ctx.func_types[index as usize];
        let mut locals = ty.params.clone();
        locals.extend_from_slice(&body.locals);
        Ok(Self {
            ctx,
            index,
            body,
            ty,
            locals,
            vals: Vec::new(),
            ctrls: Vec::new(),
            meta: FuncMeta {
                side: vec![NO_TARGET; body.code.len()],
                targets: Vec::new(),
                max_height: 0,
            },
            pc: 0,
        })
    }

    fn offset(&self) -> u32 {
        self.body.offsets.get(self.pc).copied().unwrap_or(0)
    }

    fn mismatch(&self, expected: impl ToString, found: impl ToString) -> ValidationError {
        ValidationError::TypeMismatch {
            func: self.index,
            offset: self.offset(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    fn malformed(&self, reason: &'static str) -> ValidationError {
        ValidationError::Malformed {
            func: self.index,
            offset: self.offset(),
            reason,
        }
    }

    fn push(&mut self, t: Option<ValType>) {
        self.vals.push(t);
        self.meta.max_height = self.meta.max_height.max(self.vals.len() as u32);
    }

    fn pop(&mut self) -> Result<Option<ValType>> {
        let ctrl = self.ctrls.last().expect("control stack never empty while validating");
        if self.vals.len() == ctrl.height {
            if ctrl.unreachable {
                return Ok(None);
            }
            return Err(self.mismatch("a value", "empty stack"));
        }
        Ok(self.vals.pop().unwrap())
    }

    fn pop_expect(&mut self, expected: ValType) -> Result<Option<ValType>> {
        match self.pop()? {
            Some(t) if t != expected => Err(self.mismatch(expected, t)),
            t => Ok(t.or(Some(expected))),
        }
    }

    fn pop_many(&mut self, types: &[ValType]) -> Result<()> {
        for &t in types.iter().rev() {
            self.pop_expect(t)?;
        }
        Ok(())
    }

    fn set_unreachable(&mut self) {
        let ctrl = self.ctrls.last_mut().unwrap();
        self.vals.truncate(ctrl.height);
        ctrl.unreachable = true;
    }

    fn push_ctrl(&mut self, kind: CtrlKind, result: Option<ValType>) {
        self.ctrls.push(Ctrl {
            kind,
            result,
            height: self.vals.len(),
            unreachable: false,
            pc: self.pc,
            pending: Vec::new(),
            if_target: NO_TARGET,
        });
    }

    /// Check the frame's results and pop it.
    fn pop_ctrl(&mut self) -> Result<Ctrl> {
        let (result, height) = {
            let c = self.ctrls.last().unwrap();
            (c.result, c.height)
        };
        if let Some(t) = result {
            self.pop_expect(t)?;
        }
        if self.vals.len() != height {
            return Err(self.mismatch(
                format!("{} values at block end", result.is_some() as usize),
                format!("{} values", self.vals.len() - height + result.is_some() as usize),
            ));
        }
        Ok(self.ctrls.pop().unwrap())
    }

    fn label(&self, depth: u32) -> Result<usize> {
        let n = self.ctrls.len();
        if depth as usize >= n {
            return Err(ValidationError::UnknownLabel {
                func: self.index,
                offset: self.offset(),
                depth,
            });
        }
        Ok(n - 1 - depth as usize)
    }

    /// Check the label's operand types (without consuming them) and record a
    /// branch target for it.
    fn branch_to(&mut self, depth: u32) -> Result<u32> {
        let li = self.label(depth)?;
        if let Some(t) = self.ctrls[li].label_type() {
            self.pop_expect(t)?;
            self.push(Some(t));
        }
        let arity = self.ctrls[li].label_arity();
        let keep = arity as u32;
        let drop = self
            .vals
            .len()
            .saturating_sub(self.ctrls[li].height + arity) as u32;
        let pc = if self.ctrls[li].kind == CtrlKind::Loop {
            self.ctrls[li].pc as u32 + 1
        } else {
            NO_TARGET
        };
        let idx = self.meta.targets.len() as u32;
        self.meta.targets.push(BranchTarget { pc, keep, drop });
        if pc == NO_TARGET {
            self.ctrls[li].pending.push(idx);
        }
        Ok(idx)
    }

    fn new_target(&mut self) -> u32 {
        let idx = self.meta.targets.len() as u32;
        self.meta.targets.push(BranchTarget {
            pc: NO_TARGET,
            keep: 0,
            drop: 0,
        });
        idx
    }

    fn local(&self, index: u32) -> Result<ValType> {
        self.locals
            .get(index as usize)
            .copied()
            .ok_or(ValidationError::UnknownLocal {
                func: self.index,
                offset: self.offset(),
                index,
            })
    }

    fn global(&self, index: u32) -> Result<GlobalType> {
        self.ctx
            .global_types
            .get(index as usize)
            .copied()
            .ok_or(ValidationError::UnknownGlobal {
                func: self.index,
                offset: self.offset(),
                index,
            })
    }

    fn require_memory(&self) -> Result<()> {
        if !self.ctx.has_memory {
            return Err(ValidationError::UnknownMemory(0));
        }
        Ok(())
    }

    fn check_align(&self, align: u32, width: u32) -> Result<()> {
        if align >= 32 || (1u64 << align) > width as u64 {
            return Err(ValidationError::InvalidAlignment {
                func: self.index,
                offset: self.offset(),
            });
        }
        Ok(())
    }

    fn run(mut self) -> Result<FuncMeta> {
        self.push_ctrl(CtrlKind::Func, self.ty.results.first().copied());
        let code = &self.body.code;
        while self.pc < code.len() {
            let instr = &code[self.pc];
            self.step(instr)?;
            self.pc += 1;
        }
        if !self.ctrls.is_empty() {
            return Err(self.malformed("function body ends inside a block"));
        }
        Ok(self.meta)
    }

    fn step(&mut self, instr: &Instr) -> Result<()> {
        match *instr {
            Instr::Unreachable => self.set_unreachable(),
            Instr::Nop => {}
            Instr::Block(bt) => self.push_ctrl(CtrlKind::Block, bt),
            Instr::Loop(bt) => self.push_ctrl(CtrlKind::Loop, bt),
            Instr::If(bt) => {
                self.pop_expect(ValType::I32)?;
                self.push_ctrl(CtrlKind::If, bt);
                let t = self.new_target();
                self.ctrls.last_mut().unwrap().if_target = t;
                self.meta.side[self.pc] = t;
            }
            Instr::Else => {
                if self.ctrls.last().map(|c| c.kind) != Some(CtrlKind::If) {
                    return Err(self.malformed("else without matching if"));
                }
                let mut ctrl = self.pop_ctrl()?;
                self.meta.targets[ctrl.if_target as usize].pc = self.pc as u32 + 1;
                // Falling out of the then-arm jumps over the else-arm.
                let skip = self.new_target();
                self.meta.side[self.pc] = skip;
                ctrl.pending.push(skip);
                ctrl.kind = CtrlKind::Else;
                ctrl.unreachable = false;
                ctrl.if_target = NO_TARGET;
                self.vals.truncate(ctrl.height);
                self.ctrls.push(ctrl);
            }
            Instr::End => {
                let ctrl = self.pop_ctrl()?;
                if let (CtrlKind::If, Some(result)) = (ctrl.kind, ctrl.result) {
                    return Err(self.mismatch(
                        format!("else branch producing {result}"),
                        "missing else",
                    ));
                }
                let after = self.pc as u32 + 1;
                if ctrl.kind == CtrlKind::If {
                    self.meta.targets[ctrl.if_target as usize].pc = after;
                }
                for t in ctrl.pending {
                    self.meta.targets[t as usize].pc = after;
                }
                if ctrl.kind == CtrlKind::Func {
                    if self.pc + 1 != self.body.code.len() {
                        return Err(self.malformed("instructions after function end"));
                    }
                } else if let Some(t) = ctrl.result {
                    self.push(Some(t));
                }
            }
            Instr::Br(depth) => {
                let t = self.branch_to(depth)?;
                self.meta.side[self.pc] = t;
                self.set_unreachable();
            }
            Instr::BrIf(depth) => {
                self.pop_expect(ValType::I32)?;
                let t = self.branch_to(depth)?;
                self.meta.side[self.pc] = t;
            }
            Instr::BrTable {
                ref labels,
                default,
            } => {
                self.pop_expect(ValType::I32)?;
                let di = self.label(default)?;
                let arity = self.ctrls[di].label_arity();
                let default_ty = self.ctrls[di].label_type();
                let first = self.meta.targets.len() as u32;
                for &depth in labels.iter() {
                    let li = self.label(depth)?;
                    if self.ctrls[li].label_arity() != arity {
                        return Err(self.mismatch(
                            format!("br_table arms of arity {arity}"),
                            format!("arm of arity {}", self.ctrls[li].label_arity()),
                        ));
                    }
                    if let (Some(a), Some(b)) = (self.ctrls[li].label_type(), default_ty) {
                        if a != b {
                            return Err(self.mismatch(b, a));
                        }
                    }
                    self.branch_to(depth)?;
                }
                self.branch_to(default)?;
                self.meta.side[self.pc] = first;
                self.set_unreachable();
            }
            Instr::Return => {
                let results = self.ty.results.clone();
                self.pop_many(&results)?;
                self.set_unreachable();
            }
            Instr::Call(f) => {
                let ty = self
                    .ctx
                    .func_types
                    .get(f as usize)
                    .ok_or(ValidationError::UnknownFunc {
                        func: self.index,
                        offset: self.offset(),
                        index: f,
                    })?;
                self.pop_many(&ty.params)?;
                for &r in &ty.results {
                    self.push(Some(r));
                }
            }
            Instr::CallIndirect(t) => {
                if !self.ctx.has_table {
                    return Err(ValidationError::UnknownTable(0));
                }
                let ty = self
                    .ctx
                    .types
                    .get(t as usize)
                    .ok_or(ValidationError::UnknownType(t))?;
                self.pop_expect(ValType::I32)?;
                self.pop_many(&ty.params)?;
                for &r in &ty.results {
                    self.push(Some(r));
                }
            }
            Instr::Drop => {
                self.pop()?;
            }
            Instr::Select => {
                self.pop_expect(ValType::I32)?;
                let a = self.pop()?;
                let b = self.pop()?;
                let t = match (a, b) {
                    (Some(a), Some(b)) if a != b => return Err(self.mismatch(a, b)),
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                self.push(t);
            }
            Instr::LocalGet(i) => {
                let t = self.local(i)?;
                self.push(Some(t));
            }
            Instr::LocalSet(i) => {
                let t = self.local(i)?;
                self.pop_expect(t)?;
            }
            Instr::LocalTee(i) => {
                let t = self.local(i)?;
                self.pop_expect(t)?;
                self.push(Some(t));
            }
            Instr::GlobalGet(i) => {
                let g = self.global(i)?;
                self.push(Some(g.content));
            }
            Instr::GlobalSet(i) => {
                let g = self.global(i)?;
                if !g.mutable {
                    return Err(ValidationError::ImmutableGlobal {
                        func: self.index,
                        offset: self.offset(),
                        index: i,
                    });
                }
                self.pop_expect(g.content)?;
            }
            Instr::Load(kind, arg) => {
                self.require_memory()?;
                self.check_align(arg.align, kind.width())?;
                self.pop_expect(ValType::I32)?;
                self.push(Some(kind.result()));
            }
            Instr::Store(kind, arg) => {
                self.require_memory()?;
                self.check_align(arg.align, kind.width())?;
                self.pop_expect(kind.operand())?;
                self.pop_expect(ValType::I32)?;
            }
            Instr::MemorySize => {
                self.require_memory()?;
                self.push(Some(ValType::I32));
            }
            Instr::MemoryGrow => {
                self.require_memory()?;
                self.pop_expect(ValType::I32)?;
                self.push(Some(ValType::I32));
            }
            Instr::I32Const(_) => self.push(Some(ValType::I32)),
            Instr::I64Const(_) => self.push(Some(ValType::I64)),
            Instr::F32Const(_) => self.push(Some(ValType::F32)),
            Instr::F64Const(_) => self.push(Some(ValType::F64)),
            Instr::Num(op) => self.numeric(op)?,
        }
        Ok(())
    }

    fn numeric(&mut self, op: NumOp) -> Result<()> {
        self.pop_many(op.params())?;
        self.push(Some(op.result()));
        Ok(())
    }
}
