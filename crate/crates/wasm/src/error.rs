use thiserror::Error;

use crate::types::FuncType;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic number")]
    BadMagic,
    #[error("unsupported binary version {0}")]
    BadVersion(u32),
    #[error("malformed section {section} at offset {offset:#x}: {reason}")]
    MalformedSection {
        section: u8,
        offset: usize,
        reason: String,
    },
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("type mismatch in func {func} at offset {offset:#x}: expected {expected}, found {found}")]
    TypeMismatch {
        func: u32,
        offset: u32,
        expected: String,
        found: String,
    },
    #[error("unknown local {index} in func {func} at offset {offset:#x}")]
    UnknownLocal { func: u32, offset: u32, index: u32 },
    #[error("unknown global {index} (func {func}, offset {offset:#x})")]
    UnknownGlobal { func: u32, offset: u32, index: u32 },
    #[error("unknown function {index} (func {func}, offset {offset:#x})")]
    UnknownFunc { func: u32, offset: u32, index: u32 },
    #[error("unknown label {depth} in func {func} at offset {offset:#x}")]
    UnknownLabel { func: u32, offset: u32, depth: u32 },
    #[error("unknown type {0}")]
    UnknownType(u32),
    #[error("unknown table {0}")]
    UnknownTable(u32),
    #[error("unknown memory {0}")]
    UnknownMemory(u32),
    #[error("constant expression required: {0}")]
    ConstExprRequired(&'static str),
    #[error("global {index} is immutable (func {func}, offset {offset:#x})")]
    ImmutableGlobal { func: u32, offset: u32, index: u32 },
    #[error("invalid limits: {0}")]
    InvalidLimits(&'static str),
    #[error("multiple memories")]
    MultipleMemories,
    #[error("multiple tables")]
    MultipleTables,
    #[error("duplicate export {0:?}")]
    DuplicateExport(String),
    #[error("start function must have type [] -> [], found {0}")]
    InvalidStart(FuncType),
    #[error("alignment larger than natural in func {func} at offset {offset:#x}")]
    InvalidAlignment { func: u32, offset: u32 },
    #[error("invalid structure in func {func} at offset {offset:#x}: {reason}")]
    Malformed {
        func: u32,
        offset: u32,
        reason: &'static str,
    },
}

/// Runtime trap kinds. Traps are a normal execution outcome, not errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum TrapKind {
    #[error("unreachable executed")]
    Unreachable,
    #[error("out of bounds memory access")]
    MemOutOfBounds,
    #[error("out of bounds table access")]
    TableOutOfBounds,
    #[error("indirect call type mismatch")]
    IndirectCallTypeMismatch,
    #[error("integer divide by zero")]
    IntegerDivByZero,
    #[error("integer overflow")]
    IntegerOverflow,
    #[error("invalid conversion to integer")]
    InvalidConversion,
    #[error("call stack exhausted")]
    StackExhausted,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstantiationError {
    #[error("unresolved import {module}.{field}")]
    UnresolvedImport { module: String, field: String },
    #[error("import {module}.{field} expects {expected}, host provides {found}")]
    SignatureMismatch {
        module: String,
        field: String,
        expected: Box<FuncType>,
        found: Box<FuncType>,
    },
    #[error("data segment {0} out of bounds")]
    DataSegmentOutOfBounds(u32),
    #[error("element segment {0} out of bounds")]
    ElementSegmentOutOfBounds(u32),
    #[error("memory of {pages} pages exceeds the limit of {limit} pages")]
    MemoryLimitExceeded { pages: u32, limit: u32 },
    #[error("invalid instance limits: {0}")]
    InvalidLimits(&'static str),
    #[error("start function failed: {0:?}")]
    StartTrapped(crate::ExecOutcome),
    #[error(transparent)]
    Invoke(#[from] InvokeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvokeError {
    #[error("no exported function named {0:?}")]
    NoSuchExport(String),
    #[error("argument mismatch: expected {expected}")]
    ArgTypeMismatch { expected: FuncType },
    /// An interpreter invariant was broken: a validated module produced an
    /// operand of the wrong type, or a host function returned the wrong type.
    #[error("internal interpreter error: {0}")]
    Internal(String),
    /// A host function broke its contract, e.g. returned the wrong type.
    #[error("host function error: {0}")]
    Host(String),
}

/// Raised when the host touches capsule memory out of range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("host access [{offset}, {offset}+{len}) outside linear memory of {memory_len} bytes")]
pub struct HostMemOutOfBounds {
    pub offset: u32,
    pub len: u32,
    pub memory_len: usize,
}
