//! WebAssembly MVP parser, validator and fuel-metered interpreter.
//!
//! ```
//! use capsule_wasm::{parse_module, validate, HostImportTable, Instance, InstanceLimits, ExecOutcome, Value};
//!
//! // (module (func (export "answer") (result i32) i32.const 42))
//! let bytes = [
//!     0x00, 0x61, 0x73, 0x6d, 0x01, 0x00, 0x00, 0x00, 0x01, 0x05, 0x01, 0x60, 0x00, 0x01,
//!     0x7f, 0x03, 0x02, 0x01, 0x00, 0x07, 0x0a, 0x01, 0x06, 0x61, 0x6e, 0x73, 0x77, 0x65,
//!     0x72, 0x00, 0x00, 0x0a, 0x06, 0x01, 0x04, 0x00, 0x41, 0x2a, 0x0b,
//! ];
//! let module = validate(parse_module(&bytes).unwrap()).unwrap();
//! let mut inst = Instance::instantiate(&module, &HostImportTable::new(), InstanceLimits::default(), &mut ()).unwrap();
//! let r = inst.invoke(&mut (), "answer", &[], 100).unwrap();
//! assert_eq!(r.outcome, ExecOutcome::Values(vec![Value::I32(42)]));
//! assert_eq!(r.fuel_consumed, 2);
//! ```

pub mod error;
mod instance;
pub mod instr;
pub mod memory;
mod numeric;
pub mod parser;
pub mod types;
pub mod validate;

pub use error::{
    HostMemOutOfBounds, InstantiationError, InvokeError, ParseError, TrapKind, ValidationError,
};
pub use instance::{
    Caller, ExecOutcome, ExecStats, HostFn, HostFunc, HostImportTable, Instance, InstanceLimits,
    Invocation,
};
pub use memory::{LinearMemory, DEFAULT_PAGE_SIZE, MIN_PAGE_SIZE};
pub use numeric::{CANONICAL_NAN_F32, CANONICAL_NAN_F64};
pub use parser::{parse_module, WasmModule};
pub use types::{FuncType, ValType, Value};
pub use validate::{validate, ValidatedModule};

/// Parse and validate in one step.
pub fn load(bytes: &[u8]) -> Result<ValidatedModule, LoadError> {
    Ok(validate(parse_module(bytes)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}
