//! Numeric instruction semantics.
//!
//! Float results of arithmetic, rounding, sign and conversion operations are
//! canonicalized: any NaN becomes the positive quiet NaN with a zero payload.
//! Reinterpretations, constants and loads move bits unchanged.

use crate::error::TrapKind;
use crate::instr::NumOp;
use crate::types::Value;

pub const CANONICAL_NAN_F32: u32 = 0x7FC0_0000;
pub const CANONICAL_NAN_F64: u64 = 0x7FF8_0000_0000_0000;

/// Evaluation failure: a real trap, or an operand whose type validation
/// should have excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NumError {
    Trap(TrapKind),
    Operand,
}

impl From<TrapKind> for NumError {
    fn from(t: TrapKind) -> Self {
        NumError::Trap(t)
    }
}

type R = Result<Value, NumError>;

#[inline]
fn c32(x: f32) -> f32 {
    if x.is_nan() {
        f32::from_bits(CANONICAL_NAN_F32)
    } else {
        x
    }
}

#[inline]
fn c64(x: f64) -> f64 {
    if x.is_nan() {
        f64::from_bits(CANONICAL_NAN_F64)
    } else {
        x
    }
}

macro_rules! fminmax {
    ($name:ident, $t:ty, $min:expr) => {
        fn $name(a: $t, b: $t) -> $t {
            if a.is_nan() || b.is_nan() {
                return <$t>::NAN;
            }
            if a == 0.0 && b == 0.0 {
                // Sign of zero decides: min prefers -0, max prefers +0.
                let neg = if $min {
                    a.is_sign_negative() || b.is_sign_negative()
                } else {
                    a.is_sign_negative() && b.is_sign_negative()
                };
                return if neg { -0.0 } else { 0.0 };
            }
            if $min {
                a.min(b)
            } else {
                a.max(b)
            }
        }
    };
}

fminmax!(fmin32, f32, true);
fminmax!(fmax32, f32, false);
fminmax!(fmin64, f64, true);
fminmax!(fmax64, f64, false);

const TWO_31: f64 = 2147483648.0;
const TWO_32: f64 = 4294967296.0;
const TWO_63: f64 = 9223372036854775808.0;
const TWO_64: f64 = 18446744073709551616.0;

fn trunc_checked(x: f64, lo_inclusive: f64, lo_exclusive: bool, hi: f64) -> Result<f64, TrapKind> {
    if x.is_nan() {
        return Err(TrapKind::InvalidConversion);
    }
    let t = x.trunc();
    let lo_ok = if lo_exclusive { t > lo_inclusive } else { t >= lo_inclusive };
    if lo_ok && t < hi {
        Ok(t)
    } else {
        Err(TrapKind::IntegerOverflow)
    }
}

fn i32_trunc_s(x: f64) -> Result<i32, TrapKind> {
    Ok(trunc_checked(x, -TWO_31, false, TWO_31)? as i32)
}

fn i32_trunc_u(x: f64) -> Result<i32, TrapKind> {
    Ok(trunc_checked(x, -1.0, true, TWO_32)? as u32 as i32)
}

fn i64_trunc_s(x: f64) -> Result<i64, TrapKind> {
    Ok(trunc_checked(x, -TWO_63, false, TWO_63)? as i64)
}

fn i64_trunc_u(x: f64) -> Result<i64, TrapKind> {
    Ok(trunc_checked(x, -1.0, true, TWO_64)? as u64 as i64)
}

fn b(v: bool) -> Value {
    Value::I32(v as i32)
}

pub(crate) fn unary(op: NumOp, a: Value) -> R {
    use NumOp::*;
    use Value::*;
    Ok(match (op, a) {
        (I32Eqz, I32(x)) => b(x == 0),
        (I64Eqz, I64(x)) => b(x == 0),
        (I32Clz, I32(x)) => I32(x.leading_zeros() as i32),
        (I32Ctz, I32(x)) => I32(x.trailing_zeros() as i32),
        (I32Popcnt, I32(x)) => I32(x.count_ones() as i32),
        (I64Clz, I64(x)) => I64(x.leading_zeros() as i64),
        (I64Ctz, I64(x)) => I64(x.trailing_zeros() as i64),
        (I64Popcnt, I64(x)) => I64(x.count_ones() as i64),
        (F32Abs, F32(x)) => F32(c32(x.abs())),
        (F32Neg, F32(x)) => F32(c32(-x)),
        (F32Ceil, F32(x)) => F32(c32(x.ceil())),
        (F32Floor, F32(x)) => F32(c32(x.floor())),
        (F32Trunc, F32(x)) => F32(c32(x.trunc())),
        (F32Nearest, F32(x)) => F32(c32(x.round_ties_even())),
        (F32Sqrt, F32(x)) => F32(c32(x.sqrt())),
        (F64Abs, F64(x)) => F64(c64(x.abs())),
        (F64Neg, F64(x)) => F64(c64(-x)),
        (F64Ceil, F64(x)) => F64(c64(x.ceil())),
        (F64Floor, F64(x)) => F64(c64(x.floor())),
        (F64Trunc, F64(x)) => F64(c64(x.trunc())),
        (F64Nearest, F64(x)) => F64(c64(x.round_ties_even())),
        (F64Sqrt, F64(x)) => F64(c64(x.sqrt())),
        (I32WrapI64, I64(x)) => I32(x as i32),
        (I32TruncF32S, F32(x)) => I32(i32_trunc_s(x as f64)?),
        (I32TruncF32U, F32(x)) => I32(i32_trunc_u(x as f64)?),
        (I32TruncF64S, F64(x)) => I32(i32_trunc_s(x)?),
        (I32TruncF64U, F64(x)) => I32(i32_trunc_u(x)?),
        (I64ExtendI32S, I32(x)) => I64(x as i64),
        (I64ExtendI32U, I32(x)) => I64(x as u32 as i64),
        (I64TruncF32S, F32(x)) => I64(i64_trunc_s(x as f64)?),
        (I64TruncF32U, F32(x)) => I64(i64_trunc_u(x as f64)?),
        (I64TruncF64S, F64(x)) => I64(i64_trunc_s(x)?),
        (I64TruncF64U, F64(x)) => I64(i64_trunc_u(x)?),
        (F32ConvertI32S, I32(x)) => F32(x as f32),
        (F32ConvertI32U, I32(x)) => F32(x as u32 as f32),
        (F32ConvertI64S, I64(x)) => F32(x as f32),
        (F32ConvertI64U, I64(x)) => F32(x as u64 as f32),
        (F32DemoteF64, F64(x)) => F32(c32(x as f32)),
        (F64ConvertI32S, I32(x)) => F64(x as f64),
        (F64ConvertI32U, I32(x)) => F64(x as u32 as f64),
        (F64ConvertI64S, I64(x)) => F64(x as f64),
        (F64ConvertI64U, I64(x)) => F64(x as u64 as f64),
        (F64PromoteF32, F32(x)) => F64(c64(x as f64)),
        (I32ReinterpretF32, F32(x)) => I32(x.to_bits() as i32),
        (I64ReinterpretF64, F64(x)) => I64(x.to_bits() as i64),
        (F32ReinterpretI32, I32(x)) => F32(f32::from_bits(x as u32)),
        (F64ReinterpretI64, I64(x)) => F64(f64::from_bits(x as u64)),
        (I32Extend8S, I32(x)) => I32(x as i8 as i32),
        (I32Extend16S, I32(x)) => I32(x as i16 as i32),
        (I64Extend8S, I64(x)) => I64(x as i8 as i64),
        (I64Extend16S, I64(x)) => I64(x as i16 as i64),
        (I64Extend32S, I64(x)) => I64(x as i32 as i64),
        // `as` casts from float to int saturate and map NaN to 0, which is
        // exactly the non-trapping conversion semantics.
        (I32TruncSatF32S, F32(x)) => I32(x as i32),
        (I32TruncSatF32U, F32(x)) => I32(x as u32 as i32),
        (I32TruncSatF64S, F64(x)) => I32(x as i32),
        (I32TruncSatF64U, F64(x)) => I32(x as u32 as i32),
        (I64TruncSatF32S, F32(x)) => I64(x as i64),
        (I64TruncSatF32U, F32(x)) => I64(x as u64 as i64),
        (I64TruncSatF64S, F64(x)) => I64(x as i64),
        (I64TruncSatF64U, F64(x)) => I64(x as u64 as i64),
        _ => return Err(NumError::Operand),
    })
}

pub(crate) fn binary(op: NumOp, a: Value, bv: Value) -> R {
    use NumOp::*;
    use Value::*;
    Ok(match (op, a, bv) {
        (I32Eq, I32(x), I32(y)) => b(x == y),
        (I32Ne, I32(x), I32(y)) => b(x != y),
        (I32LtS, I32(x), I32(y)) => b(x < y),
        (I32LtU, I32(x), I32(y)) => b((x as u32) < (y as u32)),
        (I32GtS, I32(x), I32(y)) => b(x > y),
        (I32GtU, I32(x), I32(y)) => b((x as u32) > (y as u32)),
        (I32LeS, I32(x), I32(y)) => b(x <= y),
        (I32LeU, I32(x), I32(y)) => b((x as u32) <= (y as u32)),
        (I32GeS, I32(x), I32(y)) => b(x >= y),
        (I32GeU, I32(x), I32(y)) => b((x as u32) >= (y as u32)),
        (I64Eq, I64(x), I64(y)) => b(x == y),
        (I64Ne, I64(x), I64(y)) => b(x != y),
        (I64LtS, I64(x), I64(y)) => b(x < y),
        (I64LtU, I64(x), I64(y)) => b((x as u64) < (y as u64)),
        (I64GtS, I64(x), I64(y)) => b(x > y),
        (I64GtU, I64(x), I64(y)) => b((x as u64) > (y as u64)),
        (I64LeS, I64(x), I64(y)) => b(x <= y),
        (I64LeU, I64(x), I64(y)) => b((x as u64) <= (y as u64)),
        (I64GeS, I64(x), I64(y)) => b(x >= y),
        (I64GeU, I64(x), I64(y)) => b((x as u64) >= (y as u64)),
        (F32Eq, F32(x), F32(y)) => b(x == y),
        (F32Ne, F32(x), F32(y)) => b(x != y),
        (F32Lt, F32(x), F32(y)) => b(x < y),
        (F32Gt, F32(x), F32(y)) => b(x > y),
        (F32Le, F32(x), F32(y)) => b(x <= y),
        (F32Ge, F32(x), F32(y)) => b(x >= y),
        (F64Eq, F64(x), F64(y)) => b(x == y),
        (F64Ne, F64(x), F64(y)) => b(x != y),
        (F64Lt, F64(x), F64(y)) => b(x < y),
        (F64Gt, F64(x), F64(y)) => b(x > y),
        (F64Le, F64(x), F64(y)) => b(x <= y),
        (F64Ge, F64(x), F64(y)) => b(x >= y),
        (I32Add, I32(x), I32(y)) => I32(x.wrapping_add(y)),
        (I32Sub, I32(x), I32(y)) => I32(x.wrapping_sub(y)),
        (I32Mul, I32(x), I32(y)) => I32(x.wrapping_mul(y)),
        (I32DivS, I32(x), I32(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            if x == i32::MIN && y == -1 {
                return Err(TrapKind::IntegerOverflow.into());
            }
            I32(x / y)
        }
        (I32DivU, I32(x), I32(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            I32(((x as u32) / (y as u32)) as i32)
        }
        (I32RemS, I32(x), I32(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            I32(x.wrapping_rem(y))
        }
        (I32RemU, I32(x), I32(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            I32(((x as u32) % (y as u32)) as i32)
        }
        (I32And, I32(x), I32(y)) => I32(x & y),
        (I32Or, I32(x), I32(y)) => I32(x | y),
        (I32Xor, I32(x), I32(y)) => I32(x ^ y),
        (I32Shl, I32(x), I32(y)) => I32(x.wrapping_shl(y as u32)),
        (I32ShrS, I32(x), I32(y)) => I32(x.wrapping_shr(y as u32)),
        (I32ShrU, I32(x), I32(y)) => I32((x as u32).wrapping_shr(y as u32) as i32),
        (I32Rotl, I32(x), I32(y)) => I32(x.rotate_left(y as u32 % 32)),
        (I32Rotr, I32(x), I32(y)) => I32(x.rotate_right(y as u32 % 32)),
        (I64Add, I64(x), I64(y)) => I64(x.wrapping_add(y)),
        (I64Sub, I64(x), I64(y)) => I64(x.wrapping_sub(y)),
        (I64Mul, I64(x), I64(y)) => I64(x.wrapping_mul(y)),
        (I64DivS, I64(x), I64(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            if x == i64::MIN && y == -1 {
                return Err(TrapKind::IntegerOverflow.into());
            }
            I64(x / y)
        }
        (I64DivU, I64(x), I64(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            I64(((x as u64) / (y as u64)) as i64)
        }
        (I64RemS, I64(x), I64(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            I64(x.wrapping_rem(y))
        }
        (I64RemU, I64(x), I64(y)) => {
            if y == 0 {
                return Err(TrapKind::IntegerDivByZero.into());
            }
            I64(((x as u64) % (y as u64)) as i64)
        }
        (I64And, I64(x), I64(y)) => I64(x & y),
        (I64Or, I64(x), I64(y)) => I64(x | y),
        (I64Xor, I64(x), I64(y)) => I64(x ^ y),
        (I64Shl, I64(x), I64(y)) => I64(x.wrapping_shl(y as u32)),
        (I64ShrS, I64(x), I64(y)) => I64(x.wrapping_shr(y as u32)),
        (I64ShrU, I64(x), I64(y)) => I64((x as u64).wrapping_shr(y as u32) as i64),
        (I64Rotl, I64(x), I64(y)) => I64(x.rotate_left((y as u64 % 64) as u32)),
        (I64Rotr, I64(x), I64(y)) => I64(x.rotate_right((y as u64 % 64) as u32)),
        (F32Add, F32(x), F32(y)) => F32(c32(x + y)),
        (F32Sub, F32(x), F32(y)) => F32(c32(x - y)),
        (F32Mul, F32(x), F32(y)) => F32(c32(x * y)),
        (F32Div, F32(x), F32(y)) => F32(c32(x / y)),
        (F32Min, F32(x), F32(y)) => F32(c32(fmin32(x, y))),
        (F32Max, F32(x), F32(y)) => F32(c32(fmax32(x, y))),
        (F32Copysign, F32(x), F32(y)) => F32(c32(x.copysign(y))),
        (F64Add, F64(x), F64(y)) => F64(c64(x + y)),
        (F64Sub, F64(x), F64(y)) => F64(c64(x - y)),
        (F64Mul, F64(x), F64(y)) => F64(c64(x * y)),
        (F64Div, F64(x), F64(y)) => F64(c64(x / y)),
        (F64Min, F64(x), F64(y)) => F64(c64(fmin64(x, y))),
        (F64Max, F64(x), F64(y)) => F64(c64(fmax64(x, y))),
        (F64Copysign, F64(x), F64(y)) => F64(c64(x.copysign(y))),
        _ => return Err(NumError::Operand),
    })
}
