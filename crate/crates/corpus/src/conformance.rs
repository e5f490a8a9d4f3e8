//! Differential conformance against `wasmi` as a reference interpreter.
//!
//! One module per numeric instruction plus hand-written control-flow,
//! call, global and memory modules. Every export is run over an edge-operand
//! grid through both engines; outcomes must agree exactly, except that any
//! two NaNs of the same type compare equal (we canonicalize, wasmi need not).

use std::fmt;
use std::time::{Duration, Instant};

use capsule_wasm::instr::NumOp;
use capsule_wasm::{load, ExecOutcome, HostImportTable, Instance, InstanceLimits, TrapKind, ValType, Value};

const FUEL: u64 = 50_000_000;

#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub wasm: Vec<u8>,
    /// `(export, argument grid)`.
    pub calls: Vec<(String, Vec<Vec<Value>>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Values(Vec<Value>),
    Trap(TrapKind),
    /// Reference trap with no counterpart in [`TrapKind`].
    Other(String),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Values(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "[{}]", parts.join(", "))
            }
            Outcome::Trap(t) => write!(f, "trap: {t}"),
            Outcome::Other(s) => write!(f, "other: {s}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub module: String,
    pub export: String,
    pub args: Vec<Value>,
    pub ours: Outcome,
    pub reference: Outcome,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self.args.iter().map(|x| x.to_string()).collect();
        write!(
            f,
            "{}::{}({}): ours {} vs reference {}",
            self.module,
            self.export,
            args.join(", "),
            self.ours,
            self.reference
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub modules: usize,
    pub executions: usize,
    pub mismatches: Vec<Mismatch>,
    /// Modules one of the engines refused to load or instantiate.
    pub setup_errors: Vec<String>,
    pub elapsed: Duration,
}

impl Report {
    pub fn agreed(&self) -> bool {
        self.mismatches.is_empty() && self.setup_errors.is_empty()
    }
}

fn same_value(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::F32(x), Value::F32(y)) if x.is_nan() && y.is_nan() => true,
        (Value::F64(x), Value::F64(y)) if x.is_nan() && y.is_nan() => true,
        _ => a == b,
    }
}

fn same(a: &Outcome, b: &Outcome) -> bool {
    match (a, b) {
        (Outcome::Values(x), Outcome::Values(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same_value(p, q))
        }
        _ => a == b,
    }
}

pub fn i32_edges() -> Vec<i32> {
    vec![
        0,
        1,
        -1,
        2,
        -2,
        7,
        31,
        32,
        33,
        0x7F,
        0x80,
        0xFF,
        0x8000,
        0xFFFF,
        0x1234_5678,
        i32::MIN,
        i32::MIN + 1,
        i32::MAX,
    ]
}

pub fn i64_edges() -> Vec<i64> {
    vec![
        0,
        1,
        -1,
        2,
        -2,
        7,
        63,
        64,
        65,
        0x80,
        0xFFFF_FFFF,
        0x1_0000_0000,
        i32::MIN as i64,
        i32::MAX as i64,
        0x0123_4567_89AB_CDEF,
        i64::MIN,
        i64::MIN + 1,
        i64::MAX,
    ]
}

pub fn f32_edges() -> Vec<f32> {
    vec![
        0.0,
        -0.0,
        1.0,
        -1.0,
        0.5,
        -0.5,
        1.5,
        2.5,
        -2.5,
        3.7,
        f32::MIN_POSITIVE,
        f32::from_bits(1),
        f32::MAX,
        f32::MIN,
        f32::INFINITY,
        f32::NEG_INFINITY,
        f32::NAN,
        f32::from_bits(0x7FA0_0001),
        f32::from_bits(0xFFC0_0000),
        2_147_483_648.0,
        -2_147_483_904.0,
        4_294_967_296.0,
        9.223_372e18,
        16_777_216.0,
    ]
}

pub fn f64_edges() -> Vec<f64> {
    vec![
        0.0,
        -0.0,
        1.0,
        -1.0,
        0.5,
        -0.5,
        1.5,
        2.5,
        -2.5,
        3.7,
        f64::MIN_POSITIVE,
        f64::from_bits(1),
        f64::MAX,
        f64::MIN,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NAN,
        f64::from_bits(0x7FF4_0000_0000_0001),
        f64::from_bits(0xFFF8_0000_0000_0000),
        2_147_483_647.0,
        -2_147_483_648.9,
        4_294_967_295.9,
        9_223_372_036_854_775_807.0,
        18_446_744_073_709_551_616.0,
        1e300,
        -1e-300,
    ]
}

fn edges(t: ValType) -> Vec<Value> {
    match t {
        ValType::I32 => i32_edges().into_iter().map(Value::I32).collect(),
        ValType::I64 => i64_edges().into_iter().map(Value::I64).collect(),
        ValType::F32 => f32_edges().into_iter().map(Value::F32).collect(),
        ValType::F64 => f64_edges().into_iter().map(Value::F64).collect(),
    }
}

fn grid(params: &[ValType]) -> Vec<Vec<Value>> {
    params.iter().fold(vec![Vec::new()], |acc, &t| {
        let e = edges(t);
        acc.into_iter()
            .flat_map(|prefix| {
                e.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

fn wat_ty(t: ValType) -> &'static str {
    match t {
        ValType::I32 => "i32",
        ValType::I64 => "i64",
        ValType::F32 => "f32",
        ValType::F64 => "f64",
    }
}

fn numeric_case(op: NumOp) -> Case {
    let params = op.params();
    let ps: Vec<&str> = params.iter().map(|&t| wat_ty(t)).collect();
    let gets: String = (0..params.len()).map(|i| format!("local.get {i} ")).collect();
    let text = format!(
        "(module (func (export \"f\") (param {}) (result {}) {gets}{}))",
        ps.join(" "),
        wat_ty(op.result()),
        op.name()
    );
    Case {
        name: op.name().to_string(),
        wasm: wat::parse_str(&text).expect("generated module assembles"),
        calls: vec![("f".to_string(), grid(params))],
    }
}

fn ints(range: impl IntoIterator<Item = i32>) -> Vec<Vec<Value>> {
    range.into_iter().map(|i| vec![Value::I32(i)]).collect()
}

fn pairs(a: &[i32], b: &[i32]) -> Vec<Vec<Value>> {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| vec![Value::I32(x), Value::I32(y)]))
        .collect()
}

/// Addresses straddling the end of a one-page (65536 byte) memory.
fn addrs() -> Vec<Vec<Value>> {
    let mut v = vec![0, 1, 3, 7, 100, 65528, 65529, 65532, 65533, 65534, 65535, 65536, -1, -8, i32::MIN];
    v.sort_unstable();
    ints(v)
}

fn hand(name: &str, text: &str, calls: Vec<(&str, Vec<Vec<Value>>)>) -> Case {
    Case {
        name: name.to_string(),
        wasm: wat::parse_str(text).unwrap_or_else(|e| panic!("{name}: {e}")),
        calls: calls.into_iter().map(|(e, a)| (e.to_string(), a)).collect(),
    }
}

fn structural_cases() -> Vec<Case> {
    let small = ints(-3..12);
    let mut out = vec![
        hand(
            "block-br-if",
            r#"(module (func (export "f") (param i32) (result i32)
                (block $out (result i32)
                  (block $a
                    (br_if $a (i32.eqz (local.get 0)))
                    (br_if $out (i32.const 100) (i32.gt_s (local.get 0) (i32.const 5)))
                    (br $out (i32.const 7)))
                  (i32.const 42))))"#,
            vec![("f", small.clone())],
        ),
        hand(
            "loop-sum",
            r#"(module (func (export "f") (param i32) (result i64) (local i64)
                (block $done (loop $top
                  (br_if $done (i32.le_s (local.get 0) (i32.const 0)))
                  (local.set 1 (i64.add (local.get 1) (i64.extend_i32_s (local.get 0))))
                  (local.set 0 (i32.sub (local.get 0) (i32.const 1)))
                  (br $top)))
                (local.get 1)))"#,
            vec![("f", ints([-5, 0, 1, 2, 10, 1000, 5000]))],
        ),
        hand(
            "if-else",
            r#"(module (func (export "f") (param i32 i32) (result i32)
                (if (result i32) (i32.lt_s (local.get 0) (local.get 1))
                  (then (i32.sub (local.get 1) (local.get 0)))
                  (else (if (result i32) (i32.eq (local.get 0) (local.get 1))
                    (then (i32.const 0))
                    (else (i32.mul (local.get 0) (i32.const 3))))))))"#,
            vec![("f", pairs(&[-2, 0, 3, i32::MAX], &[-2, 0, 3, i32::MIN]))],
        ),
        hand(
            "if-without-else",
            r#"(module (func (export "f") (param i32) (result i32) (local i32)
                (local.set 1 (i32.const 9))
                (if (local.get 0) (then (local.set 1 (i32.const 4))))
                (local.get 1)))"#,
            vec![("f", small.clone())],
        ),
        hand(
            "br-table",
            r#"(module (func (export "f") (param i32) (result i32)
                (block $d (block $c (block $b (block $a
                  (br_table $a $b $c $a $d (local.get 0)))
                  (return (i32.const 10)))
                  (return (i32.const 20)))
                  (return (i32.const 30)))
                (i32.const 40)))"#,
            vec![("f", ints([-1, 0, 1, 2, 3, 4, 5, 100, i32::MIN]))],
        ),
        hand(
            "br-table-value",
            r#"(module (func (export "f") (param i32) (result i32)
                (block $b (result i32) (block $a (result i32)
                  (br_table $a $b $b (i32.const 5) (local.get 0)))
                  (i32.add (i32.const 1)))))"#,
            vec![("f", small.clone())],
        ),
        hand(
            "select-drop-nop",
            r#"(module
                (func (export "i") (param i32) (result i32)
                  nop (drop (i32.const 1))
                  (select (i32.const 11) (i32.const 22) (local.get 0)))
                (func (export "f") (param i32) (result f64)
                  (select (f64.const -0.0) (f64.const nan) (local.get 0)))
                (func (export "l") (param i32) (result i64)
                  (select (i64.const -1) (i64.const 0x7fffffffffffffff) (local.get 0))))"#,
            vec![("i", small.clone()), ("f", small.clone()), ("l", small.clone())],
        ),
        hand(
            "locals-tee",
            r#"(module (func (export "f") (param i32) (result i32) (local i32 i64 f32 f64)
                (local.set 1 (i32.add (local.tee 1 (i32.mul (local.get 0) (i32.const 3))) (local.get 1)))
                (local.set 2 (i64.extend_i32_s (local.get 1)))
                (local.set 3 (f32.convert_i64_s (local.get 2)))
                (local.set 4 (f64.promote_f32 (local.get 3)))
                (i32.add (local.get 1) (i32.trunc_f64_s (local.get 4)))))"#,
            vec![("f", ints([-1000, -1, 0, 1, 7, 1 << 20]))],
        ),
        hand(
            "globals",
            r#"(module
                (global $c (mut i32) (i32.const 0))
                (global $k i64 (i64.const -9))
                (global $f (mut f64) (f64.const 0.25))
                (func (export "bump") (param i32) (result i32)
                  (global.set $c (i32.add (global.get $c) (local.get 0)))
                  (global.get $c))
                (func (export "mix") (param i32) (result f64)
                  (global.set $f (f64.mul (global.get $f) (f64.convert_i32_s (local.get 0))))
                  (f64.add (global.get $f) (f64.convert_i64_s (global.get $k)))))"#,
            vec![("bump", small.clone()), ("mix", small.clone())],
        ),
        hand(
            "call-recursive",
            r#"(module
                (func $fact (param i64) (result i64)
                  (if (result i64) (i64.le_s (local.get 0) (i64.const 1))
                    (then (i64.const 1))
                    (else (i64.mul (local.get 0) (call $fact (i64.sub (local.get 0) (i64.const 1)))))))
                (func (export "f") (param i32) (result i64)
                  (call $fact (i64.extend_i32_s (local.get 0)))))"#,
            vec![("f", ints([-1, 0, 1, 5, 20, 21, 25, 200]))],
        ),
        hand(
            "call-multi-arg",
            r#"(module
                (func $g (param i32 i64 f32 f64) (result f64)
                  (f64.add (f64.add (f64.convert_i32_s (local.get 0)) (f64.convert_i64_s (local.get 1)))
                           (f64.add (f64.promote_f32 (local.get 2)) (local.get 3))))
                (func (export "f") (param i32) (result f64)
                  (call $g (local.get 0) (i64.const -3) (f32.const 0.5) (f64.const 1e10))))"#,
            vec![("f", small.clone())],
        ),
        hand(
            "return-early",
            r#"(module (func (export "f") (param i32) (result i32)
                (block (loop
                  (if (i32.gt_s (local.get 0) (i32.const 50)) (then (return (local.get 0))))
                  (local.set 0 (i32.add (local.get 0) (i32.const 7)))
                  (br 0)))
                (i32.const -1)))"#,
            vec![("f", ints([-100, 0, 49, 51, 1000]))],
        ),
        hand(
            "unreachable",
            r#"(module (func (export "f") (param i32) (result i32)
                (if (local.get 0) (then unreachable))
                (i32.const 3)))"#,
            vec![("f", ints([0, 1]))],
        ),
        hand(
            "stack-exhaustion",
            r#"(module (func $r (export "f") (param i32) (result i32)
                (i32.add (i32.const 1) (call $r (local.get 0)))))"#,
            vec![("f", ints([0]))],
        ),
        hand(
            "call-indirect",
            r#"(module
                (type $ii (func (param i32) (result i32)))
                (type $v (func (result i64)))
                (table 5 funcref)
                (elem (i32.const 0) $dbl $neg $wide)
                (func $dbl (param i32) (result i32) (i32.shl (local.get 0) (i32.const 1)))
                (func $neg (param i32) (result i32) (i32.sub (i32.const 0) (local.get 0)))
                (func $wide (result i64) (i64.const 77))
                (func (export "f") (param i32 i32) (result i32)
                  (call_indirect (type $ii) (local.get 1) (local.get 0)))
                (func (export "g") (param i32) (result i64)
                  (call_indirect (type $v) (local.get 0))))"#,
            vec![("f", pairs(&[0, 1, 2, 3, 4, 5, -1], &[21])), ("g", ints([0, 2, 3, 9]))],
        ),
        hand(
            "memory-size-grow",
            r#"(module (memory 1 4)
                (func (export "grow") (param i32) (result i32) (memory.grow (local.get 0)))
                (func (export "size") (result i32) (memory.size))
                (func (export "grow-then-touch") (param i32) (result i32)
                  (drop (memory.grow (local.get 0)))
                  (i32.store8 (i32.sub (i32.mul (memory.size) (i32.const 65536)) (i32.const 1)) (i32.const 9))
                  (i32.load8_u (i32.sub (i32.mul (memory.size) (i32.const 65536)) (i32.const 1)))))"#,
            vec![
                ("size", vec![vec![]]),
                ("grow", ints([0, 1, 2, 1, 1, -1, 0])),
                ("size", vec![vec![]]),
                ("grow-then-touch", ints([0, 5])),
            ],
        ),
        hand(
            "memory-no-max",
            r#"(module (memory 0)
                (func (export "f") (param i32) (result i32)
                  (if (result i32) (i32.eq (memory.grow (local.get 0)) (i32.const -1))
                    (then (i32.const -1))
                    (else (i32.load (i32.const 0))))))"#,
            vec![("f", ints([0, 1, 0]))],
        ),
        hand(
            "data-segment",
            r#"(module (memory 1)
                (data (i32.const 16) "\01\02\03\04\05\06\07\08\ff\fe")
                (func (export "b") (param i32) (result i32) (i32.load8_s (local.get 0)))
                (func (export "w") (param i32) (result i64) (i64.load offset=16 (local.get 0))))"#,
            vec![("b", ints(14..28)), ("w", ints([-16, 0, 1, 2, 3]))],
        ),
    ];

    // Every load kind over the boundary, after seeding memory with a pattern.
    let loads = [
        "i32.load", "i64.load", "f32.load", "f64.load", "i32.load8_s", "i32.load8_u", "i32.load16_s",
        "i32.load16_u", "i64.load8_s", "i64.load8_u", "i64.load16_s", "i64.load16_u", "i64.load32_s",
        "i64.load32_u",
    ];
    for (i, ld) in loads.iter().enumerate() {
        let ty = &ld[..3];
        let text = format!(
            r#"(module (memory 1)
                (func $seed (local i32)
                  (block $d (loop $l
                    (br_if $d (i32.ge_u (local.get 0) (i32.const 65536)))
                    (i32.store8 (local.get 0) (i32.xor (i32.mul (local.get 0) (i32.const 151)) (i32.const 0x5a)))
                    (local.set 0 (i32.add (local.get 0) (i32.const 1)))
                    (br $l))))
                (start $seed)
                (func (export "f") (param i32) (result {ty}) ({ld} (local.get 0)))
                (func (export "o") (param i32) (result {ty}) ({ld} offset=3 (local.get 0))))"#
        );
        out.push(hand(
            &format!("load-{i}-{ld}"),
            &text,
            vec![("f", addrs()), ("o", addrs())],
        ));
    }

    // Stores of every width, read back through a wider load.
    let stores = [
        ("i32.store", "i32", "(i32.const 0x8badf00d)"),
        ("i64.store", "i64", "(i64.const 0x0123456789abcdef)"),
        ("f32.store", "f32", "(f32.const -1.5)"),
        ("f64.store", "f64", "(f64.const 6.02e23)"),
        ("i32.store8", "i32", "(i32.const 0x1ff)"),
        ("i32.store16", "i32", "(i32.const 0x12345)"),
        ("i64.store8", "i64", "(i64.const -2)"),
        ("i64.store16", "i64", "(i64.const 0x10001)"),
        ("i64.store32", "i64", "(i64.const 0xfedcba9876543210)"),
    ];
    for (i, (st, _ty, val)) in stores.iter().enumerate() {
        let text = format!(
            r#"(module (memory 1)
                (func (export "f") (param i32) (result i64)
                  ({st} (local.get 0) {val})
                  (i64.load (i32.and (local.get 0) (i32.const 0xfff8)))))"#
        );
        out.push(hand(&format!("store-{i}-{st}"), &text, vec![("f", addrs())]));
    }

    out
}

/// Every case in the suite.
pub fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = NumOp::ALL.iter().map(|&op| numeric_case(op)).collect();
    v.extend(structural_cases());
    v
}

fn to_wasmi(v: &Value) -> wasmi::Val {
    match *v {
        Value::I32(x) => wasmi::Val::I32(x),
        Value::I64(x) => wasmi::Val::I64(x),
        Value::F32(x) => wasmi::Val::F32(wasmi::F32::from_bits(x.to_bits())),
        Value::F64(x) => wasmi::Val::F64(wasmi::F64::from_bits(x.to_bits())),
    }
}

fn from_wasmi(v: &wasmi::Val) -> Option<Value> {
    Some(match v {
        wasmi::Val::I32(x) => Value::I32(*x),
        wasmi::Val::I64(x) => Value::I64(*x),
        wasmi::Val::F32(x) => Value::F32(f32::from_bits(x.to_bits())),
        wasmi::Val::F64(x) => Value::F64(f64::from_bits(x.to_bits())),
        _ => return None,
    })
}

fn map_trap(code: wasmi::TrapCode) -> Outcome {
    use wasmi::TrapCode as C;
    Outcome::Trap(match code {
        C::UnreachableCodeReached => TrapKind::Unreachable,
        C::MemoryOutOfBounds => TrapKind::MemOutOfBounds,
        C::TableOutOfBounds | C::IndirectCallToNull => TrapKind::TableOutOfBounds,
        C::IntegerDivisionByZero => TrapKind::IntegerDivByZero,
        C::IntegerOverflow => TrapKind::IntegerOverflow,
        C::BadConversionToInteger => TrapKind::InvalidConversion,
        C::StackOverflow => TrapKind::StackExhausted,
        C::BadSignature => TrapKind::IndirectCallTypeMismatch,
        other => return Outcome::Other(format!("{other:?}")),
    })
}

struct Reference {
    store: wasmi::Store<()>,
    instance: wasmi::Instance,
}

impl Reference {
    fn new(wasm: &[u8]) -> Result<Self, String> {
        let engine = wasmi::Engine::default();
        let module = wasmi::Module::new(&engine, wasm).map_err(|e| e.to_string())?;
        let mut store = wasmi::Store::new(&engine, ());
        let linker = wasmi::Linker::<()>::new(&engine);
        let instance = linker
            .instantiate_and_start(&mut store, &module)
            .map_err(|e| e.to_string())?;
        Ok(Self { store, instance })
    }

    fn call(&mut self, export: &str, args: &[Value]) -> Outcome {
        let Some(func) = self.instance.get_func(&self.store, export) else {
            return Outcome::Other(format!("no export {export}"));
        };
        let ty = func.ty(&self.store);
        let mut results: Vec<wasmi::Val> = ty.results().iter().map(|t| wasmi::Val::default_for_ty(*t)).collect();
        let inputs: Vec<wasmi::Val> = args.iter().map(to_wasmi).collect();
        match func.call(&mut self.store, &inputs, &mut results) {
            Ok(()) => match results.iter().map(from_wasmi).collect::<Option<Vec<_>>>() {
                Some(v) => Outcome::Values(v),
                None => Outcome::Other("reference value type".into()),
            },
            Err(e) => match e.as_trap_code() {
                Some(c) => map_trap(c),
                None => Outcome::Other(e.to_string()),
            },
        }
    }
}

struct Ours {
    instance: Instance<()>,
}

impl Ours {
    fn new(wasm: &[u8]) -> Result<Self, String> {
        let module = load(wasm).map_err(|e| e.to_string())?;
        let limits = InstanceLimits {
            page_size: 65536,
            initial_fuel: FUEL,
            ..Default::default()
        };
        let instance =
            Instance::instantiate(&module, &HostImportTable::new(), limits, &mut ()).map_err(|e| e.to_string())?;
        Ok(Self { instance })
    }

    fn call(&mut self, export: &str, args: &[Value]) -> Outcome {
        match self.instance.invoke(&mut (), export, args, FUEL) {
            Ok(r) => match r.outcome {
                ExecOutcome::Values(v) => Outcome::Values(v),
                ExecOutcome::Trap(t) => Outcome::Trap(t),
                ExecOutcome::OutOfFuel => Outcome::Other("out of fuel".into()),
            },
            Err(e) => Outcome::Other(e.to_string()),
        }
    }
}

/// Run one case through both engines, calls in order on one instance each
/// so state carried between calls (globals, memory) is compared too.
pub fn run_case(case: &Case, report: &mut Report) {
    report.modules += 1;
    let (mut ours, mut reference) = match (Ours::new(&case.wasm), Reference::new(&case.wasm)) {
        (Ok(o), Ok(r)) => (o, r),
        (o, r) => {
            report.setup_errors.push(format!(
                "{}: ours {:?}, reference {:?}",
                case.name,
                o.err(),
                r.err()
            ));
            return;
        }
    };
    for (export, grid) in &case.calls {
        for args in grid {
            report.executions += 1;
            let a = ours.call(export, args);
            let b = reference.call(export, args);
            if !same(&a, &b) {
                report.mismatches.push(Mismatch {
                    module: case.name.clone(),
                    export: export.clone(),
                    args: args.clone(),
                    ours: a,
                    reference: b,
                });
            }
        }
    }
}

pub fn run_suite() -> Report {
    let start = Instant::now();
    let mut report = Report::default();
    for case in cases() {
        run_case(&case, &mut report);
    }
    report.elapsed = start.elapsed();
    report
}
