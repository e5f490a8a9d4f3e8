use capsule_wasm::*;

fn load_wat(src: &str) -> ValidatedModule {
    load(&wat::parse_str(src).expect("wat")).expect("load")
}

fn instance(m: &ValidatedModule, limits: InstanceLimits) -> Instance<()> {
    Instance::instantiate(m, &HostImportTable::new(), limits, &mut ()).expect("instantiate")
}

fn run(inst: &mut Instance<()>, name: &str, args: &[Value]) -> ExecOutcome {
    inst.invoke(&mut (), name, args, 10_000_000).unwrap().outcome
}

fn i32s(v: i32) -> ExecOutcome {
    ExecOutcome::Values(vec![Value::I32(v)])
}

const FIB: &str = r#"
(module
  (func (export "fib") (param $n i32) (result i32)
    (local $a i32) (local $b i32) (local $t i32)
    (local.set $b (i32.const 1))
    (block $done
      (loop $next
        (br_if $done (i32.eqz (local.get $n)))
        (local.set $t (i32.add (local.get $a) (local.get $b)))
        (local.set $a (local.get $b))
        (local.set $b (local.get $t))
        (local.set $n (i32.sub (local.get $n) (i32.const 1)))
        (br $next)))
    (local.get $a)))
"#;

#[test]
fn fib_10_is_55() {
    let m = load_wat(FIB);
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(run(&mut i, "fib", &[Value::I32(10)]), i32s(55));
    assert_eq!(run(&mut i, "fib", &[Value::I32(0)]), i32s(0));
    assert_eq!(run(&mut i, "fib", &[Value::I32(1)]), i32s(1));
}

#[test]
fn div_by_zero_traps() {
    let m = load_wat(
        r#"(module (func (export "d") (param i32 i32) (result i32)
             (i32.div_s (local.get 0) (local.get 1))))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(
        run(&mut i, "d", &[Value::I32(7), Value::I32(0)]),
        ExecOutcome::Trap(TrapKind::IntegerDivByZero)
    );
    assert_eq!(run(&mut i, "d", &[Value::I32(7), Value::I32(-2)]), i32s(-3));
}

#[test]
fn add_module_shape_matches_reference_parser() {
    let bytes = wat::parse_str(
        r#"(module (func (export "add") (param i32 i32) (result i32)
             local.get 0 local.get 1 i32.add))"#,
    )
    .unwrap();
    let m = parse_module(&bytes).unwrap();

    let mut types = 0;
    let mut funcs = 0;
    let mut exports = 0;
    for payload in wasmparser::Parser::new(0).parse_all(&bytes) {
        match payload.unwrap() {
            wasmparser::Payload::TypeSection(r) => types += r.count(),
            wasmparser::Payload::FunctionSection(r) => funcs += r.count(),
            wasmparser::Payload::ExportSection(r) => exports += r.count(),
            _ => {}
        }
    }
    assert_eq!((m.types.len(), m.funcs.len(), m.exports.len()), (types as usize, funcs as usize, exports as usize));
    assert_eq!((types, funcs, exports), (1, 1, 1));
}

#[test]
fn validation_verdicts_agree_with_reference_validator() {
    let cases = [
        // br_table with label arities 1 and 0
        r#"(module (func (result i32)
             (block (result i32) (block (i32.const 1) (i32.const 0) (br_table 0 1)) (i32.const 2))))"#,
        r#"(module (func (result i32)
             (block (result i32) (block (result i32) (i32.const 1) (i32.const 0) (br_table 0 1)))))"#,
        r#"(module (func (i32.const 1) (i64.add) (drop)))"#,
        r#"(module (func (result i32) unreachable i64.add drop i32.const 0))"#,
        r#"(module (func (param i32) (result i32) (if (result i32) (local.get 0) (then (i32.const 1)) (else (i32.const 2)))))"#,
        r#"(module (global i32 (i32.const 0)) (func (i32.const 1) (global.set 0)))"#,
        r#"(module (memory 1) (func (i32.load align=8 (i32.const 0)) drop))"#,
        r#"(module (func (loop (result i32) (br 0))))"#,
        r#"(module (func (block (br_if 0 (i32.const 1)) )))"#,
    ];
    let mut features = wasmparser::WasmFeatures::empty();
    features.insert(wasmparser::WasmFeatures::FLOATS);
    for src in cases {
        let bytes = wat::parse_str(src).unwrap();
        let ours = load(&bytes).is_ok();
        let reference = wasmparser::Validator::new_with_features(features)
            .validate_all(&bytes)
            .is_ok();
        assert_eq!(ours, reference, "verdict differs for {src}");
    }
}

#[test]
fn data_segment_past_memory_rejected_like_reference() {
    let src = r#"(module (memory 1) (data (i32.const 65535) "ab"))"#;
    let bytes = wat::parse_str(src).unwrap();
    let m = load(&bytes).unwrap();
    let r = Instance::<()>::instantiate(&m, &HostImportTable::new(), InstanceLimits::default(), &mut ());
    assert!(matches!(r, Err(InstantiationError::DataSegmentOutOfBounds(0))));

    let engine = wasmi::Engine::default();
    let module = wasmi::Module::new(&engine, &bytes[..]).unwrap();
    let mut store = wasmi::Store::new(&engine, ());
    let linker = wasmi::Linker::<()>::new(&engine);
    assert!(linker.instantiate_and_start(&mut store, &module).is_err());

    // one byte earlier fits
    let ok = wat::parse_str(r#"(module (memory 1) (data (i32.const 65534) "ab"))"#).unwrap();
    let m = load(&ok).unwrap();
    assert!(Instance::<()>::instantiate(&m, &HostImportTable::new(), InstanceLimits::default(), &mut ()).is_ok());
}

#[test]
fn small_page_instance_has_32k_memory() {
    let m = load_wat(r#"(module (memory (export "m") 1))"#);
    let limits = InstanceLimits {
        page_size: 32768,
        ..Default::default()
    };
    let mut i = instance(&m, limits);
    assert_eq!(i.memory_len(), 32768);
    assert_eq!(i.memory_grow(1), 1);
    assert_eq!(i.memory_len(), 65536);
    assert_eq!(i.memory_grow(0), 2);
}

#[test]
fn grow_respects_declared_max() {
    let m = load_wat(r#"(module (memory 1 2) (func (export "g") (param i32) (result i32) (memory.grow (local.get 0))))"#);
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(run(&mut i, "g", &[Value::I32(2)]), i32s(-1));
    assert_eq!(i.memory_len(), 65536);
    assert_eq!(run(&mut i, "g", &[Value::I32(0)]), i32s(1));
    assert_eq!(run(&mut i, "g", &[Value::I32(1)]), i32s(1));
    assert_eq!(i.memory_len(), 131072);
}

#[test]
fn bad_page_sizes_rejected() {
    let m = load_wat("(module)");
    for ps in [0, 128, 1000, 131072] {
        let limits = InstanceLimits {
            page_size: ps,
            ..Default::default()
        };
        let r = Instance::<()>::instantiate(&m, &HostImportTable::new(), limits, &mut ());
        assert!(matches!(r, Err(InstantiationError::InvalidLimits(_))), "page size {ps}");
    }
}

#[test]
fn host_memory_access() {
    let m = load_wat(r#"(module (memory 1))"#);
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(i.mem_read(0, 0).unwrap(), Vec::<u8>::new());
    i.mem_write(100, b"capsule").unwrap();
    assert_eq!(i.mem_read(100, 7).unwrap(), b"capsule");
    let len = i.memory_len() as u32;
    assert!(i.mem_read(len - 1, 2).is_err());
    assert!(i.mem_read(len - 1, 1).is_ok());
    assert!(i.mem_write(len, b"x").is_err());
}

#[test]
fn deep_recursion_exhausts_stack() {
    let m = load_wat(
        r#"(module (func $f (export "f") (param i32) (result i32)
             (if (result i32) (local.get 0)
               (then (call $f (i32.sub (local.get 0) (i32.const 1))))
               (else (i32.const 7)))))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    // 511 nested calls plus the entry frame fit in 512 frames.
    assert_eq!(run(&mut i, "f", &[Value::I32(511)]), i32s(7));
    assert_eq!(
        run(&mut i, "f", &[Value::I32(512)]),
        ExecOutcome::Trap(TrapKind::StackExhausted)
    );
    assert_eq!(i.last_stats().peak_frames, 512);
}

#[test]
fn call_indirect_traps() {
    let m = load_wat(
        r#"(module
             (type $ii (func (param i32) (result i32)))
             (type $v (func (result i32)))
             (table 3 funcref)
             (elem (i32.const 0) $inc $k)
             (func $inc (type $ii) (i32.add (local.get 0) (i32.const 1)))
             (func $k (type $v) (i32.const 9))
             (func (export "ci") (param i32) (result i32)
               (call_indirect (type $ii) (i32.const 41) (local.get 0))))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(run(&mut i, "ci", &[Value::I32(0)]), i32s(42));
    assert_eq!(
        run(&mut i, "ci", &[Value::I32(1)]),
        ExecOutcome::Trap(TrapKind::IndirectCallTypeMismatch)
    );
    assert_eq!(
        run(&mut i, "ci", &[Value::I32(2)]),
        ExecOutcome::Trap(TrapKind::TableOutOfBounds)
    );
    assert_eq!(
        run(&mut i, "ci", &[Value::I32(3)]),
        ExecOutcome::Trap(TrapKind::TableOutOfBounds)
    );
}

#[test]
fn br_table_selects_arms() {
    let m = load_wat(
        r#"(module (func (export "sel") (param i32) (result i32)
             (block $d (block $c (block $b (block $a
               (br_table $a $b $c $d (local.get 0)))
               (return (i32.const 10)))
               (return (i32.const 11)))
               (return (i32.const 12)))
             (i32.const 13)))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    for (arg, want) in [(0, 10), (1, 11), (2, 12), (3, 13), (4, 13), (-1, 13)] {
        assert_eq!(run(&mut i, "sel", &[Value::I32(arg)]), i32s(want), "arg {arg}");
    }
}

#[test]
fn branch_carries_value_out_of_nested_blocks() {
    let m = load_wat(
        r#"(module (func (export "f") (param i32) (result i32)
             (block $out (result i32)
               (i32.const 100) (i32.const 200) (drop) (drop)
               (i32.const 1) (i32.const 2) (i32.const 3)
               (block (result i32)
                 (br_if $out (i32.const 5) (local.get 0))
                 (drop)
                 (i32.const 6))
               (drop) (drop) (drop))))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(run(&mut i, "f", &[Value::I32(1)]), i32s(5));
    assert_eq!(run(&mut i, "f", &[Value::I32(0)]), i32s(1));
}

#[test]
fn imports_resolve_by_name_and_signature() {
    let m = load_wat(
        r#"(module (import "host" "twice" (func $t (param i32) (result i32)))
             (func (export "f") (param i32) (result i32) (call $t (local.get 0))))"#,
    );
    let empty = Instance::<()>::instantiate(&m, &HostImportTable::new(), InstanceLimits::default(), &mut ());
    assert!(matches!(empty, Err(InstantiationError::UnresolvedImport { .. })));

    let mut wrong = HostImportTable::<()>::new();
    wrong.define("host", "twice", FuncType::new([ValType::I64], [ValType::I64]), |_, a| Ok(Some(a[0])));
    let r = Instance::instantiate(&m, &wrong, InstanceLimits::default(), &mut ());
    assert!(matches!(r, Err(InstantiationError::SignatureMismatch { .. })));

    let mut good = HostImportTable::<u32>::new();
    good.define("host", "twice", FuncType::new([ValType::I32], [ValType::I32]), |c, a| {
        *c.data += 1;
        Ok(Some(Value::I32(a[0].as_i32().unwrap() * 2)))
    });
    let mut calls = 0u32;
    let mut i = Instance::instantiate(&m, &good, InstanceLimits::default(), &mut calls).unwrap();
    let r = i.invoke(&mut calls, "f", &[Value::I32(21)], 100).unwrap();
    assert_eq!(r.outcome, i32s(42));
    assert_eq!(calls, 1);

    // restricting the table removes the capability
    let none = good.restrict([("host", "other")]);
    assert!(none.is_empty());
    assert!(matches!(
        Instance::instantiate(&m, &none, InstanceLimits::default(), &mut calls),
        Err(InstantiationError::UnresolvedImport { .. })
    ));
}

#[test]
fn host_result_type_mismatch_is_host_error() {
    let m = load_wat(
        r#"(module (import "host" "bad" (func $b (result i32)))
             (func (export "f") (result i32) (call $b)))"#,
    );
    let mut t = HostImportTable::<()>::new();
    t.define("host", "bad", FuncType::new([], [ValType::I32]), |_, _| Ok(Some(Value::I64(1))));
    let mut i = Instance::instantiate(&m, &t, InstanceLimits::default(), &mut ()).unwrap();
    assert!(matches!(i.invoke(&mut (), "f", &[], 100), Err(InvokeError::Host(_))));
}

#[test]
fn start_function_trap_fails_instantiation() {
    let m = load_wat(r#"(module (func $s unreachable) (start $s))"#);
    let r = Instance::<()>::instantiate(&m, &HostImportTable::new(), InstanceLimits::default(), &mut ());
    assert!(matches!(
        r,
        Err(InstantiationError::StartTrapped(ExecOutcome::Trap(TrapKind::Unreachable)))
    ));

    let m = load_wat(r#"(module (func $s (loop (br 0))) (start $s))"#);
    let limits = InstanceLimits {
        initial_fuel: 1000,
        ..Default::default()
    };
    let r = Instance::<()>::instantiate(&m, &HostImportTable::new(), limits, &mut ());
    assert!(matches!(r, Err(InstantiationError::StartTrapped(ExecOutcome::OutOfFuel))));
}

#[test]
fn start_function_runs_before_invoke() {
    let m = load_wat(
        r#"(module (global $g (mut i32) (i32.const 0))
             (func $s (global.set $g (i32.const 5))) (start $s)
             (func (export "g") (result i32) (global.get $g)))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(run(&mut i, "g", &[]), i32s(5));
}

#[test]
fn invoke_errors() {
    let m = load_wat(FIB);
    let mut i = instance(&m, InstanceLimits::default());
    assert!(matches!(i.invoke(&mut (), "nope", &[], 10), Err(InvokeError::NoSuchExport(_))));
    assert!(matches!(
        i.invoke(&mut (), "fib", &[Value::I64(1)], 10),
        Err(InvokeError::ArgTypeMismatch { .. })
    ));
    assert!(matches!(i.invoke(&mut (), "fib", &[], 10), Err(InvokeError::ArgTypeMismatch { .. })));
}

#[test]
fn fuel_counts_every_instruction() {
    let m = load_wat(r#"(module (func (export "f") (result i32) (i32.add (i32.const 1) (i32.const 2))))"#);
    let mut i = instance(&m, InstanceLimits::default());
    // i32.const, i32.const, i32.add, end
    let r = i.invoke(&mut (), "f", &[], 100).unwrap();
    assert_eq!(r.fuel_consumed, 4);
    assert_eq!(r.outcome, i32s(3));
    let r = i.invoke(&mut (), "f", &[], 4).unwrap();
    assert_eq!(r.outcome, i32s(3));
    let r = i.invoke(&mut (), "f", &[], 3).unwrap();
    assert_eq!(r.outcome, ExecOutcome::OutOfFuel);
    assert_eq!(r.fuel_consumed, 3);
}

#[test]
fn infinite_loop_consumes_exactly_the_budget() {
    let m = load_wat(r#"(module (func (export "spin") (loop (br 0))))"#);
    let mut i = instance(&m, InstanceLimits::default());
    let r = i.invoke(&mut (), "spin", &[], 1_000_000).unwrap();
    assert_eq!(r.outcome, ExecOutcome::OutOfFuel);
    assert_eq!(r.fuel_consumed, 1_000_000);
}

#[test]
fn unsupported_features_rejected_at_parse() {
    let simd = wat::parse_str(r#"(module (func (drop (v128.const i64x2 0 0))))"#).unwrap();
    assert!(matches!(parse_module(&simd), Err(ParseError::UnsupportedFeature(_))));
    let bulk = wat::parse_str(r#"(module (memory 1) (func (memory.fill (i32.const 0) (i32.const 0) (i32.const 0))))"#).unwrap();
    assert!(matches!(parse_module(&bulk), Err(ParseError::UnsupportedFeature(_))));
    let mv = wat::parse_str(r#"(module (func (result i32 i32) i32.const 0 i32.const 1))"#).unwrap();
    assert!(matches!(parse_module(&mv), Err(ParseError::UnsupportedFeature(_))));
    let rt = wat::parse_str(r#"(module (func (drop (ref.null func))))"#).unwrap();
    assert!(matches!(parse_module(&rt), Err(ParseError::UnsupportedFeature(_))));
}

#[test]
fn nan_results_are_canonical_but_constants_are_not() {
    let m = load_wat(
        r#"(module
             (func (export "sum") (result i32)
               (i32.reinterpret_f32 (f32.add (f32.const nan:0x200001) (f32.const 1))))
             (func (export "konst") (result i32)
               (i32.reinterpret_f32 (f32.const -nan:0x200001))))"#,
    );
    let mut i = instance(&m, InstanceLimits::default());
    assert_eq!(run(&mut i, "sum", &[]), i32s(CANONICAL_NAN_F32 as i32));
    assert_eq!(run(&mut i, "konst", &[]), i32s(0xFFA0_0001u32 as i32));
}
