use capsule_corpus::conformance::{cases, run_suite};
use capsule_wasm::instr::NumOp;

pub fn check() -> String {
    let names: Vec<String> = cases().into_iter().map(|c| c.name).collect();
    for op in NumOp::ALL {
        assert!(names.iter().any(|n| n == op.name()), "no case for {}", op.name());
    }
    let r = run_suite();
    for m in r.mismatches.iter().take(10) {
        eprintln!("  {m}");
    }
    assert!(r.setup_errors.is_empty(), "setup errors: {:?}", r.setup_errors);
    assert!(r.modules >= 60, "{} modules", r.modules);
    assert!(r.agreed(), "{} of {} executions disagree", r.mismatches.len(), r.executions);
    assert!(r.elapsed.as_secs_f64() < 60.0, "took {:?}", r.elapsed);
    format!(
        "{} modules, {} executions, 100% agreement with wasmi, {:.2} s (limit 60 s)",
        r.modules,
        r.executions,
        r.elapsed.as_secs_f64()
    )
}
