use capsule_core::host::{host_imports, HostState, SensorSimConfig};
use capsule_corpus::{workloads, Workload};
use capsule_wasm::{load, ExecOutcome, Instance, InstanceLimits};

const BIG: u64 = 1_000_000_000;

fn run(w: &Workload, fuel: u64) -> (ExecOutcome, u64) {
    let m = load(w.wasm).unwrap();
    let mut host = HostState::new(0, SensorSimConfig::default(), 16);
    let mut inst = Instance::instantiate(&m, &host_imports(), InstanceLimits::default(), &mut host).unwrap();
    let r = inst.invoke(&mut host, w.export, &w.args, fuel).unwrap();
    (r.outcome, r.fuel_consumed)
}

pub fn check() -> String {
    let ws = workloads();
    assert_eq!(ws.len(), 20);
    let mut traps = 0;
    for w in &ws {
        let (outcome, c) = run(w, BIG);
        assert!(!matches!(outcome, ExecOutcome::OutOfFuel), "{} needs more fuel", w.name);
        traps += matches!(outcome, ExecOutcome::Trap(_)) as usize;
        for i in 1..10 {
            assert_eq!(run(w, BIG), (outcome.clone(), c), "{}: run {i} differs", w.name);
        }
        for f in [c, c + 1, c + 1000, 2 * c] {
            assert_eq!(run(w, f), (outcome.clone(), c), "{}: fuel {f} vs consumed {c}", w.name);
        }
        assert!(c > 0, "{}", w.name);
        assert_eq!(run(w, c - 1), (ExecOutcome::OutOfFuel, c - 1), "{}: fuel {}", w.name, c - 1);
    }
    format!("20 workloads ({traps} trapping), 10 runs each identical, F'=C/C+1/C+1000/2C identical, C-1 out of fuel")
}
