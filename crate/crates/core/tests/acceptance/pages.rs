use capsule_core::capsule::{CapsuleManager, ManagerConfig};
use capsule_core::host::{HostState, SensorSimConfig};
use capsule_wasm::{load, ExecOutcome, Instance, InstanceLimits, TrapKind, Value};

const PROBE: &str = r#"
(module
  (memory (export "memory") 1 3)
  (func (export "size") (result i32) (memory.size))
  (func (export "grow") (param i32) (result i32) (memory.grow (local.get 0)))
  (func (export "load8") (param i32) (result i32) (i32.load8_u (local.get 0)))
  (func (export "load8_off") (param i32) (result i32) (i32.load8_u offset=1 (local.get 0)))
  (func (export "load32") (param i32) (result i32) (i32.load (local.get 0)))
  (func (export "store64") (param i32) (i64.store (local.get 0) (i64.const -1))))
"#;

struct Probe(Instance<()>);

impl Probe {
    fn call(&mut self, f: &str, args: &[i32]) -> ExecOutcome {
        let args: Vec<Value> = args.iter().map(|&a| Value::I32(a)).collect();
        self.0.invoke(&mut (), f, &args, 1000).unwrap().outcome
    }

    fn i32(&mut self, f: &str, args: &[i32]) -> i32 {
        match self.call(f, args) {
            ExecOutcome::Values(v) => v[0].as_i32().unwrap(),
            o => panic!("{f}({args:?}): {o}"),
        }
    }

    fn ok(&mut self, f: &str, addr: i64) {
        assert!(self.call(f, &[addr as i32]).is_values(), "{f}({addr}) should succeed");
    }

    fn traps(&mut self, f: &str, addr: i64) {
        assert_eq!(self.call(f, &[addr as i32]), ExecOutcome::Trap(TrapKind::MemOutOfBounds), "{f}({addr})");
    }
}

fn check_page_size(ps: u32) {
    let m = load(&wat::parse_str(PROBE).unwrap()).unwrap();
    let limits = InstanceLimits {
        page_size: ps,
        ..Default::default()
    };
    let mut p = Probe(Instance::instantiate(&m, &Default::default(), limits, &mut ()).unwrap());
    for pages in 1..=3i64 {
        let len = pages * ps as i64;
        assert_eq!(p.i32("size", &[]), pages as i32);
        assert_eq!(p.0.memory_len() as i64, len);
        p.ok("load8", len - 1);
        p.traps("load8", len);
        p.ok("load8_off", len - 2);
        p.traps("load8_off", len - 1);
        p.ok("load32", len - 4);
        p.traps("load32", len - 3);
        p.ok("store64", len - 8);
        p.traps("store64", len - 7);
        p.traps("load8", -1);
        if pages < 3 {
            assert_eq!(p.i32("grow", &[1]), pages as i32);
        }
    }
    assert_eq!(p.i32("grow", &[1]), -1, "past the declared maximum");
    assert_eq!(p.i32("grow", &[0]), 3);
    assert_eq!(p.0.memory_len(), 3 * ps as usize);
}

pub fn check() -> String {
    for ps in [32768, 65536] {
        check_page_size(ps);
        let grow = capsule_corpus::MEMGROW;
        let m = load(grow).unwrap();
        let limits = InstanceLimits {
            page_size: ps,
            ..Default::default()
        };
        let mut inst = Instance::instantiate(&m, &Default::default(), limits, &mut ()).unwrap();
        let r = inst.invoke(&mut (), "grow", &[Value::I32(3)], 100_000).unwrap();
        assert_eq!(r.outcome, ExecOutcome::Values(vec![Value::I32(4)]));
        assert_eq!(inst.memory_len(), 4 * ps as usize);

        let cfg = ManagerConfig {
            page_size: ps,
            ..Default::default()
        };
        let mut mgr = CapsuleManager::new(cfg, HostState::new(0, SensorSimConfig::default(), 4));
        let info = mgr.deploy_persistent(capsule_corpus::COUNTER, "c").unwrap();
        assert_eq!(info.ram_estimate, ps as u64 + capsule_corpus::COUNTER.len() as u64 + 4096);
    }
    "page sizes 32768 and 65536: memory.size, memory.grow, maximum, traps at len/len-1/len-3/len-7 by access width; \
     len-1/len-2/len-4/len-8 succeed; estimates scale with page size"
        .into()
}
