use capsule_core::capsule::{
    estimate_ram, CapsuleError, CapsuleManager, CapsuleRequest, ManagerConfig, DEFAULT_INSTANCE_OVERHEAD,
};
use capsule_core::host::{HostState, SensorSimConfig};
use capsule_corpus::{pad_to, COUNTER, CRASHY, FIB, INIT_FAILS, INIT_TRAPS, SENSOR_V1, SENSOR_V2};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ≈80 KB RAM for a persistent capsule of 43.2 KB with 32768 bytes of linear memory.
const REFERENCE_RAM: u64 = 80_000;
const CAPSULE_BYTES: usize = 43_200;

fn manager(cfg: ManagerConfig) -> CapsuleManager {
    CapsuleManager::new(cfg, HostState::new(0, SensorSimConfig::default(), 16))
}

fn conserved(m: &CapsuleManager) {
    let b = m.budget();
    assert_eq!((b.ram_used, b.flash_used), m.recompute());
    assert!(b.ram_used <= b.ram_budget && b.flash_used <= b.flash_budget);
}

fn atomic_updates() -> usize {
    let cfg = ManagerConfig {
        ram_budget: 150_000,
        flash_budget: 120_000,
        ..Default::default()
    };
    let mut m = manager(cfg);
    m.deploy_persistent(SENSOR_V1, "vm1").unwrap();
    m.deploy_persistent(COUNTER, "c").unwrap();
    let budget = m.budget();
    let list = m.list();
    let ram_hog = pad_to(SENSOR_V2, 100_000).unwrap();
    let flash_hog = pad_to(SENSOR_V2, 119_000).unwrap();
    let injected: Vec<(&str, Vec<u8>)> = vec![
        ("truncated", SENSOR_V2[..SENSOR_V2.len() / 2].to_vec()),
        ("not wasm", b"\0asn\x01\0\0\0".to_vec()),
        ("missing export", FIB.to_vec()),
        ("init returns 1", INIT_FAILS.to_vec()),
        ("init traps", INIT_TRAPS.to_vec()),
        ("ram budget", ram_hog),
        ("flash budget", flash_hog),
    ];
    for (what, bytes) in &injected {
        let e = m.update_capsule("vm1", bytes).unwrap_err();
        let e2 = m.deploy_persistent(bytes, "new").unwrap_err();
        if *what == "ram budget" {
            assert!(matches!(e, CapsuleError::BudgetExceeded { resource: "ram", .. }), "{e}");
        }
        if *what == "flash budget" {
            assert!(matches!(e2, CapsuleError::BudgetExceeded { resource: "flash", .. }), "{e2}");
        }
        assert_eq!(m.budget(), budget, "{what}");
        assert_eq!(m.list(), list, "{what}");
        let h = m.handle_request("vm1", &CapsuleRequest::get("version")).unwrap();
        assert_eq!(h.response.payload, b"1", "{what}: old version serves");
        conserved(&m);
    }
    m.update_capsule("vm1", SENSOR_V2).unwrap();
    conserved(&m);
    injected.len()
}

fn random_ops() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let padded = pad_to(COUNTER, 20_000).unwrap();
    let codes: [&[u8]; 6] = [COUNTER, CRASHY, SENSOR_V1, SENSOR_V2, &padded, INIT_TRAPS];
    let prefixes = ["a", "b", "c", "d"];
    let paths = ["grow", "count", "scribble", "ok"];
    let mut ops = 0;
    for _ in 0..50 {
        let budget = 60_000 + (rng.next_u32() % 300_000) as u64;
        let mut m = manager(ManagerConfig {
            ram_budget: budget,
            flash_budget: 60_000,
            ..Default::default()
        });
        for _ in 0..40 {
            let p = prefixes[rng.next_u32() as usize % 4];
            let c = codes[rng.next_u32() as usize % 6];
            let _ = match rng.next_u32() % 4 {
                0 => m.deploy_persistent(c, p).map(drop),
                1 => m.update_capsule(p, c).map(drop),
                2 => m.terminate(p).map(drop),
                _ => m
                    .handle_request(p, &CapsuleRequest::get(paths[rng.next_u32() as usize % 4]))
                    .map(drop),
            };
            conserved(&m);
            ops += 1;
        }
    }
    ops
}

pub fn check() -> String {
    let est = estimate_ram(32_768, CAPSULE_BYTES as u64, DEFAULT_INSTANCE_OVERHEAD);
    assert_eq!(est, 32_768 + 43_200 + 4_096);
    assert!(est.abs_diff(REFERENCE_RAM) <= 10_000, "{est}");
    let padded = pad_to(SENSOR_V1, CAPSULE_BYTES).unwrap();
    let info = manager(ManagerConfig::default()).deploy_persistent(&padded, "vm1").unwrap();
    assert_eq!(info.ram_estimate, est);
    let failures = atomic_updates();
    let ops = random_ops();
    format!(
        "43200-byte capsule + 32768 B memory + {DEFAULT_INSTANCE_OVERHEAD} B overhead = {est} B \
         ({} B from 80 KB, limit 10000); {failures} injected failures left budget and old version intact; \
         {ops} random ops conserved accounting",
        est.abs_diff(REFERENCE_RAM)
    )
}
