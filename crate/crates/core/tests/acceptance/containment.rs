use capsule_core::coap::code;
use capsule_core::device::Device;
use capsule_corpus::{BAD_ALLOC, COUNTER, CRASHY, OOB, SPIN};

use crate::common::{client, device_config, run_payload, stamp};

pub fn check() -> String {
    let mut cfg = device_config(1);
    cfg.limits.guard_bytes = 64;
    let mut d = Device::new(cfg);
    d.preload("c", &stamp(COUNTER)).unwrap();
    d.preload("crashy", &stamp(CRASHY)).unwrap();
    let mut c = client(&mut d);
    assert_eq!(c.post("/c/count", b"").unwrap().code(), code::CHANGED);

    let mut seen = Vec::new();
    let attacks: Vec<(&str, Box<dyn Fn(&mut crate::common::LoopClient) -> u8>)> = vec![
        ("ephemeral infinite loop", Box::new(|c| c.post("/vm-control/run", &run_payload(SPIN, b"")).unwrap().code())),
        ("ephemeral oob", Box::new(|c| c.post("/vm-control/run", &run_payload(OOB, b"")).unwrap().code())),
        ("ephemeral bad alloc", Box::new(|c| c.post("/vm-control/run", &run_payload(BAD_ALLOC, b"in")).unwrap().code())),
        ("persistent infinite loop", Box::new(|c| c.get("/crashy/spin").unwrap().code())),
        ("persistent oob", Box::new(|c| c.get("/crashy/scribble").unwrap().code())),
        ("persistent div by zero", Box::new(|c| c.get("/crashy/div").unwrap().code())),
        ("persistent stack overflow", Box::new(|c| c.get("/crashy/deep").unwrap().code())),
        ("persistent bad response", Box::new(|c| c.get("/crashy/bigresp").unwrap().code())),
    ];
    for (what, attack) in &attacks {
        assert_eq!(attack(&mut c), code::INTERNAL_SERVER_ERROR, "{what}");
        let dev = c.transport().device();
        for p in ["c", "crashy"] {
            assert!(dev.manager().get(p).unwrap().instance().guard_intact(), "{p} canary after {what}");
        }
        let r = c.get("/c/count").unwrap();
        assert_eq!((r.code(), r.message.payload.as_slice()), (code::CONTENT, b"1".as_slice()), "{what}");
        assert_eq!(c.get("/crashy/ok").unwrap().code(), code::CONTENT, "crashy still serves after {what}");
        seen.push(*what);
    }
    format!("{} attacks each answered 5.00; canaries intact; neighbours and the attacker keep serving", seen.len())
}
