use std::time::Instant;

use capsule_core::coap::code;
use capsule_core::fleet::Fleet;
use capsule_core::parallel::Execution;
use capsule_corpus::{INIT_FAILS, SENSOR_V1, SENSOR_V2};

use crate::common::{client, device_config, stamp};

fn temp_of(body: &str) -> i64 {
    body.trim_end_matches(" mC").parse().unwrap()
}

/// Boot deploy, GET, PUT update, GET on one device. Returns the two bodies.
fn sequence(d: &mut capsule_core::device::Device) -> (String, String) {
    d.preload("vm1", &stamp(SENSOR_V1)).unwrap();
    let mut c = client(d);
    let text = |r: &capsule_core::client::Response| String::from_utf8(r.message.payload.clone()).unwrap();

    let r = c.get("/vm1/sensor1/temp").unwrap();
    assert_eq!(r.code(), code::CONTENT);
    let v1 = text(&r);
    assert!(!v1.ends_with(" mC"), "v1 answers bare milli-degrees: {v1}");
    assert!((temp_of(&v1) - 21_500).abs() <= 100);
    // The answer came from inside the capsule: it logged the reading.
    let log = c.transport().device().host().log_lines();
    assert_eq!(log.last().unwrap(), &("vm1".to_string(), format!("temp={v1}")));

    // A failed update leaves v1 serving.
    assert_eq!(c.put("/vm-control/vm1", &stamp(INIT_FAILS)).unwrap().code(), code::INTERNAL_SERVER_ERROR);
    assert_eq!(text(&c.get("/vm1/version").unwrap()), "1");

    let r = c.put("/vm-control/vm1", &stamp(SENSOR_V2)).unwrap();
    assert_eq!((r.code(), text(&r)), (code::CHANGED, "vm1,2".into()));
    assert_eq!(c.transport().device().manager().get("vm1").unwrap().version, 2);

    let r = c.get("/vm1/sensor1/temp").unwrap();
    assert_eq!(r.code(), code::CONTENT);
    let v2 = text(&r);
    assert!(v2.ends_with(" mC"), "v2 format: {v2}");
    assert!((temp_of(&v2) - 21_500).abs() <= 100);
    (v1, v2)
}

pub fn check() -> String {
    let start = Instant::now();
    let mut d = capsule_core::device::Device::new(device_config(1));
    let (v1, v2) = sequence(&mut d);

    // The same sequence on every device of a fleet, both execution paths.
    let mut fleets = Vec::new();
    for exec in [Execution::Sequential, Execution::Parallel] {
        let mut f = Fleet::new((1..=4).map(device_config), exec);
        let results = std::sync::Mutex::new(Vec::new());
        f.for_each(|d| {
            let id = d.id();
            let r = sequence(d);
            results.lock().unwrap().push((id, r));
        });
        let mut r = results.into_inner().unwrap();
        r.sort();
        fleets.push(r);
    }
    assert_eq!(fleets[0], fleets[1]);
    assert_eq!(fleets[0].len(), 4);

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "took {secs:.2} s");
    format!("v1 answered {v1:?}, update 2.04 to version 2, v2 answered {v2:?}; 1 + 2x4 fleet devices in {secs:.3} s (limit 5 s)")
}
