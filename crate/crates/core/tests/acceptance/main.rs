//! Acceptance suite: one line per criterion, non-zero exit if any fails.

#[path = "../common/mod.rs"]
mod common;

mod accounting;
mod bench;
mod cinematic;
mod coap;
mod containment;
mod fuel;
mod oracle;
mod pages;
mod security;

use std::panic;
use std::time::Instant;

type Criterion = (&'static str, fn() -> String);

const CRITERIA: [Criterion; 9] = [
    ("interpreter oracle suite", oracle::check),
    ("fuel determinism and monotonicity", fuel::check),
    ("custom page size", pages::check),
    ("coap codec", coap::check),
    ("security", security::check),
    ("cinematic integration", cinematic::check),
    ("resource accounting", accounting::check),
    ("bench statistics", bench::check),
    ("crash containment", containment::check),
];

fn main() {
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(check);
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.2} s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL [{}] {name} ({secs:.2} s): {msg}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
