use capsule_core::coap::{code, CoapMessage, MessageType};
use capsule_core::parallel::Execution;
use capsule_core::secure::{gate_stamp, open, seal, ReplayWindow, ReplayWindows, SecureError};
use capsule_corpus::{COUNTER, SENSOR_V1};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{client, device, stamp, OPERATOR, PSK};

const FUZZ: u64 = 1 << 20;

fn replay() -> usize {
    let body = CoapMessage::request(MessageType::Con, code::GET, 1, "/x").encode().unwrap();
    let mut order: Vec<u64> = (0..2000).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Shuffle within blocks so every seq stays inside the window when first seen.
    for block in order.chunks_mut(32) {
        for i in (1..block.len()).rev() {
            block.swap(i, rng.next_u32() as usize % (i + 1));
        }
    }
    let envs: Vec<Vec<u8>> = order.iter().map(|&s| seal(&PSK, OPERATOR, s, &body)).collect();
    let mut w = ReplayWindows::new();
    for e in &envs {
        w.open(&PSK, e).unwrap();
    }
    for e in &envs {
        assert_eq!(w.open(&PSK, e).unwrap_err(), SecureError::Replayed);
    }

    let mut d = device(1);
    let dg = seal(&PSK, OPERATOR, 0, &body);
    assert!(d.handle_datagram(&dg).is_some());
    let again = d.handle_datagram(&dg).unwrap();
    let env = capsule_core::secure::Envelope::parse(&again).unwrap();
    assert_eq!(CoapMessage::decode(env.body).unwrap().code, code::UNAUTHORIZED);
    envs.len()
}

/// Mutate `base` deterministically from `i`: bit flips, byte overwrites,
/// truncation, extension, or header field changes.
fn mutate(base: &[u8], i: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(i);
    let mut b = base.to_vec();
    match i % 5 {
        0 => {
            for _ in 0..1 + rng.next_u32() % 8 {
                let bit = rng.next_u32() as usize % (b.len() * 8);
                b[bit / 8] ^= 1 << (bit % 8);
            }
        }
        1 => {
            for _ in 0..1 + rng.next_u32() % 4 {
                let at = rng.next_u32() as usize % b.len();
                b[at] = rng.next_u32() as u8;
            }
        }
        2 => b.truncate(rng.next_u32() as usize % b.len()),
        3 => {
            let extra = 1 + rng.next_u32() as usize % 16;
            b.extend((0..extra).map(|_| rng.next_u32() as u8));
        }
        _ => {
            // Re-target sender or seq without a new tag.
            let field = if rng.next_u32() % 2 == 0 { 2..6 } else { 6..14 };
            for x in &mut b[field] {
                *x = rng.next_u32() as u8;
            }
        }
    }
    b
}

fn fuzz() -> u64 {
    let body = CoapMessage::request(MessageType::Con, code::PUT, 9, "/vm-control/vm1")
        .with_payload(vec![0xAB; 40])
        .encode()
        .unwrap();
    let base = seal(&PSK, OPERATOR, 1000, &body);
    let forgeries = Execution::Parallel.count_range(0..FUZZ, |i| {
        let m = mutate(&base, i);
        m != base && open(&PSK, &mut ReplayWindow::new(), &m).is_ok()
    });
    assert_eq!(forgeries, 0, "{forgeries} mutated envelopes verified");
    FUZZ
}

fn uploads() {
    let mut d = device(1);
    let mut c = client(&mut d);
    assert_eq!(c.put("/vm-control/vm1", SENSOR_V1).unwrap().code(), code::UNAUTHORIZED, "unstamped");
    let wrong = gate_stamp(&[0x55; 16], SENSOR_V1).unwrap();
    assert_eq!(c.put("/vm-control/vm1", &wrong).unwrap().code(), code::UNAUTHORIZED, "wrong key");
    let mut run = wrong.clone();
    run.extend_from_slice(b"1");
    assert_eq!(c.post("/vm-control/run", &run).unwrap().code(), code::UNAUTHORIZED, "wrong key run");
    assert!(c.transport().device().manager().list().is_empty());
    assert_eq!(c.put("/vm-control/vm1", &stamp(SENSOR_V1)).unwrap().code(), code::CREATED);
    assert_eq!(c.put("/vm-control/c", &stamp(COUNTER)).unwrap().code(), code::CREATED);
    assert_eq!(c.transport().device().manager().list().len(), 2);
}

pub fn check() -> String {
    let replays = replay();
    let n = fuzz();
    uploads();
    format!(
        "{replays} accepted envelopes all rejected on replay (device answers 4.01); \
         {n} mutated envelopes, 0 forgeries; unstamped and wrong-key uploads 4.01, stamped 2.01"
    )
}
