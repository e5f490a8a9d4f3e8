mod common;

use std::collections::HashSet;

use capsule_core::secure::{
    gate_stamp, open, seal, stamp_unchecked, verify_stamp, Key, ReplayWindow, ReplayWindows, SecureError, StampError,
    WINDOW_SIZE,
};
use common::GATE;
use proptest::prelude::*;

/// Reference model: accept iff never seen and not older than the window.
struct Model {
    highest: Option<u64>,
    seen: HashSet<u64>,
}

impl Model {
    fn accept(&mut self, seq: u64) -> bool {
        let fresh = !self.seen.contains(&seq);
        let in_window = self.highest.is_none_or(|h| seq > h || h - seq < WINDOW_SIZE);
        if fresh && in_window {
            self.seen.insert(seq);
            self.highest = Some(self.highest.map_or(seq, |h| h.max(seq)));
            true
        } else {
            false
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn replay_window_matches_model(
        start in 0u64..1000,
        steps in prop::collection::vec(-80i64..80, 1..200),
    ) {
        let key = [3u8; 16];
        let mut w = ReplayWindow::new();
        let mut model = Model { highest: None, seen: HashSet::new() };
        let mut accepted = HashSet::new();
        let mut seq = start as i64;
        for s in steps {
            seq = (seq + s).max(0);
            let env = seal(&key, 1, seq as u64, b"x");
            let got = open(&key, &mut w, &env).is_ok();
            prop_assert_eq!(got, model.accept(seq as u64), "seq {}", seq);
            if got {
                prop_assert!(accepted.insert(seq), "seq {} accepted twice", seq);
            }
            // Replaying the exact bytes always fails.
            prop_assert_eq!(open(&key, &mut w, &env).unwrap_err(), SecureError::Replayed);
        }
    }

    #[test]
    fn any_single_bit_flip_is_rejected(
        body in prop::collection::vec(any::<u8>(), 0..64),
        seq in any::<u64>(),
        bit in any::<prop::sample::Index>(),
    ) {
        let key = [9u8; 16];
        let env = seal(&key, 77, seq, &body);
        let i = bit.index(env.len() * 8);
        let mut bad = env.clone();
        bad[i / 8] ^= 1 << (i % 8);
        let r = open(&key, &mut ReplayWindow::new(), &bad);
        prop_assert!(matches!(r, Err(SecureError::BadTag | SecureError::BadMagic)), "{:?}", r);
        prop_assert_eq!(open(&key, &mut ReplayWindow::new(), &env).unwrap().body, body);
    }

    #[test]
    fn wrong_key_never_opens(key in any::<[u8; 16]>(), other in any::<[u8; 16]>(), body in prop::collection::vec(any::<u8>(), 0..32)) {
        prop_assume!(key != other);
        let env = seal(&key, 1, 0, &body);
        prop_assert_eq!(open(&other, &mut ReplayWindow::new(), &env).unwrap_err(), SecureError::BadTag);
    }
}

#[test]
fn window_is_per_sender() {
    let key = [1u8; 16];
    let mut ws = ReplayWindows::new();
    assert!(ws.open(&key, &seal(&key, 1, 5, b"")).is_ok());
    assert!(ws.open(&key, &seal(&key, 2, 5, b"")).is_ok());
    assert_eq!(ws.open(&key, &seal(&key, 1, 5, b"")).unwrap_err(), SecureError::Replayed);
    assert_eq!(ws.get(1).unwrap().highest(), Some(5));
    // A forged envelope does not advance the window.
    let mut forged = seal(&key, 1, 1000, b"");
    let n = forged.len();
    forged[n - 1] ^= 1;
    assert_eq!(ws.open(&key, &forged).unwrap_err(), SecureError::BadTag);
    assert_eq!(ws.get(1).unwrap().highest(), Some(5));
}

#[test]
fn truncated_and_bad_magic() {
    let key = [1u8; 16];
    let env = seal(&key, 1, 1, b"abc");
    for n in 0..(2 + 4 + 8 + 16) {
        assert_eq!(open(&key, &mut ReplayWindow::new(), &env[..n]).unwrap_err(), SecureError::Truncated, "len {n}");
    }
    let mut m = env.clone();
    m[0] = b'X';
    assert_eq!(open(&key, &mut ReplayWindow::new(), &m).unwrap_err(), SecureError::BadMagic);
}

#[test]
fn gatekeeper_is_complete_over_the_corpus() {
    for e in capsule_corpus::ENTRIES {
        let pkg = gate_stamp(&GATE, e.wasm).unwrap();
        assert_eq!(verify_stamp(&GATE, &pkg).unwrap(), e.wasm, "{}", e.name);
        let wrong: Key = [0xAA; 16];
        assert_eq!(verify_stamp(&wrong, &pkg).unwrap_err(), StampError::BadStamp);
    }
}

#[test]
fn gatekeeper_refuses_invalid_bytecode() {
    assert!(matches!(gate_stamp(&GATE, b"\0asm\x01\0\0\0\x05"), Err(StampError::ValidationFailed(_))));
    // i32.add on an empty stack.
    let bad = wat::parse_str("(module (func i32.add drop))").unwrap();
    let err = gate_stamp(&GATE, &bad).unwrap_err().to_string();
    assert!(err.contains("func 0") && err.contains("offset"), "{err}");
    // Forcing a stamp does not make it valid for the device's loader.
    let pkg = stamp_unchecked(&GATE, &bad);
    assert_eq!(verify_stamp(&GATE, &pkg).unwrap(), bad.as_slice());
    assert!(capsule_wasm::load(&bad).is_err());
}

#[test]
fn package_framing() {
    let pkg = gate_stamp(&GATE, capsule_corpus::FIB).unwrap();
    assert_eq!(verify_stamp(&GATE, &pkg[..pkg.len() - 1]).unwrap_err(), StampError::Malformed);
    let mut extra = pkg.clone();
    extra.push(0);
    assert_eq!(verify_stamp(&GATE, &extra).unwrap_err(), StampError::Malformed);
    let mut flipped = pkg.clone();
    flipped[10] ^= 0x40;
    assert_eq!(verify_stamp(&GATE, &flipped).unwrap_err(), StampError::BadStamp);
    assert_eq!(verify_stamp(&GATE, &[1, 0]).unwrap_err(), StampError::Malformed);
    assert_eq!(verify_stamp(&GATE, &[0xFF, 0xFF, 0xFF, 0xFF]).unwrap_err(), StampError::Malformed);
}
