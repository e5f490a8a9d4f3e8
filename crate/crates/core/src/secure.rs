//! Authenticated envelope with replay protection, and gatekeeper stamps.
//!
//! Envelope layout (little-endian integers):
//!
//! | bytes | field |
//! |-------|-------|
//! | 2     | magic `"TV"` |
//! | 4     | sender id |
//! | 8     | sequence number |
//! | n     | body (an encoded CoAP message) |
//! | 16    | tag = MAC(key, sender ‖ seq ‖ body) |
//!
//! Stamp layout: `len: u32 LE | wasm bytes | tag = MAC(gatekeeper key, wasm bytes)`.
//!
//! The MAC is HMAC-SHA256 truncated to its leftmost 16 bytes.

use std::collections::HashMap;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

pub const KEY_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
pub const MAGIC: [u8; 2] = *b"TV";
pub const HEADER_LEN: usize = 2 + 4 + 8;
pub const WINDOW_SIZE: u64 = 64;

pub type Key = [u8; KEY_LEN];

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SecureError {
    #[error("bad envelope magic")]
    BadMagic,
    #[error("envelope truncated")]
    Truncated,
    #[error("authentication tag mismatch")]
    BadTag,
    #[error("sequence number replayed or too old")]
    Replayed,
}

fn hmac(key: &[u8], parts: &[&[u8]]) -> HmacSha256 {
    let mut m = <HmacSha256 as KeyInit>::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        m.update(p);
    }
    m
}

/// Truncated HMAC-SHA256 tag over the concatenation of `parts`.
pub fn mac(key: &[u8], parts: &[&[u8]]) -> [u8; TAG_LEN] {
    let full = hmac(key, parts).finalize().into_bytes();
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&full[..TAG_LEN]);
    tag
}

/// Constant-time tag check.
pub fn verify_mac(key: &[u8], parts: &[&[u8]], tag: &[u8]) -> bool {
    tag.len() == TAG_LEN && hmac(key, parts).verify_truncated_left(tag).is_ok()
}

pub fn seal(key: &Key, sender: u32, seq: u64, body: &[u8]) -> Vec<u8> {
    let sender_b = sender.to_le_bytes();
    let seq_b = seq.to_le_bytes();
    let tag = mac(key, &[&sender_b, &seq_b, body]);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + TAG_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&sender_b);
    out.extend_from_slice(&seq_b);
    out.extend_from_slice(body);
    out.extend_from_slice(&tag);
    out
}

/// Unauthenticated view of an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope<'a> {
    pub sender: u32,
    pub seq: u64,
    pub body: &'a [u8],
    pub tag: &'a [u8],
}

impl<'a> Envelope<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self, SecureError> {
        if bytes.len() >= 2 && bytes[..2] != MAGIC {
            return Err(SecureError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(SecureError::Truncated);
        }
        let sender = u32::from_le_bytes(bytes[2..6].try_into().unwrap());
        let seq = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let split = bytes.len() - TAG_LEN;
        Ok(Self {
            sender,
            seq,
            body: &bytes[HEADER_LEN..split],
            tag: &bytes[split..],
        })
    }

    pub fn verify(&self, key: &Key) -> bool {
        verify_mac(
            key,
            &[&self.sender.to_le_bytes(), &self.seq.to_le_bytes(), self.body],
            self.tag,
        )
    }
}

/// Sliding anti-replay window over the last 64 sequence numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayWindow {
    highest: Option<u64>,
    /// Bit `i` set means `highest - i` was accepted.
    bitmap: u64,
}

impl ReplayWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn highest(&self) -> Option<u64> {
        self.highest
    }

    /// Would `seq` be accepted? Does not modify the window.
    pub fn check(&self, seq: u64) -> Result<(), SecureError> {
        let Some(h) = self.highest else {
            return Ok(());
        };
        if seq > h {
            return Ok(());
        }
        let age = h - seq;
        if age >= WINDOW_SIZE || self.bitmap & (1 << age) != 0 {
            return Err(SecureError::Replayed);
        }
        Ok(())
    }

    /// Record `seq` as accepted. Call only after `check` and authentication.
    pub fn commit(&mut self, seq: u64) {
        match self.highest {
            None => {
                self.highest = Some(seq);
                self.bitmap = 1;
            }
            Some(h) if seq > h => {
                let shift = seq - h;
                self.bitmap = if shift >= WINDOW_SIZE { 0 } else { self.bitmap << shift };
                self.bitmap |= 1;
                self.highest = Some(seq);
            }
            Some(h) => {
                let age = h - seq;
                if age < WINDOW_SIZE {
                    self.bitmap |= 1 << age;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Opened {
    pub sender: u32,
    pub seq: u64,
    pub body: Vec<u8>,
}

/// Verify magic, tag and replay window, then advance the window.
pub fn open(key: &Key, window: &mut ReplayWindow, bytes: &[u8]) -> Result<Opened, SecureError> {
    let env = Envelope::parse(bytes)?;
    if !env.verify(key) {
        return Err(SecureError::BadTag);
    }
    window.check(env.seq)?;
    window.commit(env.seq);
    Ok(Opened {
        sender: env.sender,
        seq: env.seq,
        body: env.body.to_vec(),
    })
}

/// One replay window per sender id.
#[derive(Debug, Clone, Default)]
pub struct ReplayWindows {
    windows: HashMap<u32, ReplayWindow>,
}

impl ReplayWindows {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, key: &Key, bytes: &[u8]) -> Result<Opened, SecureError> {
        let env = Envelope::parse(bytes)?;
        if !env.verify(key) {
            return Err(SecureError::BadTag);
        }
        let w = self.windows.entry(env.sender).or_default();
        w.check(env.seq)?;
        w.commit(env.seq);
        Ok(Opened {
            sender: env.sender,
            seq: env.seq,
            body: env.body.to_vec(),
        })
    }

    pub fn get(&self, sender: u32) -> Option<&ReplayWindow> {
        self.windows.get(&sender)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StampError {
    #[error("gatekeeper refused: {0}")]
    ValidationFailed(#[from] capsule_wasm::LoadError),
    #[error("capsule package malformed")]
    Malformed,
    #[error("capsule stamp does not verify")]
    BadStamp,
    #[error("capsule is not stamped")]
    Unstamped,
}

/// Validate bytecode and wrap it in a stamped package.
pub fn gate_stamp(gate_key: &Key, wasm: &[u8]) -> Result<Vec<u8>, StampError> {
    capsule_wasm::load(wasm)?;
    Ok(stamp_unchecked(gate_key, wasm))
}

/// Stamp without validating. Only for building adversarial test inputs.
pub fn stamp_unchecked(gate_key: &Key, wasm: &[u8]) -> Vec<u8> {
    let tag = mac(gate_key, &[wasm]);
    let mut out = Vec::with_capacity(4 + wasm.len() + TAG_LEN);
    out.extend_from_slice(&(wasm.len() as u32).to_le_bytes());
    out.extend_from_slice(wasm);
    out.extend_from_slice(&tag);
    out
}

/// Split a stamped package off the front of `bytes`: `(package, rest)`.
/// Raw bytecode (leading `\0asm`) is reported as [`StampError::Unstamped`].
pub fn split_package(bytes: &[u8]) -> Result<(&[u8], &[u8]), StampError> {
    if bytes.starts_with(b"\0asm") {
        return Err(StampError::Unstamped);
    }
    if bytes.len() < 4 {
        return Err(StampError::Malformed);
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let total = 4usize
        .checked_add(len)
        .and_then(|n| n.checked_add(TAG_LEN))
        .ok_or(StampError::Malformed)?;
    if bytes.len() < total {
        return Err(StampError::Malformed);
    }
    Ok(bytes.split_at(total))
}

/// Check a package and return the bytecode inside it.
pub fn verify_stamp<'a>(gate_key: &Key, package: &'a [u8]) -> Result<&'a [u8], StampError> {
    let (pkg, rest) = split_package(package)?;
    if !rest.is_empty() {
        return Err(StampError::Malformed);
    }
    let wasm = &pkg[4..pkg.len() - TAG_LEN];
    if !verify_mac(gate_key, &[wasm], &pkg[pkg.len() - TAG_LEN..]) {
        return Err(StampError::BadStamp);
    }
    Ok(wasm)
}

pub fn parse_key(hex_str: &str) -> Result<Key, String> {
    let bytes = hex::decode(hex_str.trim()).map_err(|e| format!("key is not hex: {e}"))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| format!("key must be {KEY_LEN} bytes, got {}", b.len()))
}
