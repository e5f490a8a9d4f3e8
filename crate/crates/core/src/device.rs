//! The virtual device: envelope, CoAP, routing and the `/vm-control` verbs.
//!
//! | request | success | failures |
//! |---------|---------|----------|
//! | `PUT /vm-control/<prefix>` (package) | 2.01 deploy, 2.04 update | 4.00, 4.01, 4.13, 5.00 |
//! | `POST /vm-control/run` (package ‖ input) | 2.05 + output | 4.00, 4.01, 4.13, 5.00 |
//! | `DELETE /vm-control/<prefix>` | 2.02 | 4.04 |
//! | `GET /vm-control` | 2.05 + `id,version,kind,ram_estimate` lines | |
//! | `GET /.well-known/core` | 2.05 + link list | |
//! | `<method> /<prefix>/<sub-path>` | capsule's code | 4.04, 5.00 |
//!
//! Envelopes that fail the tag or replay check get a 4.01 when their body
//! still decodes; anything that cannot be attributed is dropped.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsule::{CapsuleError, CapsuleInfo, CapsuleManager, CapsuleRequest, ManagerConfig};
use crate::coap::{code, decode, uri_path, CoapMessage, MessageType};
use crate::host::{HostState, SensorSimConfig};
use crate::secure::{
    parse_key, seal, split_package, verify_stamp, Envelope, Key, ReplayWindows, SecureError,
    StampError,
};

pub const CONTROL: &str = "vm-control";
pub const CONTENT_FORMAT_LINK: u32 = 40;
const DEDUP_CAPACITY: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreloadEntry {
    pub prefix: String,
    /// Path to a stamped package.
    pub package: String,
}

/// On-disk TOML form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDeviceConfig {
    device_id: u32,
    #[serde(default = "default_listen")]
    listen: String,
    psk: String,
    gatekeeper_key: String,
    #[serde(default)]
    rng_seed: u64,
    #[serde(default = "default_log_capacity")]
    log_capacity: usize,
    #[serde(default)]
    limits: ManagerConfig,
    #[serde(default)]
    sim: SensorSimConfig,
    #[serde(default)]
    preload: Vec<PreloadEntry>,
}

fn default_listen() -> String {
    "127.0.0.1:5683".into()
}

fn default_log_capacity() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceConfig {
    pub device_id: u32,
    pub listen: String,
    pub psk: Key,
    pub gatekeeper_key: Key,
    pub rng_seed: u64,
    pub log_capacity: usize,
    pub limits: ManagerConfig,
    pub sim: SensorSimConfig,
    pub preload: Vec<PreloadEntry>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl DeviceConfig {
    pub fn new(device_id: u32, psk: Key, gatekeeper_key: Key) -> Self {
        Self {
            device_id,
            listen: default_listen(),
            psk,
            gatekeeper_key,
            rng_seed: 0,
            log_capacity: default_log_capacity(),
            limits: ManagerConfig::default(),
            sim: SensorSimConfig::default(),
            preload: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawDeviceConfig = toml::from_str(text)?;
        let cfg = Self {
            device_id: raw.device_id,
            listen: raw.listen,
            psk: parse_key(&raw.psk).map_err(|e| ConfigError::Invalid(format!("psk: {e}")))?,
            gatekeeper_key: parse_key(&raw.gatekeeper_key)
                .map_err(|e| ConfigError::Invalid(format!("gatekeeper_key: {e}")))?,
            rng_seed: raw.rng_seed,
            log_capacity: raw.log_capacity,
            limits: raw.limits,
            sim: raw.sim,
            preload: raw.preload,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let raw = RawDeviceConfig {
            device_id: self.device_id,
            listen: self.listen.clone(),
            psk: hex::encode(self.psk),
            gatekeeper_key: hex::encode(self.gatekeeper_key),
            rng_seed: self.rng_seed,
            log_capacity: self.log_capacity,
            limits: self.limits.clone(),
            sim: self.sim.clone(),
            preload: self.preload.clone(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let l = &self.limits;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if l.ram_budget == 0 || l.flash_budget == 0 {
            return bad("budgets must be positive");
        }
        if !l.page_size.is_power_of_two() || !(256..=65536).contains(&l.page_size) {
            return bad("page_size must be a power of two between 256 and 65536");
        }
        if l.call_depth == 0 {
            return bad("call_depth must be positive");
        }
        self.sim.validate().map_err(ConfigError::Invalid)
    }
}

/// Where a request path lands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    Control(Vec<String>),
    WellKnownCore,
    Capsule { prefix: String, sub_path: String },
    NotFound,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub received: u64,
    pub dropped: u64,
    pub unauthorized: u64,
    pub responses: u64,
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Stamp(#[from] StampError),
    #[error(transparent)]
    Capsule(#[from] CapsuleError),
}

impl ControlError {
    pub fn code(&self) -> u8 {
        match self {
            ControlError::Stamp(StampError::BadStamp | StampError::Unstamped) => code::UNAUTHORIZED,
            ControlError::Stamp(_) => code::BAD_REQUEST,
            ControlError::Capsule(e) => capsule_error_code(e),
        }
    }
}

pub fn capsule_error_code(e: &CapsuleError) -> u8 {
    match e {
        CapsuleError::InvalidPrefix(_)
        | CapsuleError::PrefixTaken(_)
        | CapsuleError::ValidationFailed(_)
        | CapsuleError::MissingExport(_)
        | CapsuleError::LinkFailed(_) => code::BAD_REQUEST,
        CapsuleError::BudgetExceeded { .. } => code::REQUEST_ENTITY_TOO_LARGE,
        CapsuleError::CapsuleNotFound(_) => code::NOT_FOUND,
        CapsuleError::InitFailed(_)
        | CapsuleError::Trapped(_)
        | CapsuleError::OutOfFuel { .. }
        | CapsuleError::Host(_) => code::INTERNAL_SERVER_ERROR,
    }
}

type DedupKey = (u32, u16, Vec<u8>);

pub struct Device {
    config: DeviceConfig,
    manager: CapsuleManager,
    windows: ReplayWindows,
    next_seq: u64,
    next_mid: u16,
    /// Responses to recent CON requests, replayed on retransmission.
    dedup: VecDeque<(DedupKey, CoapMessage)>,
    stats: DeviceStats,
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("device_id", &self.config.device_id)
            .field("manager", &self.manager)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl Device {
    pub fn new(config: DeviceConfig) -> Self {
        let host = HostState::new(config.rng_seed, config.sim.clone(), config.log_capacity);
        Self {
            manager: CapsuleManager::new(config.limits.clone(), host),
            config,
            windows: ReplayWindows::new(),
            next_seq: 0,
            next_mid: 0,
            dedup: VecDeque::new(),
            stats: DeviceStats::default(),
        }
    }

    pub fn id(&self) -> u32 {
        self.config.device_id
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn manager(&self) -> &CapsuleManager {
        &self.manager
    }

    pub fn manager_mut(&mut self) -> &mut CapsuleManager {
        &mut self.manager
    }

    pub fn host(&self) -> &HostState {
        self.manager.host()
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    /// Host-side clock step.
    pub fn advance_clock(&mut self, ms: u64) {
        self.manager.host_mut().advance(ms);
    }

    /// Deploy a stamped package at boot, bypassing the network.
    pub fn preload(&mut self, prefix: &str, package: &[u8]) -> Result<CapsuleInfo, ControlError> {
        let wasm = verify_stamp(&self.config.gatekeeper_key, package)?;
        Ok(self.manager.deploy_persistent(wasm, prefix)?)
    }

    /// Deploy every `preload` entry from the config, resolving package
    /// paths against `base`.
    pub fn preload_from_config(&mut self, base: &Path) -> Result<Vec<CapsuleInfo>, String> {
        let entries = self.config.preload.clone();
        entries
            .iter()
            .map(|e| {
                let p = base.join(&e.package);
                let bytes = std::fs::read(&p).map_err(|err| format!("{}: {err}", p.display()))?;
                self.preload(&e.prefix, &bytes).map_err(|err| format!("{}: {err}", e.prefix))
            })
            .collect()
    }

    pub fn route(&self, segments: &[String]) -> Route {
        match segments {
            [] => Route::NotFound,
            [first, rest @ ..] if first == CONTROL => Route::Control(rest.to_vec()),
            [a, b] if a == ".well-known" && b == "core" => Route::WellKnownCore,
            [first, rest @ ..] if self.manager.get(first).is_some() => Route::Capsule {
                prefix: first.clone(),
                sub_path: rest.join("/"),
            },
            _ => Route::NotFound,
        }
    }

    fn seal_reply(&mut self, msg: &CoapMessage) -> Option<Vec<u8>> {
        let body = msg.encode().ok()?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.responses += 1;
        Some(seal(&self.config.psk, self.config.device_id, seq, &body))
    }

    fn reply_to(&mut self, req_type: MessageType, mid: u16, token: &[u8], code: u8, payload: Vec<u8>) -> CoapMessage {
        let (mtype, mid) = match req_type {
            MessageType::Con => (MessageType::Ack, mid),
            _ => {
                self.next_mid = self.next_mid.wrapping_add(1);
                (MessageType::Non, self.next_mid)
            }
        };
        CoapMessage::new(mtype, code, mid)
            .with_token(token)
            .with_payload(payload)
    }

    /// One inbound datagram in, at most one sealed datagram out.
    pub fn handle_datagram(&mut self, bytes: &[u8]) -> Option<Vec<u8>> {
        self.stats.received += 1;
        let opened = match self.windows.open(&self.config.psk, bytes) {
            Ok(o) => o,
            Err(SecureError::BadTag | SecureError::Replayed) => {
                self.stats.unauthorized += 1;
                let env = Envelope::parse(bytes).ok()?;
                let Ok(req) = decode(env.body) else {
                    self.stats.dropped += 1;
                    return None;
                };
                if !matches!(req.mtype, MessageType::Con | MessageType::Non) {
                    self.stats.dropped += 1;
                    return None;
                }
                let reply = self.reply_to(req.mtype, req.message_id, &req.token, code::UNAUTHORIZED, Vec::new());
                return self.seal_reply(&reply);
            }
            Err(_) => {
                self.stats.dropped += 1;
                return None;
            }
        };
        let reply = match decode(&opened.body) {
            Ok(msg) => self.handle_message(opened.sender, &msg),
            Err(e) => {
                // Salvage the header so the sender can match the 4.00.
                let b = &opened.body;
                if b.len() < 4 {
                    self.stats.dropped += 1;
                    return None;
                }
                let mtype = if (b[0] >> 4) & 3 == 0 { MessageType::Con } else { MessageType::Non };
                let mid = u16::from_be_bytes([b[2], b[3]]);
                Some(self.reply_to(mtype, mid, &[], code::BAD_REQUEST, e.to_string().into_bytes()))
            }
        };
        match reply {
            Some(r) => self.seal_reply(&r),
            None => {
                self.stats.dropped += 1;
                None
            }
        }
    }

    /// The unauthenticated inner layer: one decoded CoAP message.
    pub fn handle_message(&mut self, sender: u32, msg: &CoapMessage) -> Option<CoapMessage> {
        match msg.mtype {
            MessageType::Ack | MessageType::Rst => return None,
            MessageType::Con | MessageType::Non => {}
        }
        if msg.code == code::EMPTY {
            // CoAP ping.
            return (msg.mtype == MessageType::Con)
                .then(|| CoapMessage::new(MessageType::Rst, code::EMPTY, msg.message_id));
        }
        let key = (sender, msg.message_id, msg.token.clone());
        if msg.mtype == MessageType::Con {
            if let Some((_, cached)) = self.dedup.iter().find(|(k, _)| *k == key) {
                return Some(cached.clone());
            }
        }
        let (code, payload, cf) = if code::is_request(msg.code) && msg.code <= code::DELETE {
            self.dispatch(msg)
        } else {
            (code::METHOD_NOT_ALLOWED, Vec::new(), None)
        };
        let mut reply = self.reply_to(msg.mtype, msg.message_id, &msg.token, code, payload);
        if let Some(cf) = cf {
            reply.set_content_format(cf);
        }
        if msg.mtype == MessageType::Con {
            if self.dedup.len() >= DEDUP_CAPACITY {
                self.dedup.pop_front();
            }
            self.dedup.push_back((key, reply.clone()));
        }
        Some(reply)
    }

    fn dispatch(&mut self, msg: &CoapMessage) -> (u8, Vec<u8>, Option<u32>) {
        let segments = match uri_path(msg) {
            Ok(s) => s,
            Err(e) => return (code::BAD_REQUEST, e.to_string().into_bytes(), None),
        };
        match self.route(&segments) {
            Route::NotFound => (code::NOT_FOUND, Vec::new(), None),
            Route::WellKnownCore => {
                if msg.code != code::GET {
                    return (code::METHOD_NOT_ALLOWED, Vec::new(), None);
                }
                let mut links = vec![format!("</{CONTROL}>")];
                links.extend(self.manager.prefixes().map(|p| format!("</{p}>")));
                (code::CONTENT, links.join(",").into_bytes(), Some(CONTENT_FORMAT_LINK))
            }
            Route::Control(rest) => {
                let (c, p) = self.control(msg.code, &rest, &msg.payload);
                (c, p, None)
            }
            Route::Capsule { prefix, sub_path } => {
                let req = CapsuleRequest::new(msg.code, sub_path, msg.payload.clone());
                match self.manager.handle_request(&prefix, &req) {
                    Ok(h) => (h.response.code, h.response.payload, None),
                    Err(e) => (capsule_error_code(&e), e.to_string().into_bytes(), None),
                }
            }
        }
    }

    /// `/vm-control` verbs. Returns the response code and payload.
    pub fn control(&mut self, method: u8, rest: &[String], payload: &[u8]) -> (u8, Vec<u8>) {
        let result: Result<(u8, Vec<u8>), ControlError> = match (method, rest) {
            (code::GET, []) => {
                let mut out = String::new();
                for c in self.manager.list() {
                    out.push_str(&format!("{},{},{},{}\n", c.id, c.version, c.kind, c.ram_estimate));
                }
                Ok((code::CONTENT, out.into_bytes()))
            }
            (code::PUT, [prefix]) => self.put_capsule(prefix, payload),
            (code::POST, [verb]) if verb == "run" => self.run_package(payload),
            (code::DELETE, [prefix]) => self
                .manager
                .terminate(prefix)
                .map(|_| (code::DELETED, Vec::new()))
                .map_err(Into::into),
            (_, []) => return (code::METHOD_NOT_ALLOWED, Vec::new()),
            (_, [_]) => return (code::METHOD_NOT_ALLOWED, Vec::new()),
            _ => return (code::NOT_FOUND, Vec::new()),
        };
        result.unwrap_or_else(|e| (e.code(), e.to_string().into_bytes()))
    }

    fn put_capsule(&mut self, prefix: &str, package: &[u8]) -> Result<(u8, Vec<u8>), ControlError> {
        let wasm = verify_stamp(&self.config.gatekeeper_key, package)?;
        let (code, info) = if self.manager.get(prefix).is_some() {
            (code::CHANGED, self.manager.update_capsule(prefix, wasm)?)
        } else {
            (code::CREATED, self.manager.deploy_persistent(wasm, prefix)?)
        };
        Ok((code, format!("{},{}", info.id, info.version).into_bytes()))
    }

    fn run_package(&mut self, payload: &[u8]) -> Result<(u8, Vec<u8>), ControlError> {
        let (package, input) = split_package(payload)?;
        let wasm = verify_stamp(&self.config.gatekeeper_key, package)?;
        let fuel = self.manager.config().ephemeral_fuel;
        let out = self.manager.run_ephemeral(wasm, input, fuel)?;
        Ok((code::CONTENT, out.output))
    }
}
