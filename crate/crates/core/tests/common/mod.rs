#![allow(dead_code)]

use std::time::Duration;

use capsule_core::client::{Client, ClientConfig, SeqStore};
use capsule_core::device::{Device, DeviceConfig};
use capsule_core::host::{SensorLabel, SensorSimConfig, SensorSpec, Waveform};
use capsule_core::secure::{gate_stamp, Key};
use capsule_core::transport::Loopback;

pub const PSK: Key = *b"capsule-psk-0001";
pub const GATE: Key = *b"gatekeeper-key-1";
pub const OPERATOR: u32 = 0xC0FF_EE00;

pub fn temperature(waveform: Waveform) -> SensorSimConfig {
    SensorSimConfig {
        latency_ms: 10,
        sensors: vec![SensorSpec {
            name: "t0".into(),
            label: SensorLabel::Temperature,
            waveform,
        }],
    }
}

pub fn device_config(id: u32) -> DeviceConfig {
    let mut c = DeviceConfig::new(id, PSK, GATE);
    c.rng_seed = 42;
    c.sim = temperature(Waveform::Constant { value: 21.5 });
    c
}

pub fn device(id: u32) -> Device {
    Device::new(device_config(id))
}

pub fn stamp(wasm: &[u8]) -> Vec<u8> {
    gate_stamp(&GATE, wasm).expect("corpus capsules validate")
}

pub fn client(device: &mut Device) -> Client<Loopback<'_>> {
    let mut cfg = ClientConfig::new("loopback", OPERATOR, PSK);
    cfg.device_id = Some(device.id());
    cfg.timeout = Duration::from_millis(1);
    Client::with_seq(cfg, Loopback::new(device), SeqStore::in_memory(0))
}

/// `package ‖ input`, the POST /vm-control/run payload.
pub fn run_payload(wasm: &[u8], input: &[u8]) -> Vec<u8> {
    let mut p = stamp(wasm);
    p.extend_from_slice(input);
    p
}

pub type LoopClient<'a> = Client<Loopback<'a>>;
