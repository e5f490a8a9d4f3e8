//! Virtual constrained devices hosting sandboxed WebAssembly capsules.
//!
//! A [`device::Device`] opens authenticated envelopes ([`secure`]), decodes
//! CoAP ([`coap`]) and routes requests to `/vm-control` or into persistent
//! capsules run by the [`capsule::CapsuleManager`]. Capsules reach the host
//! only through the [`host`] bindings.

pub mod bench;
pub mod capsule;
pub mod client;
pub mod coap;
pub mod device;
pub mod fleet;
pub mod host;
pub mod parallel;
pub mod secure;
pub mod transport;

pub use capsule_wasm as wasm;
