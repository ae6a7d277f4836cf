//! Stateful network-function chains over an externalized state store.
//!
//! The crate provides the store ([`store`]), the NF-side client library
//! ([`client`]), scope-aware partitioning ([`partition`]), the chain runtime
//! pieces ([`runtime`]), the reference NFs ([`nfs`]), the handover, clone and
//! recovery protocols run inside a deterministic discrete-event simulator
//! ([`sim`]), and an ideal-chain oracle with an output-equivalence checker
//! ([`oracle`]).

pub mod model;
pub mod store;
pub mod client;
pub mod partition;
pub mod nfs;
pub mod runtime;
pub mod trace;
pub mod report;
pub mod dynamics;
pub mod sim;
pub mod oracle;
pub mod scenario;
pub mod verify;
