//! Deterministic discrete-event simulator for forking attacks (rollback and
//! cloning) on TEE-backed blockchains, together with the four anti-forking
//! mitigation archetypes and a set of case-study protocols.

pub mod crypto;
pub mod enclave;
pub mod host;
pub mod ledger;
pub mod mitigations;
pub mod protocols;
pub mod scenarios;
pub mod stats;
pub mod value;
