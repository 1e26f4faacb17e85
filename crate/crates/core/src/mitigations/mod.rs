//! The four anti-forking archetypes, each a wrapper or ledger contract that
//! composes with any [`Program`](crate::enclave::Program).

pub mod ephemeral;
pub mod fixed_client;
pub mod serialization;
pub mod stateless;

pub use ephemeral::{ephemeral_register, ephemeral_wrap, EphemeralIdPolicy, EphemeralRegistry, RegistryLocation, SupersedeAuth};
pub use fixed_client::{fixed_client_wrap, ClientGroup, FixedClientPolicy, SignedInput};
pub use serialization::{
    client_verify, replay_recover, serve_check, state_commit, ClientVerdict, SerializationOption, SerializationPolicy,
    StateCommit, StateCommitValidator, TimestampVariant, TimestampedResponse,
};
pub use stateless::{stateless_wrap, StatelessWrap};
