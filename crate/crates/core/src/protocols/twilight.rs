//! Twilight-style payment channel: stateless enclaves whose per-launch
//! ephemeral keys are bound to the channel on the ledger. Payments are
//! encrypted to the recipient's registered key, so only the registered
//! instance can claim them.

use std::sync::Arc;

use crate::crypto::PublicKey;
use crate::enclave::{EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault, ProgramFlags, Persistence};
use crate::host::{AttackKind, Evidence, Simulation};
use crate::ledger::ConsensusMode;
use crate::mitigations::ephemeral::{
    encrypt_to, ephemeral_register, ephemeral_wrap, open_envelope, EphemeralRegistry, REGISTER_KIND,
};
use crate::mitigations::{stateless_wrap, SupersedeAuth};
use crate::protocols::{bad_input, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["clones", "amount"];
const AAD: &[u8] = b"twilight-payment";

pub struct ChannelEndpoint;

impl Program for ChannelEndpoint {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("twilight-channel", 1, Value::Unit)
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags { persistence: Persistence::Stateless, deterministic: false, uses_randomness: true, ..ProgramFlags::default() }
    }

    fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        Ok(Value::Unit)
    }

    fn step(&self, _state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        match op(input) {
            "pay" => {
                let to = input
                    .get("to")
                    .and_then(Value::as_bytes)
                    .and_then(|b| b.try_into().ok())
                    .map(PublicKey::from_bytes)
                    .ok_or_else(|| bad_input("pay needs recipient"))?;
                let amount = input.get("amount").and_then(Value::as_u64).ok_or_else(|| bad_input("pay needs amount"))?;
                let mut seed = [0u8; 32];
                for chunk in seed.chunks_mut(8) {
                    chunk.copy_from_slice(&ctx.draw_u64().to_be_bytes());
                }
                Ok(encrypt_to(ctx.crypto(), &seed, &to, AAD, &amount.to_be_bytes()))
            }
            "claim" => {
                let key = ctx.ephemeral().ok_or(ProgramFault::Rejected("no ephemeral key".into()))?;
                let envelope = input.get("payment").ok_or_else(|| bad_input("claim needs payment"))?;
                let pt = open_envelope(ctx.crypto(), key, AAD, envelope)?;
                let amount = u64::from_be_bytes(pt.as_slice().try_into().map_err(|_| ProgramFault::DecryptFail)?);
                Ok(Value::Uint(amount))
            }
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

pub struct Channel {
    pub sim: Simulation,
    pub sender: Handle,
    pub recipient: Handle,
}

pub const SENDER_ROLE: &str = "channel-1:sender";
pub const RECIPIENT_ROLE: &str = "channel-1:recipient";

pub fn open_channel(seed: u64, mode: ConsensusMode) -> Result<Channel, RunError> {
    let mut sim = Simulation::new(seed, mode);
    let program = ephemeral_wrap(stateless_wrap(Arc::new(ChannelEndpoint)).map_err(|e| RunError::Sim(e.to_string()))?);
    let m = sim.world.register_program(program)?;
    sim.ledger
        .register_tx_validator(REGISTER_KIND, Box::new(EphemeralRegistry::new(sim.world.verifier(), SupersedeAuth::Never)))?;
    let s = sim.world.add_platform("sender-host")?;
    let r = sim.world.add_platform("merchant-host")?;
    let sender = sim.launch(&s, m)?;
    let recipient = sim.launch(&r, m)?;
    ephemeral_register(&mut sim, sender, SENDER_ROLE, None)?;
    ephemeral_register(&mut sim, recipient, RECIPIENT_ROLE, None)?;
    sim.next_block();
    Ok(Channel { sim, sender, recipient })
}

/// The sender pays `amount` to whatever key the ledger binds to the
/// recipient role.
pub fn pay(ch: &mut Channel, amount: u64) -> Result<Value, RunError> {
    let to = ch
        .sim
        .ledger
        .validator::<EphemeralRegistry>(REGISTER_KIND)
        .and_then(|r| r.active(RECIPIENT_ROLE))
        .ok_or_else(|| RunError::Sim("recipient not registered".into()))?;
    let input = Value::map([("op", Value::str("pay")), ("to", Value::bytes(to.to_bytes())), ("amount", Value::Uint(amount))]);
    Ok(ch.sim.step(ch.sender, &input)?)
}

/// Delivers `payment` to every instance; returns the claimed amounts and logs
/// each failed decryption.
pub fn claim_everywhere(sim: &mut Simulation, instances: &[Handle], payment: &Value) -> Vec<u64> {
    let input = Value::map([("op", Value::str("claim")), ("payment", payment.clone())]);
    let mut claimed = Vec::new();
    for &h in instances {
        match sim.step(h, &input) {
            Ok(v) => claimed.extend(v.as_u64()),
            Err(_) => sim.evidence(Evidence::DecryptionFailed { instance: h.0 }),
        }
    }
    claimed
}

/// Number of instances that manage to claim one payment when the merchant's
/// host runs `clones` extra copies of the merchant enclave.
pub fn claimers(seed: u64, clones: usize) -> Result<usize, RunError> {
    let mut ch = open_channel(seed, ConsensusMode::permissioned())?;
    let mut instances = vec![ch.recipient];
    for _ in 0..clones {
        instances.push(ch.sim.clone_instance(ch.recipient, None)?);
    }
    let payment = pay(&mut ch, 10)?;
    Ok(claim_everywhere(&mut ch.sim, &instances, &payment).len())
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let amount = ctx.params.u64("amount", 10)?;
    let mut ch = open_channel(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()))?;
    match ctx.attack {
        AttackKind::Cloning => {
            let clones = ctx.params.u64("clones", 1)?.max(1);
            let mut instances = vec![ch.recipient];
            for _ in 0..clones {
                let c = ch.sim.clone_instance(ch.recipient, None)?;
                // The clone's own key cannot take over the bound role.
                if let Err(e) = ephemeral_register(&mut ch.sim, c, RECIPIENT_ROLE, None) {
                    ch.sim.evidence(Evidence::ValidationRejected { reason: e.to_string() });
                }
                instances.push(c);
            }
            let payment = pay(&mut ch, amount)?;
            let claimed = claim_everywhere(&mut ch.sim, &instances, &payment);
            if claimed.len() >= 2 {
                ch.sim.evidence(Evidence::DuplicateAccepted { what: "payment".into(), count: claimed.len() });
            }
        }
        AttackKind::None | AttackKind::Rollback => {
            let payment = pay(&mut ch, amount)?;
            let claimed = claim_everywhere(&mut ch.sim, &[ch.recipient], &payment);
            ch.sim.note(format!("result {claimed:?}"));
        }
    }
    Ok(RunResult::from_sim(ch.sim, ctx.attack))
}
