//! A master secret shared by every enrolled enclave of a network, handed over
//! only after the newcomer attests to a member running the same program.
//!
//! Programs embed [`handle_network_op`] in their `step` and keep the network
//! material under the `network` key of their state.

use crate::crypto::{CryptoProvider, Keypair, PublicKey};
use crate::enclave::{report_data, AttestationReport, EnclaveCtx, Handle, ProgramFault};
use crate::host::{Event, Simulation};
use crate::ledger::Tx;
use crate::mitigations::ephemeral::{encrypt_to, open_envelope};
use crate::protocols::{bad_input, op, RunError};
use crate::value::Value;

pub const FEE_KIND: &str = "enroll-fee";
const ENVELOPE_AAD: &[u8] = b"network-enroll";

/// Report data tying an enrollment request to the key the secret goes to.
pub fn enrollment_binding(crypto: &dyn CryptoProvider, pk: &PublicKey) -> [u8; 64] {
    report_data(&crypto.hash(&Value::List(vec![Value::str("enroll"), Value::bytes(pk.to_bytes())]).encode()))
}

pub fn master(state: &Value) -> Option<[u8; 32]> {
    state.get("network")?.get("master")?.as_bytes()?.try_into().ok()
}

pub fn is_enrolled(state: &Value) -> bool {
    master(state).is_some()
}

/// Key pair of contract `id`, derived from the network master.
pub fn contract_keypair(ctx: &EnclaveCtx<'_>, state: &Value, id: &str) -> Result<Keypair, ProgramFault> {
    let m = master(state).ok_or(ProgramFault::NotEnrolled)?;
    Ok(ctx.derive_keypair(&m, id.as_bytes()))
}

fn network_mut(state: &mut Value) -> &mut Value {
    if state.get("network").is_none() {
        state.set("network", Value::map::<&str, _>([]));
    }
    state.get_mut("network").expect("just inserted")
}

/// Whether a successful `op` changed the network material (the caller then
/// seals).
pub fn changes_state(op: &str) -> bool {
    matches!(op, "genesis" | "enroll-request" | "enroll-receive")
}

/// Handles the network ops if `input` is one:
/// `genesis` creates the master, `enroll-request` / `enroll-serve` /
/// `enroll-receive` run the three enrollment legs, and `contract-pk`
/// publishes a contract's public key.
pub fn handle_network_op(
    state: &mut Value,
    input: &Value,
    ctx: &mut EnclaveCtx<'_>,
) -> Option<Result<Value, ProgramFault>> {
    let result = match op(input) {
        "genesis" => genesis(state, ctx),
        "enroll-request" => request(state, ctx),
        "enroll-serve" => serve(state, input, ctx),
        "enroll-receive" => receive(state, input, ctx),
        "contract-pk" => {
            let id = input.get("id").and_then(Value::as_str).unwrap_or_default();
            contract_keypair(ctx, state, id).map(|k| Value::bytes(k.public.to_bytes()))
        }
        _ => return None,
    };
    Some(result)
}

fn genesis(state: &mut Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
    if is_enrolled(state) {
        return Err(ProgramFault::Rejected("network already initialised".into()));
    }
    let mut seed = Vec::with_capacity(32);
    for _ in 0..4 {
        seed.extend_from_slice(&ctx.draw_u64().to_be_bytes());
    }
    network_mut(state).set("master", Value::bytes(seed));
    Ok(Value::Unit)
}

fn request(state: &mut Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&ctx.draw_u64().to_be_bytes());
    }
    let pk = ctx.crypto().keypair_from_seed(&seed).public;
    network_mut(state).set("pending", Value::bytes(seed));
    let report = ctx.attest(enrollment_binding(ctx.crypto(), &pk));
    Ok(Value::map([("pk", Value::bytes(pk.to_bytes())), ("report", report.to_value())]))
}

fn serve(state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
    let m = master(state).ok_or(ProgramFault::NotEnrolled)?;
    let pk = input
        .get("pk")
        .and_then(Value::as_bytes)
        .and_then(|b| b.try_into().ok())
        .map(PublicKey::from_bytes)
        .ok_or_else(|| bad_input("enroll-serve needs pk"))?;
    let report = input.get("report").and_then(AttestationReport::from_value).ok_or_else(|| bad_input("enroll-serve needs report"))?;
    if !ctx.verify_peer(&report) || report.report_data != enrollment_binding(ctx.crypto(), &pk) {
        return Err(ProgramFault::AttestationFailed);
    }
    let mut sender = [0u8; 32];
    for chunk in sender.chunks_mut(8) {
        chunk.copy_from_slice(&ctx.draw_u64().to_be_bytes());
    }
    Ok(encrypt_to(ctx.crypto(), &sender, &pk, ENVELOPE_AAD, &m))
}

fn receive(state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
    let seed: [u8; 32] = state
        .get("network")
        .and_then(|n| n.get("pending"))
        .and_then(Value::as_bytes)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad_input("no enrollment in progress"))?;
    let key = ctx.crypto().keypair_from_seed(&seed);
    let envelope = input.get("envelope").ok_or_else(|| bad_input("enroll-receive needs envelope"))?;
    let m = open_envelope(ctx.crypto(), &key, ENVELOPE_AAD, envelope)?;
    if m.len() != 32 {
        return Err(ProgramFault::DecryptFail);
    }
    let net = network_mut(state);
    net.set("master", Value::bytes(m));
    if let Value::Map(entries) = net {
        entries.remove("pending");
    }
    Ok(Value::Unit)
}

fn simple(op_name: &str) -> Value {
    Value::map([("op", Value::str(op_name))])
}

pub fn genesis_input() -> Value {
    simple("genesis")
}

/// Runs the three enrollment legs between `candidate` and `member`. With a
/// `fee_payer`, one fee transaction is submitted for this enrollment.
pub fn enroll(sim: &mut Simulation, candidate: Handle, member: Handle, fee_payer: Option<&str>) -> Result<(), RunError> {
    let req = sim.step(candidate, &simple("enroll-request"))?;
    let serve_in = Value::map([
        ("op", Value::str("enroll-serve")),
        ("pk", req.get("pk").cloned().unwrap_or_default()),
        ("report", req.get("report").cloned().unwrap_or_default()),
    ]);
    let envelope = sim.step(member, &serve_in)?;
    sim.step(candidate, &Value::map([("op", Value::str("enroll-receive")), ("envelope", envelope)]))?;
    if let Some(payer) = fee_payer {
        sim.submit_tx(Tx::new(FEE_KIND, Value::map([("payer", Value::str(payer))])))?;
    }
    Ok(())
}

/// The public key of contract `id` as published by any enrolled instance.
pub fn contract_public(sim: &mut Simulation, h: Handle, id: &str) -> Result<PublicKey, RunError> {
    let out = sim.step(h, &Value::map([("op", Value::str("contract-pk")), ("id", Value::str(id))]))?;
    out.as_bytes()
        .and_then(|b| b.try_into().ok())
        .map(PublicKey::from_bytes)
        .ok_or_else(|| RunError::Sim("contract-pk returned no key".into()))
}

/// Enrollment fees paid so far.
pub fn fees_paid(sim: &Simulation) -> usize {
    sim.log()
        .entries()
        .iter()
        .filter(|e| matches!(&e.event, Event::TxSubmitted { kind, .. } if kind == FEE_KIND))
        .count()
}
