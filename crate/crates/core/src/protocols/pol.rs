//! Proof of Luck: each round an enclave draws a luck value, sleeps for a
//! period that shrinks with its luck, and then emits an attested proof bound
//! to the head it started on. A platform monotonic counter, bumped at the
//! start and checked at the end, lets only one enclave per platform finish a
//! round.
//!
//! The enclave's sleep relies on a trusted timer: the host schedules the
//! wake-up but cannot shorten it.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::crypto::{CryptoProvider, Digest};
use crate::enclave::{
    report_data, AttestationReport, AttestationVerifier, EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault,
    ProgramFlags,
};
use crate::host::{AttackKind, Event, Evidence, Simulation};
use crate::ledger::{ChainState, ConsensusMode, Tx, TxValidator, ValidationError};
use crate::protocols::{bad_input, digest_field, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["clones", "rounds", "counter"];
pub const KIND: &str = "pol-proof";

/// Sleep before a proof: between half and nine tenths of a block interval,
/// shorter for luckier draws.
pub fn sleep_ms(interval_ms: u64, luck: f64) -> u64 {
    let half = interval_ms as f64 / 2.0;
    (half + (1.0 - luck) * 0.4 * interval_ms as f64).min(interval_ms as f64 * 0.9).max(half) as u64
}

fn proof_binding(crypto: &dyn CryptoProvider, round: u64, head: &Digest, height: u64, luck: f64) -> [u8; 64] {
    let v = Value::List(vec![Value::Uint(round), Value::bytes(head), Value::Uint(height), Value::Uint(luck.to_bits())]);
    report_data(&crypto.hash(&v.encode()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LuckProof {
    pub round: u64,
    pub head: Digest,
    pub height: u64,
    pub luck: f64,
    pub report: AttestationReport,
}

impl LuckProof {
    pub fn to_value(&self) -> Value {
        Value::map([
            ("round", Value::Uint(self.round)),
            ("head", Value::bytes(self.head)),
            ("height", Value::Uint(self.height)),
            ("luck", Value::Uint(self.luck.to_bits())),
            ("report", self.report.to_value()),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        Some(LuckProof {
            round: v.get("round")?.as_u64()?,
            head: digest_field(v, "head")?,
            height: v.get("height")?.as_u64()?,
            luck: f64::from_bits(v.get("luck")?.as_u64()?),
            report: AttestationReport::from_value(v.get("report")?)?,
        })
    }

    pub fn platform(&self) -> &str {
        &self.report.platform_attributes.platform.0
    }
}

pub struct LuckMiner {
    pub interval_ms: u64,
}

impl Program for LuckMiner {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("proof-of-luck", 1, Value::Uint(self.interval_ms))
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags { deterministic: false, uses_randomness: true, ..ProgramFlags::default() }
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let state = Value::map([("pending", Value::Unit)]);
        ctx.seal_state(&state.encode())?;
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        match op(input) {
            "start" => {
                let round = input.get("round").and_then(Value::as_u64).ok_or_else(|| bad_input("start needs round"))?;
                let head = digest_field(input, "head").ok_or_else(|| bad_input("start needs head"))?;
                let height = input.get("height").and_then(Value::as_u64).ok_or_else(|| bad_input("start needs height"))?;
                let counter = ctx.increment_counter()?;
                let luck = ctx.draw_unit();
                let pending = Value::map([
                    ("round", Value::Uint(round)),
                    ("head", Value::bytes(head)),
                    ("height", Value::Uint(height)),
                    ("luck", Value::Uint(luck.to_bits())),
                    ("counter", Value::Uint(counter)),
                ]);
                state.set("pending", pending);
                ctx.seal_state(&state.encode())?;
                Ok(Value::map([("sleep_ms", Value::Uint(sleep_ms(self.interval_ms, luck))), ("counter", Value::Uint(counter))]))
            }
            "finish" => {
                let pending = state.get("pending").cloned().unwrap_or_default();
                let expected = pending.get("counter").and_then(Value::as_u64).ok_or_else(|| bad_input("no round in progress"))?;
                let found = ctx.read_counter()?;
                if found != expected {
                    return Err(ProgramFault::CounterMismatch { expected, found });
                }
                let round = pending.get("round").and_then(Value::as_u64).unwrap_or_default();
                let head = digest_field(&pending, "head").unwrap_or_default();
                let height = pending.get("height").and_then(Value::as_u64).unwrap_or_default();
                let luck = f64::from_bits(pending.get("luck").and_then(Value::as_u64).unwrap_or_default());
                let report = ctx.attest(proof_binding(ctx.crypto(), round, &head, height, luck));
                ctx.increment_counter()?;
                state.set("pending", Value::Unit);
                ctx.seal_state(&state.encode())?;
                Ok(LuckProof { round, head, height, luck, report }.to_value())
            }
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

/// Accepts attested luck proofs mined on the current head.
pub struct PolValidator {
    verifier: AttestationVerifier,
    accepted: BTreeMap<(String, u64), usize>,
}

impl PolValidator {
    pub fn new(verifier: AttestationVerifier) -> Self {
        PolValidator { verifier, accepted: BTreeMap::new() }
    }

    /// Proofs accepted for `platform` in `round`.
    pub fn accepted(&self, platform: &str, round: u64) -> usize {
        self.accepted.get(&(platform.to_string(), round)).copied().unwrap_or_default()
    }
}

impl TxValidator for PolValidator {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        let proof = LuckProof::from_value(&tx.payload).ok_or_else(|| ValidationError::Malformed("bad luck proof".into()))?;
        if proof.head != chain.head().hash || proof.height != chain.head().height {
            return Err(ValidationError::StaleAnchor);
        }
        let binding = proof_binding(chain.crypto(), proof.round, &proof.head, proof.height, proof.luck);
        if !self.verifier.verify(&proof.report) || proof.report.report_data != binding {
            return Err(ValidationError::BadAttestation);
        }
        *self.accepted.entry((proof.platform().to_string(), proof.round)).or_default() += 1;
        Ok(())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// What one round produced across all instances on the platform.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundResult {
    pub proofs: Vec<Value>,
    pub mismatches: Vec<(u64, u64)>,
    pub accepted: usize,
}

pub struct PolNet {
    pub sim: Simulation,
    pub miner: Handle,
    pub platform: String,
}

pub fn setup(seed: u64, mode: ConsensusMode, counter: bool) -> Result<PolNet, RunError> {
    let mut sim = Simulation::new(seed, mode);
    let p = sim.world.add_platform("luck-host")?;
    sim.world.set_counter_enabled(&p, counter)?;
    let m = sim.world.register_program(Arc::new(LuckMiner { interval_ms: mode.block_interval_ms() }))?;
    sim.ledger.register_tx_validator(KIND, Box::new(PolValidator::new(sim.world.verifier())))?;
    let miner = sim.launch(&p, m)?;
    Ok(PolNet { sim, miner, platform: p.0 })
}

/// Starts every instance on `head`, lets the sleeps elapse, and submits each
/// proof that comes out.
pub fn play_round(
    sim: &mut Simulation,
    instances: &[Handle],
    round: u64,
    head: (Digest, u64),
) -> Result<RoundResult, RunError> {
    let interval = sim.ledger.mode().block_interval_ms();
    let start = Value::map([
        ("op", Value::str("start")),
        ("round", Value::Uint(round)),
        ("head", Value::bytes(head.0)),
        ("height", Value::Uint(head.1)),
    ]);
    for &h in instances {
        let rec = sim.step_labeled(h, "start", &start);
        match rec.result {
            Ok(out) => {
                let sleep = out.get("sleep_ms").and_then(Value::as_u64).unwrap_or(interval / 2);
                sim.send(h, "finish", Value::map([("op", Value::str("finish"))]), sleep);
            }
            Err(crate::enclave::EnclaveError::Program(ProgramFault::CounterUnsupported)) => {
                return Err(RunError::config("params.counter", "monotonic counters unsupported on this platform"))
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut result = RoundResult::default();
    for rec in sim.advance_time(interval * 9 / 10) {
        match rec.result {
            Ok(proof) if rec.label == "finish" => result.proofs.push(proof),
            Err(crate::enclave::EnclaveError::Program(ProgramFault::CounterMismatch { expected, found })) => {
                result.mismatches.push((expected, found));
            }
            _ => {}
        }
    }
    for proof in &result.proofs {
        match sim.submit_tx(Tx::new(KIND, proof.clone())) {
            Ok(_) => result.accepted += 1,
            Err(e) => sim.evidence(Evidence::ValidationRejected { reason: e.to_string() }),
        }
    }
    for &(expected, found) in &result.mismatches {
        sim.evidence(Evidence::CounterMismatch { expected, found });
    }
    Ok(result)
}

fn current_head(sim: &Simulation) -> (Digest, u64) {
    (sim.ledger.head().hash, sim.ledger.head().height)
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let rounds = ctx.params.u64("rounds", 5)?;
    let counter = ctx.params.bool("counter", true)?;
    let PolNet { mut sim, miner, platform } = setup(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()), counter)?;
    sim.next_block();
    match ctx.attack {
        AttackKind::None => {
            let mut accepted = 0;
            for round in 0..rounds {
                let head = current_head(&sim);
                accepted += play_round(&mut sim, &[miner], round, head)?.accepted;
                sim.next_block();
            }
            sim.note(format!("result {accepted}/{rounds} proofs accepted"));
        }
        AttackKind::Cloning => {
            let clones = ctx.params.u64("clones", 2)?.max(1);
            let blob = sim.blobs_of(miner)?.last().cloned();
            let mut instances = vec![miner];
            for _ in 1..clones {
                instances.push(sim.clone_instance(miner, blob.as_ref())?);
            }
            for round in 0..rounds {
                let head = current_head(&sim);
                let result = play_round(&mut sim, &instances, round, head)?;
                let count = sim.ledger.validator::<PolValidator>(KIND).map_or(0, |v| v.accepted(&platform, round));
                if count >= 2 {
                    sim.evidence(Evidence::DuplicateAccepted { what: format!("luck proofs for round {round}"), count });
                }
                sim.record(Event::Round { index: round, adversary_won: result.accepted >= 2 });
                sim.next_block();
            }
        }
        AttackKind::Rollback => {
            let stale = current_head(&sim);
            sim.next_block();
            sim.next_block();
            let blob = sim.blobs_of(miner)?.first().cloned();
            let e = sim.restart_with(miner, blob.as_ref())?;
            play_round(&mut sim, &[e], 0, stale)?;
        }
    }
    Ok(RunResult::from_sim(sim, ctx.attack))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::protocols::{ParamValue, Params, Variant};

    fn one_round(seed: u64, c: usize) -> RoundResult {
        let PolNet { mut sim, miner, .. } = setup(seed, ConsensusMode::permissioned(), true).unwrap();
        sim.next_block();
        let blob = sim.blobs_of(miner).unwrap().last().cloned();
        let mut instances = vec![miner];
        for _ in 1..c {
            instances.push(sim.clone_instance(miner, blob.as_ref()).unwrap());
        }
        let head = current_head(&sim);
        play_round(&mut sim, &instances, 0, head).unwrap()
    }

    #[test]
    fn single_instance_emits_a_proof() {
        let r = one_round(1, 1);
        assert_eq!((r.proofs.len(), r.accepted, r.mismatches.len()), (1, 1, 0));
    }

    #[test]
    fn two_clones_one_proof_one_mismatch() {
        let r = one_round(2, 2);
        assert_eq!((r.proofs.len(), r.mismatches.len()), (1, 1));
    }

    #[test]
    fn disabled_counter_is_a_config_error() {
        let ctx = RunContext::new(1, Variant::Vulnerable, AttackKind::None)
            .with_params(Params::default().with("counter", ParamValue::Bool(false)));
        assert!(matches!(run(&ctx), Err(RunError::Config { .. })));
    }

    #[test]
    fn attacks_fail() {
        for attack in [AttackKind::Rollback, AttackKind::Cloning] {
            let r = run(&RunContext::new(3, Variant::Vulnerable, attack)).unwrap();
            assert!(!r.outcome.succeeded, "{attack}: {:?}", r.outcome);
        }
    }

    #[test]
    fn sleep_is_bounded() {
        assert_eq!(sleep_ms(1000, 1.0), 500);
        assert_eq!(sleep_ms(1000, 0.0), 900);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn at_most_one_proof_per_platform_round(seed in any::<u64>(), c in 1usize..=8) {
            let r = one_round(seed, c);
            prop_assert_eq!(r.proofs.len(), 1);
            prop_assert_eq!(r.mismatches.len(), c - 1);
        }
    }
}
