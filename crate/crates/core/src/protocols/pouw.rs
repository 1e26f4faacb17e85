//! Proof of useful work: an enclave runs a task of `n` instructions and wins
//! the right to propose if its random draw clears a threshold derived from
//! the work done. Proofs are signed and bound to the head they were mined on.

use std::any::Any;
use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::{CryptoProvider, Keypair, PublicKey, Signature};
use crate::enclave::{
    report_data, AttestationReport, AttestationVerifier, EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault,
    ProgramFlags, Persistence,
};
use crate::host::{AttackKind, Event, Evidence, Simulation};
use crate::ledger::{ChainState, ConsensusMode, Tx, TxValidator, ValidationError};
use crate::mitigations::ephemeral::{ephemeral_register, handle_register_op, EphemeralRegistry, REGISTER_KIND};
use crate::mitigations::SupersedeAuth;
use crate::protocols::{bad_input, log_advantage, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["diff", "n", "clones", "rounds", "direction"];
pub const KIND: &str = "pouw";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Success iff `r <= t`, so more work means better odds.
    #[default]
    SucceedIfBelow,
    /// Success iff `r > t`.
    SucceedIfAbove,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoUwConfig {
    pub diff: f64,
    pub direction: Direction,
}

impl PoUwConfig {
    /// `t = 1 - (1 - diff)^n`.
    pub fn threshold(&self, n: u64) -> f64 {
        1.0 - (1.0 - self.diff).powf(n as f64)
    }

    pub fn succeeds(&self, r: f64, n: u64) -> bool {
        let t = self.threshold(n);
        match self.direction {
            Direction::SucceedIfBelow => r <= t,
            Direction::SucceedIfAbove => r > t,
        }
    }

    /// Probability that a single attempt succeeds.
    pub fn success_probability(&self, n: u64) -> f64 {
        let t = self.threshold(n);
        match self.direction {
            Direction::SucceedIfBelow => t,
            Direction::SucceedIfAbove => 1.0 - t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoUwProof {
    pub out: [u8; 32],
    pub r: f64,
    pub n: u64,
    pub head: [u8; 32],
    pub height: u64,
    pub pk: PublicKey,
    pub signature: Signature,
}

impl PoUwProof {
    fn signed_bytes(out: &[u8; 32], r: f64, n: u64, head: &[u8; 32], height: u64, pk: &PublicKey) -> Vec<u8> {
        Value::List(vec![
            Value::bytes(out),
            Value::Uint(r.to_bits()),
            Value::Uint(n),
            Value::bytes(head),
            Value::Uint(height),
            Value::bytes(pk.to_bytes()),
        ])
        .encode()
    }

    pub fn verify(&self, crypto: &dyn CryptoProvider) -> bool {
        let msg = Self::signed_bytes(&self.out, self.r, self.n, &self.head, self.height, &self.pk);
        crypto.verify(&self.pk, &msg, &self.signature)
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("out", Value::bytes(self.out)),
            ("r", Value::Uint(self.r.to_bits())),
            ("n", Value::Uint(self.n)),
            ("head", Value::bytes(self.head)),
            ("height", Value::Uint(self.height)),
            ("pk", Value::bytes(self.pk.to_bytes())),
            ("sig", Value::bytes(self.signature.to_bytes())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        Some(PoUwProof {
            out: v.get("out")?.as_bytes()?.try_into().ok()?,
            r: f64::from_bits(v.get("r")?.as_u64()?),
            n: v.get("n")?.as_u64()?,
            head: v.get("head")?.as_bytes()?.try_into().ok()?,
            height: v.get("height")?.as_u64()?,
            pk: PublicKey::from_bytes(v.get("pk")?.as_bytes()?.try_into().ok()?),
            signature: Signature::from_bytes(v.get("sig")?.as_bytes()?.try_into().ok()?),
        })
    }
}

fn key_binding(crypto: &dyn CryptoProvider, pk: &PublicKey) -> [u8; 64] {
    report_data(&crypto.hash(&Value::List(vec![Value::str("pouw-key"), Value::bytes(pk.to_bytes())]).encode()))
}

/// The mining enclave. The vulnerable variant seals a long-term signing key
/// at setup, so every copy of the enclave signs as the same miner. The
/// patched variant signs with its per-launch ephemeral key.
pub struct PouwMiner {
    pub config: PoUwConfig,
    pub patched: bool,
}

impl PouwMiner {
    fn signing_key(&self, state: &Value, ctx: &EnclaveCtx<'_>) -> Result<Keypair, ProgramFault> {
        if self.patched {
            return ctx.ephemeral().cloned().ok_or(ProgramFault::Rejected("no ephemeral key".into()));
        }
        let seed: [u8; 32] =
            state.get("key_seed").and_then(Value::as_bytes).and_then(|b| b.try_into().ok()).ok_or(ProgramFault::NotEnrolled)?;
        Ok(ctx.crypto().keypair_from_seed(&seed))
    }

    fn attempt(&self, state: &Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let n = input.get("n").and_then(Value::as_u64).ok_or_else(|| bad_input("attempt needs n"))?;
        let head: [u8; 32] = input
            .get("head")
            .and_then(Value::as_bytes)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad_input("attempt needs head"))?;
        let height = input.get("height").and_then(Value::as_u64).ok_or_else(|| bad_input("attempt needs height"))?;
        let out = ctx.crypto().hash(&Value::List(vec![Value::str("task"), Value::Uint(n), Value::bytes(head)]).encode());
        let r = ctx.draw_unit();
        if !self.config.succeeds(r, n) {
            return Ok(Value::map([("luck", Value::Bool(false)), ("r", Value::Uint(r.to_bits()))]));
        }
        let key = self.signing_key(state, ctx)?;
        let msg = PoUwProof::signed_bytes(&out, r, n, &head, height, &key.public);
        let proof = PoUwProof { out, r, n, head, height, pk: key.public, signature: ctx.crypto().sign(&key, &msg) };
        Ok(Value::map([("luck", Value::Bool(true)), ("proof", proof.to_value())]))
    }
}

impl Program for PouwMiner {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new(
            "pouw-miner",
            1,
            Value::map([("diff", Value::Uint(self.config.diff.to_bits())), ("patched", Value::Bool(self.patched))]),
        )
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags {
            deterministic: false,
            uses_randomness: true,
            ephemeral_keys: self.patched,
            persistence: if self.patched { Persistence::Stateless } else { Persistence::ImmutableConfig },
        }
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        if self.patched {
            return Ok(Value::map::<&str, _>([]));
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&ctx.draw_u64().to_be_bytes());
        }
        let state = Value::map([("key_seed", Value::bytes(seed))]);
        ctx.seal_config(&state.encode());
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        if let Some(r) = handle_register_op(input, ctx) {
            return r;
        }
        match op(input) {
            "attempt" => self.attempt(state, input, ctx),
            "key-report" => {
                let key = self.signing_key(state, ctx)?;
                let report = ctx.attest(key_binding(ctx.crypto(), &key.public));
                Ok(Value::map([
                    ("type", Value::str("key")),
                    ("pk", Value::bytes(key.public.to_bytes())),
                    ("report", report.to_value()),
                ]))
            }
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

/// Ledger-side proof check. Proofs must be mined on the current head and
/// signed by a known miner key; the patched variant additionally requires the
/// key to be the role's active ephemeral key since before that head.
pub struct PouwValidator {
    config: PoUwConfig,
    patched: bool,
    verifier: AttestationVerifier,
    keys: BTreeSet<PublicKey>,
    claimed: BTreeSet<[u8; 32]>,
    accepted: Vec<PoUwProof>,
}

impl PouwValidator {
    pub fn new(config: PoUwConfig, patched: bool, verifier: AttestationVerifier) -> Self {
        PouwValidator { config, patched, verifier, keys: BTreeSet::new(), claimed: BTreeSet::new(), accepted: Vec::new() }
    }

    pub fn accepted(&self) -> &[PoUwProof] {
        &self.accepted
    }

    fn check_proof(&self, proof: &PoUwProof, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        if proof.head != chain.head().hash || proof.height != chain.head().height {
            return Err(ValidationError::StaleAnchor);
        }
        if !proof.verify(chain.crypto()) {
            return Err(ValidationError::BadSignature);
        }
        if !self.config.succeeds(proof.r, proof.n) {
            return Err(ValidationError::Malformed("draw does not clear the threshold".into()));
        }
        if self.claimed.contains(&proof.head) {
            return Err(ValidationError::Malformed("head already claimed".into()));
        }
        if self.patched {
            let registry = chain
                .validator::<EphemeralRegistry>(REGISTER_KIND)
                .ok_or(ValidationError::UnregisteredEphemeralId)?;
            match registry.active_since(&proof.pk) {
                Some(since) if since < proof.height => Ok(()),
                _ => Err(ValidationError::UnregisteredEphemeralId),
            }
        } else if self.keys.contains(&proof.pk) {
            Ok(())
        } else {
            Err(ValidationError::BadAttestation)
        }
    }
}

impl TxValidator for PouwValidator {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        match tx.payload.get("type").and_then(Value::as_str) {
            Some("key") => {
                let pk = tx
                    .payload
                    .get("pk")
                    .and_then(Value::as_bytes)
                    .and_then(|b| b.try_into().ok())
                    .map(PublicKey::from_bytes)
                    .ok_or_else(|| ValidationError::Malformed("key needs pk".into()))?;
                let report = tx
                    .payload
                    .get("report")
                    .and_then(AttestationReport::from_value)
                    .ok_or_else(|| ValidationError::Malformed("key needs report".into()))?;
                if !self.verifier.verify(&report) || report.report_data != key_binding(chain.crypto(), &pk) {
                    return Err(ValidationError::BadAttestation);
                }
                self.keys.insert(pk);
                Ok(())
            }
            Some("proof") => {
                let proof = tx
                    .payload
                    .get("proof")
                    .and_then(PoUwProof::from_value)
                    .ok_or_else(|| ValidationError::Malformed("bad proof".into()))?;
                self.check_proof(&proof, chain)?;
                self.claimed.insert(proof.head);
                self.accepted.push(proof);
                Ok(())
            }
            _ => Err(ValidationError::Malformed("unknown pouw tx".into())),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Reference Monte-Carlo of the cloning attack outside the simulator: in
/// each trial `c` independent attempts are drawn and the trial counts if any
/// succeeds.
pub fn clone_trial(config: &PoUwConfig, n: u64, c: u32, trials: u64, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let wins = (0..trials).filter(|_| (0..c).any(|_| config.succeeds(rng.gen::<f64>(), n))).count();
    wins as f64 / trials as f64
}

struct Setup {
    sim: Simulation,
    miner: Handle,
    role: String,
    config: PoUwConfig,
    n: u64,
}

fn setup(ctx: &RunContext) -> Result<Setup, RunError> {
    let diff = ctx.params.f64("diff", 0.2)?;
    if !(diff > 0.0 && diff < 1.0) {
        return Err(RunError::config("params.diff", "must lie in (0, 1)"));
    }
    let direction = match ctx.params.str("direction", "below")? {
        "below" => Direction::SucceedIfBelow,
        "above" => Direction::SucceedIfAbove,
        _ => return Err(RunError::config("params.direction", "expected \"below\" or \"above\"")),
    };
    let config = PoUwConfig { diff, direction };
    let n = ctx.params.u64("n", 1)?;
    let patched = ctx.patched();
    let mut sim = Simulation::new(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()));
    let p = sim.world.add_platform("miner-host")?;
    let m = sim.world.register_program(Arc::new(PouwMiner { config, patched }))?;
    let verifier = sim.world.verifier();
    sim.ledger.register_tx_validator(KIND, Box::new(PouwValidator::new(config, patched, verifier.clone())))?;
    sim.ledger.register_tx_validator(REGISTER_KIND, Box::new(EphemeralRegistry::new(verifier, SupersedeAuth::AttestedSuccessor)))?;
    let miner = sim.launch(&p, m)?;
    let role = format!("miner:{}", p.0);
    if patched {
        ephemeral_register(&mut sim, miner, &role, None)?;
    } else {
        let key = sim.step(miner, &Value::map([("op", Value::str("key-report"))]))?;
        sim.submit_tx(Tx::new(KIND, key))?;
    }
    sim.next_block();
    Ok(Setup { sim, miner, role, config, n })
}

fn attempt_input(sim: &Simulation, n: u64, head: &[u8; 32], height: u64) -> Value {
    let _ = sim;
    Value::map([
        ("op", Value::str("attempt")),
        ("n", Value::Uint(n)),
        ("head", Value::bytes(head)),
        ("height", Value::Uint(height)),
    ])
}

fn submit_proof(sim: &mut Simulation, proof: &Value) -> bool {
    match sim.submit_tx(Tx::new(KIND, Value::map([("type", Value::str("proof")), ("proof", proof.clone())]))) {
        Ok(_) => true,
        Err(e) => {
            sim.evidence(Evidence::ValidationRejected { reason: e.to_string() });
            false
        }
    }
}

fn lucky_proof(out: &Value) -> Option<Value> {
    (out.get("luck") == Some(&Value::Bool(true))).then(|| out.get("proof").cloned()).flatten()
}

fn mine_round(sim: &mut Simulation, instances: &[Handle], role: &str, n: u64, patched: bool) -> Result<bool, RunError> {
    let head = sim.ledger.head().hash;
    let height = sim.ledger.head().height;
    let input = attempt_input(sim, n, &head, height);
    let mut won = false;
    for &h in instances {
        let out = sim.step(h, &input)?;
        let Some(proof) = lucky_proof(&out) else { continue };
        if patched {
            let pk = sim.world.ephemeral_public(h)?;
            let active = sim.ledger.validator::<EphemeralRegistry>(REGISTER_KIND).and_then(|r| r.active(role));
            if pk != active {
                // Swap the lucky copy in as the registered miner before
                // submitting its proof.
                let _ = ephemeral_register(sim, h, role, active);
            }
        }
        if submit_proof(sim, &proof) {
            won = true;
            break;
        }
    }
    sim.next_block();
    Ok(won)
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let Setup { mut sim, miner, role, config, n } = setup(ctx)?;
    let rounds = ctx.params.u64("rounds", 200)?;
    let baseline = config.success_probability(n);
    match ctx.attack {
        AttackKind::None => {
            let mut wins = 0;
            for index in 0..rounds {
                let won = mine_round(&mut sim, &[miner], &role, n, ctx.patched())?;
                wins += u64::from(won);
                sim.record(Event::Round { index, adversary_won: won });
            }
            sim.note(format!("result {wins}/{rounds} blocks won"));
        }
        AttackKind::Cloning => {
            let clones = ctx.params.u64("clones", 4)?.max(1);
            let blob = sim.blobs_of(miner)?.last().cloned();
            let mut instances = vec![miner];
            for _ in 1..clones {
                instances.push(sim.clone_instance(miner, blob.as_ref())?);
            }
            for index in 0..rounds {
                let won = mine_round(&mut sim, &instances, &role, n, ctx.patched())?;
                sim.record(Event::Round { index, adversary_won: won });
            }
            log_advantage(&mut sim, baseline);
        }
        AttackKind::Rollback => {
            sim.next_block();
            sim.next_block();
            let stale = sim.ledger.canonical_at(1).expect("three blocks produced").clone();
            let blob = sim.blobs_of(miner)?.first().cloned();
            let e = sim.restart_with(miner, blob.as_ref())?;
            let input = attempt_input(&sim, n, &stale.hash, stale.height);
            let mut found = None;
            for _ in 0..10_000 {
                if let Some(p) = lucky_proof(&sim.step(e, &input)?) {
                    found = Some(p);
                    break;
                }
            }
            match found {
                Some(p) => {
                    submit_proof(&mut sim, &p);
                }
                None => sim.note("no lucky draw on the stale head"),
            }
        }
    }
    Ok(RunResult::from_sim(sim, ctx.attack))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::protocols::{ParamValue, Params, Variant};

    #[test]
    fn threshold_examples() {
        let c = PoUwConfig { diff: 0.5, direction: Direction::SucceedIfBelow };
        assert_eq!(c.threshold(0), 0.0);
        assert_eq!(c.threshold(1), 0.5);
        assert!(!c.succeeds(0.1, 0));
        let c = PoUwConfig { diff: 0.1, direction: Direction::SucceedIfBelow };
        assert!((c.threshold(3) - 0.271).abs() < 1e-9);
        let above = PoUwConfig { diff: 0.5, direction: Direction::SucceedIfAbove };
        assert!(above.succeeds(0.7, 1) && !above.succeeds(0.3, 1));
    }

    #[test]
    fn rollback_proof_on_stale_head_is_rejected() {
        for variant in [Variant::Vulnerable, Variant::Patched] {
            let r = run(&RunContext::new(4, variant, AttackKind::Rollback)).unwrap();
            assert!(!r.outcome.succeeded);
            assert!(r
                .outcome
                .evidence
                .iter()
                .any(|e| matches!(e, Evidence::ValidationRejected { reason } if reason.contains("stale"))));
        }
    }

    #[test]
    fn cloning_advantage_only_when_vulnerable() {
        let params = Params::default().with("rounds", ParamValue::Int(300));
        let v = run(&RunContext::new(9, Variant::Vulnerable, AttackKind::Cloning).with_params(params.clone())).unwrap();
        assert!(v.outcome.succeeded, "{:?}", v.outcome);
        let p = run(&RunContext::new(9, Variant::Patched, AttackKind::Cloning).with_params(params)).unwrap();
        assert!(!p.outcome.succeeded);
        let (rounds, wins) = p.log.round_tally();
        let freq = wins as f64 / rounds as f64;
        assert!(freq < 0.3, "{freq}");
    }

    #[test]
    fn reference_clone_trial_matches_closed_form() {
        let c = PoUwConfig { diff: 0.2, direction: Direction::SucceedIfBelow };
        let f = clone_trial(&c, 1, 4, 20_000, 77);
        assert!((f - (1.0 - 0.8f64.powi(4))).abs() < 0.02, "{f}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // No proof mined on one head is accepted once the head has moved.
        #[test]
        fn proofs_bind_to_their_head(seed in any::<u64>(), extra in 1u64..4) {
            let ctx = RunContext::new(seed, Variant::Vulnerable, AttackKind::None);
            let Setup { mut sim, miner, config, n, .. } = setup(&ctx).unwrap();
            let head = sim.ledger.head().clone();
            let input = attempt_input(&sim, n, &head.hash, head.height);
            let proof = loop {
                if let Some(p) = lucky_proof(&sim.step(miner, &input).unwrap()) {
                    break p;
                }
            };
            prop_assert!(config.succeeds(PoUwProof::from_value(&proof).unwrap().r, n));
            for _ in 0..extra {
                sim.next_block();
            }
            prop_assert!(!submit_proof(&mut sim, &proof));
        }
    }
}
