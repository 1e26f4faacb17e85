//! A FastKitten-style lottery: a fixed group of `k` clients drives a
//! randomized contract through the fixed-client wrapper. Each round every
//! client signs its stake over the digest it last saw; the enclave draws a
//! winner and signs the announcement.

use std::sync::Arc;

use crate::crypto::{CryptoProvider, Digest, Keypair, PublicKey, Signature};
use crate::enclave::{
    report_data, AttestationReport, EnclaveCtx, SealedBlob, EnclaveError, Handle, Program, ProgramDescriptor, ProgramFault, ProgramFlags,
};
use crate::host::{AttackKind, Event, Evidence, Selector, Simulation};
use crate::ledger::ConsensusMode;
use crate::mitigations::ephemeral::{ephemeral_register, handle_register_op, EphemeralRegistry, REGISTER_KIND};
use crate::mitigations::fixed_client::round_input;
use crate::mitigations::{fixed_client_wrap, ClientGroup, SupersedeAuth};
use crate::protocols::{bad_input, digest_field, host_bytes, log_advantage, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["clients", "clones", "rounds", "favored", "stake"];
const ROLE: &str = "lottery-1:operator";

fn announcement_bytes(winner: u64, inputs_hash: &Digest) -> Vec<u8> {
    Value::List(vec![Value::Uint(winner), Value::bytes(inputs_hash)]).encode()
}

fn key_binding(crypto: &dyn CryptoProvider, pk: &PublicKey) -> [u8; 64] {
    report_data(&crypto.hash(&Value::List(vec![Value::str("lottery-key"), Value::bytes(pk.to_bytes())]).encode()))
}

/// The randomized contract. State holds each client's balance and, in the
/// vulnerable variant, the seed of the operator's long-term signing key.
pub struct Lottery {
    pub k: usize,
    pub patched: bool,
}

impl Lottery {
    fn key(&self, state: &Value, ctx: &EnclaveCtx<'_>) -> Result<Keypair, ProgramFault> {
        if self.patched {
            return ctx.ephemeral().cloned().ok_or(ProgramFault::Rejected("no ephemeral key".into()));
        }
        let seed: [u8; 32] = digest_field(state, "key_seed").ok_or(ProgramFault::Rejected("no signing key".into()))?;
        Ok(ctx.crypto().keypair_from_seed(&seed))
    }
}

impl Program for Lottery {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("lottery", 1, Value::map([("k", Value::Uint(self.k as u64)), ("patched", Value::Bool(self.patched))]))
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags { deterministic: false, uses_randomness: true, ephemeral_keys: self.patched, ..ProgramFlags::default() }
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&ctx.draw_u64().to_be_bytes());
        }
        let mut state = Value::map([("balances", Value::List(vec![Value::Uint(0); self.k]))]);
        if !self.patched {
            state.set("key_seed", Value::bytes(seed));
        }
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        if let Some(r) = handle_register_op(input, ctx) {
            return r;
        }
        if op(input) == "key" {
            let key = self.key(state, ctx)?;
            let report = ctx.attest(key_binding(ctx.crypto(), &key.public));
            return Ok(Value::map([("pk", Value::bytes(key.public.to_bytes())), ("report", report.to_value())]));
        }
        let stakes = input.as_list().ok_or_else(|| bad_input("expected the round's stakes"))?;
        if stakes.len() != self.k {
            return Err(bad_input("one stake per client"));
        }
        let pot: u64 = stakes.iter().filter_map(Value::as_u64).sum();
        let winner = ctx.draw_u64() % self.k as u64;
        let mut balances: Vec<u64> = state
            .get("balances")
            .and_then(Value::as_list)
            .map(|l| l.iter().filter_map(Value::as_u64).collect())
            .unwrap_or_else(|| vec![0; self.k]);
        balances[winner as usize] += pot;
        state.set("balances", Value::List(balances.into_iter().map(Value::Uint).collect()));
        let inputs_hash = ctx.crypto().hash(&input.encode());
        let key = self.key(state, ctx)?;
        let sig = ctx.crypto().sign(&key, &announcement_bytes(winner, &inputs_hash));
        Ok(Value::map([
            ("winner", Value::Uint(winner)),
            ("pk", Value::bytes(key.public.to_bytes())),
            ("sig", Value::bytes(sig.to_bytes())),
        ]))
    }
}

/// Client-side check of a winner announcement against the operator key the
/// clients trust.
pub fn verify_announcement(crypto: &dyn CryptoProvider, trusted: &PublicKey, stakes: &Value, ann: &Value) -> Option<u64> {
    let inner = ann.get("output")?;
    let winner = inner.get("winner")?.as_u64()?;
    let pk = PublicKey::from_bytes(inner.get("pk")?.as_bytes()?.try_into().ok()?);
    let sig = Signature::from_bytes(inner.get("sig")?.as_bytes()?.try_into().ok()?);
    let ok = pk == *trusted && crypto.verify(&pk, &announcement_bytes(winner, &crypto.hash(&stakes.encode())), &sig);
    ok.then_some(winner)
}

pub struct LotteryGame {
    pub sim: Simulation,
    pub operator: Handle,
    pub clients: ClientGroup,
    pub trusted: PublicKey,
    pub k: usize,
    pub stake: u64,
    /// The operator's own latest sealed state. The host sees every write, so
    /// it knows which blob belongs to which instance.
    latest: Option<SealedBlob>,
}

pub fn setup(seed: u64, mode: ConsensusMode, k: usize, stake: u64, patched: bool) -> Result<LotteryGame, RunError> {
    let mut sim = Simulation::new(seed, mode);
    let seeds: Vec<[u8; 32]> = (0..k).map(|_| host_bytes(&mut sim)).collect();
    let mut clients = ClientGroup::new(sim.crypto(), seeds);
    let p = sim.world.add_platform("operator-host")?;
    let m = sim.world.register_program(fixed_client_wrap(Arc::new(Lottery { k, patched }), clients.policy()))?;
    sim.ledger
        .register_tx_validator(REGISTER_KIND, Box::new(EphemeralRegistry::new(sim.world.verifier(), SupersedeAuth::Never)))?;
    let operator = sim.launch(&p, m)?;
    let trusted = if patched {
        ephemeral_register(&mut sim, operator, ROLE, None)?;
        sim.ledger.validator::<EphemeralRegistry>(REGISTER_KIND).and_then(|r| r.active(ROLE)).expect("just registered")
    } else {
        let out = sim.step(operator, &Value::map([("op", Value::str("key"))]))?;
        let pk = PublicKey::from_bytes(out.get("pk").and_then(Value::as_bytes).and_then(|b| b.try_into().ok()).unwrap_or_default());
        let report = out.get("report").and_then(AttestationReport::from_value);
        if !report.is_some_and(|r| sim.world.verify_attestation(&r) && r.report_data == key_binding(sim.crypto(), &pk)) {
            return Err(RunError::Sim("operator key attestation failed".into()));
        }
        pk
    };
    let d = sim.step(operator, &Value::map([("op", Value::str("digest"))]))?;
    clients.digest = digest_field(&d, "digest").unwrap_or_default();
    let latest = sim.blobs_of(operator)?.last().cloned();
    Ok(LotteryGame { sim, operator, clients, trusted, k, stake, latest })
}

impl LotteryGame {
    fn stakes(&self) -> Vec<Value> {
        vec![Value::Uint(self.stake); self.k]
    }

    fn round_message(&self) -> Value {
        round_input(&self.clients.sign_round(self.sim.crypto(), &self.stakes()))
    }

    /// Clients check an announcement and, if it verifies, move to its digest.
    fn accept(&mut self, ann: &Value) -> Option<u64> {
        let winner = verify_announcement(self.sim.crypto(), &self.trusted, &Value::List(self.stakes()), ann)?;
        self.clients.digest = digest_field(ann, "digest")?;
        self.sim.record(Event::Client { client: "all".into(), verdict: format!("winner {winner}") });
        Some(winner)
    }

    /// One honest round on the operator.
    pub fn honest_round(&mut self) -> Result<u64, RunError> {
        let msg = self.round_message();
        let ann = self.sim.step(self.operator, &msg)?;
        self.latest = self.sim.blobs_of(self.operator)?.last().cloned();
        self.accept(&ann).ok_or_else(|| RunError::Sim("honest announcement rejected".into()))
    }

    /// One attacked round: the host runs the round on the operator and
    /// `clones - 1` copies of its latest sealed state, then forwards the
    /// announcement that favors `favored`. Returns whether the favored client
    /// won.
    pub fn cloned_round(&mut self, clones: u64, favored: u64) -> Result<bool, RunError> {
        let blob = self.latest.clone();
        let mut instances = vec![self.operator];
        for _ in 1..clones {
            instances.push(self.sim.clone_instance(self.operator, blob.as_ref())?);
        }
        let msg = self.round_message();
        let mut anns = Vec::new();
        for &h in &instances {
            let ann = self.sim.step(h, &msg)?;
            let sealed = self.sim.blobs_of(h)?.last().cloned();
            anns.push((h, ann, sealed));
        }
        let winners: Vec<Value> = anns.iter().map(|(_, a, _)| a.get("output").and_then(|o| o.get("winner")).cloned().unwrap_or_default()).collect();
        let (i, _) = self.sim.select_output(&winners, &Selector::Equals(favored as i64));
        let mut chosen = i;
        let winner = match self.accept(&anns[i].1) {
            Some(w) => w,
            None => {
                self.sim.evidence(Evidence::BadSignature { clients: (0..self.k).collect() });
                chosen = 0;
                self.accept(&anns[0].1).ok_or_else(|| RunError::Sim("operator announcement rejected".into()))?
            }
        };
        for (j, &h) in instances.iter().enumerate() {
            if j != chosen {
                self.sim.kill(h)?;
            }
        }
        self.operator = anns[chosen].0;
        self.latest = anns[chosen].2.clone();
        Ok(winner == favored)
    }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let k = ctx.params.u64("clients", 4)?.max(2) as usize;
    let stake = ctx.params.u64("stake", 1)?;
    let rounds = ctx.params.u64("rounds", 200)?;
    let favored = ctx.params.u64("favored", 1)?;
    if favored >= k as u64 {
        return Err(RunError::config("params.favored", "must name one of the clients"));
    }
    let mut game = setup(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()), k, stake, ctx.patched())?;
    match ctx.attack {
        AttackKind::None => {
            let mut winners = Vec::new();
            for _ in 0..rounds.min(20) {
                winners.push(game.honest_round()?);
            }
            game.sim.note(format!("result {winners:?}"));
        }
        AttackKind::Cloning => {
            let clones = ctx.params.u64("clones", 2)?.max(1);
            for index in 0..rounds {
                let won = game.cloned_round(clones, favored)?;
                game.sim.record(Event::Round { index, adversary_won: won });
            }
            log_advantage(&mut game.sim, 1.0 / k as f64);
        }
        AttackKind::Rollback => {
            game.honest_round()?;
            game.honest_round()?;
            let blobs = game.sim.blobs_of(game.operator)?;
            let old = blobs[blobs.len() - 2].clone();
            let e = game.sim.restart_with(game.operator, Some(&old))?;
            let msg = game.round_message();
            match game.sim.step(e, &msg) {
                Err(EnclaveError::Program(ProgramFault::StateMismatch(clients))) => {
                    game.sim.evidence(Evidence::StateMismatch { clients })
                }
                Err(e) => return Err(e.into()),
                Ok(ann) => {
                    game.accept(&ann);
                }
            }
        }
    }
    Ok(RunResult::from_sim(game.sim, ctx.attack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{ParamValue, Params, Variant};

    #[test]
    fn honest_rounds_spread_wins() {
        let mut g = setup(5, ConsensusMode::permissioned(), 4, 1, false).unwrap();
        let mut counts = [0u32; 4];
        for _ in 0..400 {
            counts[g.honest_round().unwrap() as usize] += 1;
        }
        assert!(counts.iter().all(|&c| (60..=140).contains(&c)), "{counts:?}");
    }

    #[test]
    fn rollback_is_detected() {
        for v in [Variant::Vulnerable, Variant::Patched] {
            let r = run(&RunContext::new(2, v, AttackKind::Rollback)).unwrap();
            assert!(!r.outcome.succeeded);
            assert!(r.outcome.evidence.iter().any(|e| matches!(e, Evidence::StateMismatch { .. })));
        }
    }

    #[test]
    fn cloning_flips_with_patch() {
        let params = Params::default().with("rounds", ParamValue::Int(150));
        let v = run(&RunContext::new(8, Variant::Vulnerable, AttackKind::Cloning).with_params(params.clone())).unwrap();
        assert!(v.outcome.succeeded, "{}", v.outcome.summary());
        let p = run(&RunContext::new(8, Variant::Patched, AttackKind::Cloning).with_params(params)).unwrap();
        assert!(!p.outcome.succeeded);
        assert!(p.outcome.evidence.iter().any(|e| matches!(e, Evidence::BadSignature { .. })));
    }
}
