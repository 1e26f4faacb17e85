//! Ten-style proof of block inclusion. Every enrolled enclave draws a random
//! nonce per L1 block and emits a rollup bound to that block; the L1
//! contract commits the rollup with the lowest nonce. Enrollment costs a fee,
//! but clones made after enrollment share it.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::crypto::{Digest, PublicKey, Signature};
use crate::enclave::{EnclaveCtx, EnclaveProgram, Handle, Program, ProgramDescriptor, ProgramFault, ProgramFlags};
use crate::host::{AttackKind, Event, Evidence, Simulation};
use crate::ledger::{Block, ChainState, ConsensusMode, LedgerError, Tx, TxValidator, ValidationError};
use crate::mitigations::ephemeral::{ephemeral_register, ephemeral_wrap, EphemeralRegistry, REGISTER_KIND};
use crate::mitigations::SupersedeAuth;
use crate::protocols::network::{changes_state, contract_keypair, contract_public, enroll, genesis_input, handle_network_op};
use crate::protocols::{bad_input, digest_field, log_advantage, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["honest", "clones", "rounds"];
pub const KIND: &str = "ten-rollup";
const SIGNING_ID: &str = "rollup-signing";
pub const ADVERSARY: &str = "adversary";

pub fn role(l2_address: &str) -> String {
    format!("aggregator:{l2_address}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RollupHeader {
    pub l1_ref: Digest,
    pub cross_chain: Vec<Value>,
    pub payload_hash: Digest,
    pub payload_sig: Signature,
    pub batch_seq: u64,
    pub nonce: u64,
    pub l2_address: String,
    pub eph_id: Option<PublicKey>,
}

impl RollupHeader {
    /// What the network key signs: every field but the signature itself.
    pub fn signed_bytes(&self) -> Vec<u8> {
        Value::List(vec![
            Value::bytes(self.l1_ref),
            Value::List(self.cross_chain.clone()),
            Value::bytes(self.payload_hash),
            Value::Uint(self.batch_seq),
            Value::Uint(self.nonce),
            Value::str(self.l2_address.clone()),
            self.eph_id.map_or(Value::Unit, |p| Value::bytes(p.to_bytes())),
        ])
        .encode()
    }

    /// Layout: `[l1_ref, cross_chain, payload_hash, payload_sig, batch_seq,
    /// nonce, l2_address, eph_id | unit]`.
    pub fn to_value(&self) -> Value {
        Value::List(vec![
            Value::bytes(self.l1_ref),
            Value::List(self.cross_chain.clone()),
            Value::bytes(self.payload_hash),
            Value::bytes(self.payload_sig.to_bytes()),
            Value::Uint(self.batch_seq),
            Value::Uint(self.nonce),
            Value::str(self.l2_address.clone()),
            self.eph_id.map_or(Value::Unit, |p| Value::bytes(p.to_bytes())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let [l1, cc, ph, ps, seq, nonce, addr, eph] = v.as_list()? else { return None };
        Some(RollupHeader {
            l1_ref: l1.as_bytes()?.try_into().ok()?,
            cross_chain: cc.as_list()?.to_vec(),
            payload_hash: ph.as_bytes()?.try_into().ok()?,
            payload_sig: Signature::from_bytes(ps.as_bytes()?.try_into().ok()?),
            batch_seq: seq.as_u64()?,
            nonce: nonce.as_u64()?,
            l2_address: addr.as_str()?.to_string(),
            eph_id: match eph {
                Value::Unit => None,
                e => Some(PublicKey::from_bytes(e.as_bytes()?.try_into().ok()?)),
            },
        })
    }
}

/// A rollup as submitted to L1; patched enclaves add a signature by their
/// ephemeral key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rollup {
    pub header: RollupHeader,
    pub body: Vec<Value>,
    pub eph_sig: Option<Signature>,
}

impl Rollup {
    pub fn to_value(&self) -> Value {
        Value::map([
            ("header", self.header.to_value()),
            ("body", Value::List(self.body.clone())),
            ("eph_sig", self.eph_sig.map_or(Value::Unit, |s| Value::bytes(s.to_bytes()))),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        Some(Rollup {
            header: RollupHeader::from_value(v.get("header")?)?,
            body: v.get("body")?.as_list()?.to_vec(),
            eph_sig: match v.get("eph_sig")? {
                Value::Unit => None,
                s => Some(Signature::from_bytes(s.as_bytes()?.try_into().ok()?)),
            },
        })
    }
}

/// Index of the rollup L1 commits: lowest nonce, ties to the lowest address.
pub fn ten_settle(rollups: &[RollupHeader]) -> Option<usize> {
    rollups.iter().enumerate().min_by(|a, b| (a.1.nonce, &a.1.l2_address).cmp(&(b.1.nonce, &b.1.l2_address))).map(|(i, _)| i)
}

pub struct TenEnclave {
    pub patched: bool,
}

impl TenEnclave {
    pub fn program(patched: bool) -> EnclaveProgram {
        let p: EnclaveProgram = Arc::new(TenEnclave { patched });
        if patched { ephemeral_wrap(p) } else { p }
    }

    fn propose(&self, state: &mut Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let signer = contract_keypair(ctx, state, SIGNING_ID)?;
        let height = state.get("height").and_then(Value::as_u64).ok_or_else(|| bad_input("no L1 block seen"))?;
        if state.get("token").and_then(Value::as_u64) == Some(height) {
            return Err(ProgramFault::ThrottleExceeded);
        }
        let l1_ref = digest_field(state, "head").ok_or_else(|| bad_input("no L1 block seen"))?;
        let l2_address = state.get("l2_address").and_then(Value::as_str).ok_or_else(|| bad_input("no L2 address"))?.to_string();
        let batch_seq = state.get("batch_seq").and_then(Value::as_u64).unwrap_or_default() + 1;
        let body = Vec::new();
        let mut header = RollupHeader {
            l1_ref,
            cross_chain: Vec::new(),
            payload_hash: ctx.crypto().hash(&Value::List(Vec::new()).encode()),
            payload_sig: Signature::from_bytes([0; 16]),
            batch_seq,
            nonce: ctx.draw_u64(),
            l2_address,
            eph_id: None,
        };
        let eph = if self.patched { ctx.ephemeral().copied() } else { None };
        header.eph_id = eph.map(|k| k.public);
        header.payload_sig = ctx.crypto().sign(&signer, &header.signed_bytes());
        let eph_sig = eph.map(|k| ctx.crypto().sign(&k, &header.signed_bytes()));
        state.set("token", Value::Uint(height));
        state.set("batch_seq", Value::Uint(batch_seq));
        ctx.seal_state(&state.encode())?;
        Ok(Rollup { header, body, eph_sig }.to_value())
    }
}

impl Program for TenEnclave {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("ten-enclave", 1, Value::map([("patched", Value::Bool(self.patched))]))
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags { deterministic: false, uses_randomness: true, ..ProgramFlags::default() }
    }

    fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        Ok(Value::map([("network", Value::map::<&str, _>([])), ("warm", Value::Bool(true))]))
    }

    /// A restored enclave redoes the throttling work, which costs it the
    /// first block it sees.
    fn restore(&self, sealed: &[u8], _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let mut state = Value::decode(sealed).map_err(|e| ProgramFault::BadInput(e.to_string()))?;
        state.set("warm", Value::Bool(false));
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        if let Some(result) = handle_network_op(state, input, ctx) {
            if result.is_ok() && changes_state(op(input)) {
                ctx.seal_state(&state.encode())?;
            }
            return result;
        }
        match op(input) {
            "configure" => {
                let addr = input.get("l2_address").and_then(Value::as_str).ok_or_else(|| bad_input("configure needs address"))?;
                state.set("l2_address", Value::str(addr));
                ctx.seal_state(&state.encode())?;
                Ok(Value::Unit)
            }
            "l1-block" => {
                let height = input.get("height").and_then(Value::as_u64).ok_or_else(|| bad_input("l1-block needs height"))?;
                let hash = digest_field(input, "hash").ok_or_else(|| bad_input("l1-block needs hash"))?;
                if state.get("height").and_then(Value::as_u64).is_some_and(|h| height <= h) {
                    return Ok(Value::Unit);
                }
                state.set("height", Value::Uint(height));
                state.set("head", Value::bytes(hash));
                if state.get("warm").and_then(Value::as_bool) != Some(true) {
                    state.set("warm", Value::Bool(true));
                    state.set("token", Value::Uint(height));
                }
                ctx.seal_state(&state.encode())?;
                Ok(Value::Unit)
            }
            "propose" => self.propose(state, ctx),
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

/// The L1 rollup contract.
#[derive(Debug)]
pub struct RollupContract {
    network_pk: PublicKey,
    patched: bool,
    accepted: BTreeMap<Digest, Vec<RollupHeader>>,
}

impl RollupContract {
    pub fn new(network_pk: PublicKey, patched: bool) -> Self {
        RollupContract { network_pk, patched, accepted: BTreeMap::new() }
    }

    pub fn accepted_for(&self, l1_ref: &Digest) -> &[RollupHeader] {
        self.accepted.get(l1_ref).map_or(&[], Vec::as_slice)
    }
}

impl TxValidator for RollupContract {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        let r = Rollup::from_value(&tx.payload).ok_or_else(|| ValidationError::Malformed("bad rollup".into()))?;
        let h = &r.header;
        if h.l1_ref != chain.head().hash {
            return Err(ValidationError::StaleAnchor);
        }
        if !chain.crypto().verify(&self.network_pk, &h.signed_bytes(), &h.payload_sig) {
            return Err(ValidationError::BadSignature);
        }
        if self.accepted_for(&h.l1_ref).iter().any(|o| o.l2_address == h.l2_address) {
            return Err(ValidationError::ThrottleExceeded);
        }
        if self.patched {
            let registered = chain.validator::<EphemeralRegistry>(REGISTER_KIND).and_then(|reg| reg.active(&role(&h.l2_address)));
            let proven = match (h.eph_id, r.eph_sig) {
                (Some(id), Some(sig)) => registered == Some(id) && chain.crypto().verify(&id, &h.signed_bytes(), &sig),
                _ => false,
            };
            if !proven {
                return Err(ValidationError::UnregisteredEphemeralId);
            }
        }
        self.accepted.entry(h.l1_ref).or_default().push(r.header);
        Ok(())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

pub struct TenNetwork {
    pub sim: Simulation,
    pub honest: Vec<Handle>,
    /// The adversary's enrolled enclave first, then its clones.
    pub adversary: Vec<Handle>,
    pub patched: bool,
}

fn l1_input(b: &Block) -> Value {
    Value::map([("op", Value::str("l1-block")), ("height", Value::Uint(b.height)), ("hash", Value::bytes(b.hash))])
}

fn configure(sim: &mut Simulation, h: Handle, addr: &str) -> Result<(), RunError> {
    sim.step(h, &Value::map([("op", Value::str("configure")), ("l2_address", Value::str(addr))]))?;
    Ok(())
}

/// `honest` honest aggregators and one adversary that enrolls once and then
/// runs `instances - 1` clones of its enclave.
pub fn setup(seed: u64, mode: ConsensusMode, patched: bool, honest: usize, instances: usize) -> Result<TenNetwork, RunError> {
    let mut sim = Simulation::new(seed, mode);
    let m = sim.world.register_program(TenEnclave::program(patched))?;
    if patched {
        sim.ledger
            .register_tx_validator(REGISTER_KIND, Box::new(EphemeralRegistry::new(sim.world.verifier(), SupersedeAuth::Never)))?;
    }
    let mut honest_handles = Vec::new();
    for i in 0..honest.max(1) {
        let p = sim.world.add_platform(format!("honest-{i}"))?;
        let h = sim.launch(&p, m)?;
        match honest_handles.first() {
            None => {
                sim.step(h, &genesis_input())?;
            }
            Some(&founder) => enroll(&mut sim, h, founder, Some(&format!("honest-{i}")))?,
        }
        configure(&mut sim, h, &format!("honest-{i}"))?;
        honest_handles.push(h);
    }
    let network_pk = contract_public(&mut sim, honest_handles[0], SIGNING_ID)?;
    sim.ledger.register_tx_validator(KIND, Box::new(RollupContract::new(network_pk, patched)))?;

    let p = sim.world.add_platform("adversary-host")?;
    let adv = sim.launch(&p, m)?;
    enroll(&mut sim, adv, honest_handles[0], Some(ADVERSARY))?;
    configure(&mut sim, adv, ADVERSARY)?;
    let blob = sim.blobs_of(adv)?.last().cloned().expect("configure seals");
    let mut adversary = vec![adv];
    for _ in 1..instances.max(1) {
        adversary.push(sim.clone_instance(adv, Some(&blob))?);
    }
    if patched {
        for (i, &h) in honest_handles.iter().enumerate() {
            ephemeral_register(&mut sim, h, &role(&format!("honest-{i}")), None)?;
        }
        for &h in &adversary {
            if let Err(e) = ephemeral_register(&mut sim, h, &role(ADVERSARY), None) {
                sim.evidence(Evidence::ValidationRejected { reason: e.to_string() });
            }
        }
    }
    let mut net = TenNetwork { sim, honest: honest_handles, adversary, patched };
    net.feed_block();
    // One more block lets the clones finish their warm-up.
    net.feed_block();
    Ok(net)
}

impl TenNetwork {
    fn all(&self) -> Vec<Handle> {
        self.honest.iter().chain(&self.adversary).copied().collect()
    }

    /// Produces the next L1 block and hands its header to every enclave.
    pub fn feed_block(&mut self) {
        self.sim.next_block();
        let head = self.sim.ledger.head().clone();
        for h in self.all() {
            let _ = self.sim.step_labeled(h, "l1-block", &l1_input(&head));
        }
    }

    fn propose(&mut self, h: Handle) -> Option<Rollup> {
        let out = self.sim.step(h, &Value::map([("op", Value::str("propose"))])).ok()?;
        Rollup::from_value(&out)
    }

    /// One PoBI round. Returns whether the adversary's rollup was committed.
    pub fn round(&mut self, index: u64) -> Result<bool, RunError> {
        self.feed_block();
        for h in self.honest.clone() {
            if let Some(r) = self.propose(h) {
                self.sim.submit_tx(Tx::new(KIND, r.to_value()))?;
            }
        }
        let mut mine: Vec<Rollup> = self.adversary.clone().into_iter().filter_map(|h| self.propose(h)).collect();
        mine.sort_by_key(|r| r.header.nonce);
        for r in mine {
            match self.sim.submit_tx(Tx::new(KIND, r.to_value())) {
                Ok(_) => break,
                Err(LedgerError::ValidationFailed(e)) => {
                    let reason = e.to_string();
                    if !self.sim.log().evidence().iter().any(|x| matches!(x, Evidence::ValidationRejected { reason: r } if *r == reason)) {
                        self.sim.evidence(Evidence::ValidationRejected { reason });
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        let head = self.sim.ledger.head().hash;
        let accepted = self.sim.ledger.validator::<RollupContract>(KIND).map(|c| c.accepted_for(&head).to_vec()).unwrap_or_default();
        let won = ten_settle(&accepted).is_some_and(|i| accepted[i].l2_address == ADVERSARY);
        self.sim.record(Event::Round { index, adversary_won: won });
        Ok(won)
    }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let honest = ctx.params.u64("honest", 8)?.max(1) as usize;
    let clones = ctx.params.u64("clones", 2)?.max(1) as usize;
    let rounds = ctx.params.u64("rounds", 1000)?.max(1);
    let mode = ctx.mode_or(ConsensusMode::permissioned());
    match ctx.attack {
        AttackKind::Cloning => {
            let mut net = setup(ctx.seed, mode, ctx.patched(), honest, clones)?;
            for i in 0..rounds {
                net.round(i)?;
            }
            log_advantage(&mut net.sim, 1.0 / (honest as f64 + 1.0));
            Ok(RunResult::from_sim(net.sim, ctx.attack))
        }
        AttackKind::Rollback => {
            let mut net = setup(ctx.seed, mode, ctx.patched(), honest, 1)?;
            let adv = net.adversary[0];
            let before = net.sim.blobs_of(adv)?.last().cloned().expect("blocks seal");
            net.round(0)?;
            // Restore the enclave from before the last block and ask again.
            let rolled = net.sim.restart_with(adv, Some(&before))?;
            net.adversary[0] = rolled;
            for attempt in 0..2 {
                match net.propose(rolled) {
                    Some(r) => {
                        if let Err(LedgerError::ValidationFailed(e)) = net.sim.submit_tx(Tx::new(KIND, r.to_value())) {
                            net.sim.evidence(Evidence::ValidationRejected { reason: e.to_string() });
                        }
                    }
                    None => net.sim.evidence(Evidence::ValidationRejected { reason: ProgramFault::ThrottleExceeded.to_string() }),
                }
                if attempt == 0 {
                    // Feeding the current block only completes the warm-up.
                    let head = net.sim.ledger.head().clone();
                    let _ = net.sim.step_labeled(rolled, "l1-block", &l1_input(&head));
                }
            }
            Ok(RunResult::from_sim(net.sim, ctx.attack))
        }
        AttackKind::None => {
            let mut net = setup(ctx.seed, mode, ctx.patched(), honest, 1)?;
            let won = net.round(0)?;
            net.sim.note(format!("result adversary_won={won}"));
            Ok(RunResult::from_sim(net.sim, ctx.attack))
        }
    }
}

/// Closed-form win probability of `clones` adversary instances against
/// `honest` single-instance aggregators with uniform nonces.
pub fn win_probability(honest: usize, clones: usize) -> f64 {
    clones as f64 / (honest + clones) as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::protocols::{Params, ParamValue, Variant};

    fn header(nonce: u64, addr: &str) -> RollupHeader {
        RollupHeader {
            l1_ref: [0; 32],
            cross_chain: Vec::new(),
            payload_hash: [1; 32],
            payload_sig: Signature::from_bytes([0; 16]),
            batch_seq: 1,
            nonce,
            l2_address: addr.into(),
            eph_id: None,
        }
    }

    #[test]
    fn settle_picks_lowest_nonce() {
        assert_eq!(ten_settle(&[header(7, "a"), header(3, "b")]), Some(1));
        assert_eq!(ten_settle(&[header(3, "b"), header(3, "a")]), Some(1));
        assert_eq!(ten_settle(&[]), None);
    }

    #[test]
    fn clones_share_one_fee() {
        let net = setup(1, ConsensusMode::permissioned(), false, 3, 3).unwrap();
        assert_eq!(crate::protocols::network::fees_paid(&net.sim), 3);
        assert_eq!(net.adversary.len(), 3);
    }

    #[test]
    fn one_rollup_per_block_and_enclave() {
        let mut net = setup(1, ConsensusMode::permissioned(), false, 1, 1).unwrap();
        let h = net.honest[0];
        assert!(net.propose(h).is_some());
        assert!(net.propose(h).is_none());
    }

    #[test]
    fn rollback_is_discarded() {
        for v in [Variant::Vulnerable, Variant::Patched] {
            let r = run(&RunContext::new(1, v, AttackKind::Rollback)).unwrap();
            assert!(!r.outcome.succeeded);
            let reasons: Vec<_> = r.outcome.evidence.iter().map(|e| format!("{e:?}")).collect();
            assert!(reasons.iter().any(|e| e.contains("stale")), "{reasons:?}");
            assert!(reasons.iter().any(|e| e.contains("throttling")), "{reasons:?}");
        }
    }

    #[test]
    fn cloning_advantage_and_patch() {
        let params = Params::default().with("rounds", ParamValue::Int(600));
        let r = run(&RunContext::new(5, Variant::Vulnerable, AttackKind::Cloning).with_params(params.clone())).unwrap();
        assert!(r.outcome.succeeded, "{:?}", r.outcome.evidence);
        let r = run(&RunContext::new(5, Variant::Patched, AttackKind::Cloning).with_params(params)).unwrap();
        assert!(!r.outcome.succeeded);
        assert!(r.outcome.evidence.iter().any(|e| matches!(e, Evidence::ValidationRejected { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn settle_is_the_minimum(nonces in proptest::collection::vec((any::<u64>(), 0u8..4), 1..12)) {
            let hs: Vec<_> = nonces.iter().map(|(n, a)| header(*n, &format!("addr-{a}"))).collect();
            let i = ten_settle(&hs).unwrap();
            for h in &hs {
                prop_assert!((hs[i].nonce, &hs[i].l2_address) <= (h.nonce, &h.l2_address));
            }
        }

        #[test]
        fn header_round_trips(nonce in any::<u64>(), seq in any::<u64>(), eph in proptest::option::of(any::<u64>())) {
            let mut h = header(nonce, "x");
            h.batch_seq = seq;
            h.eph_id = eph.map(PublicKey);
            prop_assert_eq!(RollupHeader::from_value(&h.to_value()), Some(h));
        }
    }
}
