//! Phala-style confidential contracts. Workers follow the chain, execute
//! contract transactions in order and answer encrypted queries from their
//! local state. Liveness is tracked through heartbeats that a hash-based
//! eligibility function assigns to roughly twenty workers per block; the
//! gatekeeper contract records them and flags workers that go quiet.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::crypto::{CryptoProvider, Digest, Keypair, PublicKey, Signature, AEAD_NONCE_LEN};
use crate::enclave::{
    report_data, AttestationReport, AttestationVerifier, EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault,
    TeeWorld,
};
use crate::host::{block_input, AttackKind, Evidence, Simulation, StepRecord};
use crate::ledger::{Block, ChainState, ConsensusMode, Ledger, Tx, TxValidator, ValidationError};
use crate::mitigations::serialization::{client_verify, ClientVerdict, TimestampVariant, TimestampedResponse};
use crate::protocols::network::{changes_state, contract_keypair, contract_public, genesis_input, handle_network_op};
use crate::protocols::{bad_input, host_bytes, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["workers", "stale_blocks"];
pub const KIND: &str = "phala";
pub const CONTRACT_KIND: &str = "phala-contract";
/// Block interval of the Phala preset: twenty blocks span 45 s.
pub const BLOCK_INTERVAL_MS: u64 = 2_250;
pub const TARGET_SENDERS: u64 = 20;
/// Blocks a heartbeat may lag its challenge block before it counts as missed.
pub const GRACE_BLOCKS: u64 = 1;
const QUERY_AAD: &[u8] = b"phala-query";
const RESPONSE_AAD: &[u8] = b"phala-response";

pub fn preset() -> ConsensusMode {
    ConsensusMode::Final { block_interval_ms: BLOCK_INTERVAL_MS }
}

/// Whether the worker with `pk` owes a heartbeat for the block `hash` when
/// `workers` workers share the duty.
pub fn eligible(crypto: &dyn CryptoProvider, pk: &PublicKey, hash: &Digest, workers: u64) -> bool {
    let workers = workers.max(1);
    let mut data = pk.to_bytes().to_vec();
    data.extend_from_slice(hash);
    let d = crypto.hash(&data);
    let x = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    x % workers < TARGET_SENDERS.min(workers)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heartbeat {
    pub session_id: u64,
    pub challenge_block: u64,
    pub challenge_time: u64,
    pub iterations: u64,
    pub n_clusters: u64,
    pub n_contracts: u64,
}

impl Heartbeat {
    /// Layout: `[session_id, challenge_block, challenge_time, iterations,
    /// n_clusters, n_contracts]`.
    pub fn to_value(&self) -> Value {
        Value::List(
            [self.session_id, self.challenge_block, self.challenge_time, self.iterations, self.n_clusters, self.n_contracts]
                .into_iter()
                .map(Value::Uint)
                .collect(),
        )
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let [a, b, c, d, e, f] = v.as_list()? else { return None };
        Some(Heartbeat {
            session_id: a.as_u64()?,
            challenge_block: b.as_u64()?,
            challenge_time: c.as_u64()?,
            iterations: d.as_u64()?,
            n_clusters: e.as_u64()?,
            n_contracts: f.as_u64()?,
        })
    }
}

/// Contract addresses are 32-byte digests of a name.
pub fn address(crypto: &dyn CryptoProvider, name: &str) -> Digest {
    crypto.hash(name.as_bytes())
}

fn contract_id(address: &[u8]) -> String {
    hex::encode(address)
}

fn identity_binding(crypto: &dyn CryptoProvider, pk: &PublicKey) -> [u8; 64] {
    report_data(&crypto.hash(&Value::List(vec![Value::str("phala-worker"), Value::bytes(pk.to_bytes())]).encode()))
}

pub struct PhalaWorker {
    pub workers: u64,
    pub patched: bool,
}

impl PhalaWorker {
    fn identity(state: &Value, ctx: &EnclaveCtx<'_>) -> Result<Keypair, ProgramFault> {
        let seed: [u8; 32] = state
            .get("identity")
            .and_then(Value::as_bytes)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad_input("worker has no identity"))?;
        Ok(ctx.crypto().keypair_from_seed(&seed))
    }

    fn on_block(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let block = input.get("block").and_then(Block::from_value).ok_or_else(|| bad_input("block op needs block"))?;
        match state.get("height").and_then(Value::as_u64) {
            Some(h) if block.height <= h => return Ok(Value::Unit),
            Some(h) => {
                let head = state.get("head").and_then(Value::as_bytes).unwrap_or_default();
                if block.height != h + 1 || block.parent_hash[..] != *head {
                    return Err(ProgramFault::BrokenChain(h + 1));
                }
            }
            None => {}
        }
        for tx in block.txs.iter().filter(|t| t.kind == CONTRACT_KIND) {
            if tx.payload.get("op").and_then(Value::as_str) != Some("toggle") {
                continue;
            }
            let Some(addr) = tx.payload.get("address").and_then(Value::as_bytes) else { continue };
            let id = contract_id(addr);
            if let Some(Value::Map(flags)) = state.get_mut("flags") {
                let now = flags.get(&id).and_then(Value::as_bool).unwrap_or(false);
                flags.insert(id, Value::Bool(!now));
            }
        }
        state.set("height", Value::Uint(block.height));
        state.set("head", Value::bytes(block.hash));
        ctx.seal_state(&state.encode())?;

        let identity = Self::identity(state, ctx)?;
        if !eligible(ctx.crypto(), &identity.public, &block.hash, self.workers) {
            return Ok(Value::Unit);
        }
        let n_contracts = match state.get("flags") {
            Some(Value::Map(m)) => m.len() as u64,
            _ => 0,
        };
        let hb = Heartbeat {
            session_id: identity.public.0,
            challenge_block: block.height,
            challenge_time: block.timestamp_ms,
            iterations: ctx.draw_u64() % 1_000_000,
            n_clusters: 1,
            n_contracts,
        };
        let signature = ctx.crypto().sign(&identity, &hb.to_value().encode());
        Ok(Value::map([
            ("type", Value::str("heartbeat")),
            ("pk", Value::bytes(identity.public.to_bytes())),
            ("heartbeat", hb.to_value()),
            ("signature", Value::bytes(signature.to_bytes())),
        ]))
    }

    fn on_query(&self, state: &Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let query = PhalaQuery::from_value(input).ok_or_else(|| bad_input("malformed query"))?;
        if !ctx.crypto().verify(&query.identity, &query.payload(), &query.signature) {
            return Err(ProgramFault::BadSignature(Vec::new()));
        }
        let contract = contract_keypair(ctx, state, &contract_id(&query.contract))?;
        let k = ctx.crypto().agree(contract.secret(), &query.client_pk);
        let pt = ctx
            .crypto()
            .aead_decrypt(&k, &query.iv, QUERY_AAD, &query.ciphertext)
            .map_err(|_| ProgramFault::DecryptFail)?;
        if pt.len() < 64 {
            return Err(ProgramFault::DecryptFail);
        }
        let (addr, rest) = pt.split_at(32);
        let (nonce, raw) = rest.split_at(32);
        if addr != query.contract {
            return Err(ProgramFault::AddressMismatch);
        }
        let result = match raw {
            b"get" => state
                .get("flags")
                .and_then(|f| f.get(&contract_id(addr)))
                .and_then(Value::as_bool)
                .unwrap_or(false),
            _ => return Err(bad_input("unknown raw query")),
        };
        let mut iv = [0u8; AEAD_NONCE_LEN];
        iv.copy_from_slice(&ctx.crypto().hash(&query.iv)[..AEAD_NONCE_LEN]);
        let body = Value::List(vec![Value::Bool(result), Value::bytes(nonce)]).encode();
        let response = Value::map([
            ("iv", Value::bytes(iv)),
            ("ct", Value::bytes(ctx.crypto().aead_encrypt(&k, &iv, RESPONSE_AAD, &body))),
        ]);
        if !self.patched {
            return Ok(response);
        }
        let height = state.get("height").and_then(Value::as_u64).unwrap_or_default();
        let head: Option<Digest> = state.get("head").and_then(Value::as_bytes).and_then(|b| b.try_into().ok());
        Ok(TimestampedResponse::new(ctx.crypto(), &contract, response, height, head).to_value())
    }
}

impl Program for PhalaWorker {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new(
            "phala-worker",
            1,
            Value::map([("workers", Value::Uint(self.workers)), ("patched", Value::Bool(self.patched))]),
        )
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let mut seed = Vec::with_capacity(32);
        for _ in 0..4 {
            seed.extend_from_slice(&ctx.draw_u64().to_be_bytes());
        }
        let state = Value::map([
            ("network", Value::map::<&str, _>([])),
            ("identity", Value::bytes(seed)),
            ("flags", Value::map::<&str, _>([])),
        ]);
        ctx.seal_state(&state.encode())?;
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
            "identity" => {
                let id = Self::identity(state, ctx)?;
                let report = ctx.attest(identity_binding(ctx.crypto(), &id.public));
                Ok(Value::map([
                    ("type", Value::str("worker")),
                    ("pk", Value::bytes(id.public.to_bytes())),
                    ("report", report.to_value()),
                ]))
            }
            "block" => self.on_block(state, input, ctx),
            "query" => self.on_query(state, input, ctx),
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

/// An encrypted contract query. The contract address travels in the clear
/// for routing and again inside the ciphertext.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhalaQuery {
    pub contract: Digest,
    pub iv: [u8; AEAD_NONCE_LEN],
    pub client_pk: PublicKey,
    pub ciphertext: Vec<u8>,
    pub identity: PublicKey,
    pub signature: Signature,
}

impl PhalaQuery {
    /// `iv || client_pk || ciphertext`, the bytes the identity key signs.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = self.iv.to_vec();
        out.extend_from_slice(&self.client_pk.to_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("op", Value::str("query")),
            ("contract", Value::bytes(self.contract)),
            ("payload", Value::bytes(self.payload())),
            ("identity", Value::bytes(self.identity.to_bytes())),
            ("signature", Value::bytes(self.signature.to_bytes())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let contract = v.get("contract")?.as_bytes()?.try_into().ok()?;
        let payload = v.get("payload")?.as_bytes()?;
        if payload.len() < AEAD_NONCE_LEN + 8 {
            return None;
        }
        let (iv, rest) = payload.split_at(AEAD_NONCE_LEN);
        let (pk, ct) = rest.split_at(8);
        Some(PhalaQuery {
            contract,
            iv: iv.try_into().ok()?,
            client_pk: PublicKey::from_bytes(pk.try_into().ok()?),
            ciphertext: ct.to_vec(),
            identity: PublicKey::from_bytes(v.get("identity")?.as_bytes()?.try_into().ok()?),
            signature: Signature::from_bytes(v.get("signature")?.as_bytes()?.try_into().ok()?),
        })
    }
}

pub struct PhalaClient {
    pub identity: Keypair,
    pub session: Keypair,
}

/// A query as the client builds it, with what it needs to read the answer.
pub struct Pending {
    pub query: PhalaQuery,
    pub key: [u8; 32],
    pub nonce: [u8; 32],
}

impl PhalaClient {
    pub fn new(crypto: &dyn CryptoProvider, seed: &[u8; 32]) -> Self {
        PhalaClient {
            identity: crypto.keypair_from_seed(&crypto.kdf(seed, b"phala-client", b"identity")),
            session: crypto.keypair_from_seed(&crypto.kdf(seed, b"phala-client", b"session")),
        }
    }

    pub fn build(&self, crypto: &dyn CryptoProvider, contract: Digest, contract_pk: &PublicKey, nonce: [u8; 32], raw: &[u8], iv: [u8; AEAD_NONCE_LEN]) -> Pending {
        let key = crypto.agree(self.session.secret(), contract_pk);
        let mut pt = contract.to_vec();
        pt.extend_from_slice(&nonce);
        pt.extend_from_slice(raw);
        let mut query = PhalaQuery {
            contract,
            iv,
            client_pk: self.session.public,
            ciphertext: crypto.aead_encrypt(&key, &iv, QUERY_AAD, &pt),
            identity: self.identity.public,
            signature: Signature::from_bytes([0; 16]),
        };
        query.signature = crypto.sign(&self.identity, &query.payload());
        Pending { query, key, nonce }
    }
}

/// Opens a plain (unstamped) response; returns the result if the nonce is
/// reflected.
pub fn open_response(crypto: &dyn CryptoProvider, pending: &Pending, response: &Value) -> Option<bool> {
    let iv: [u8; AEAD_NONCE_LEN] = response.get("iv")?.as_bytes()?.try_into().ok()?;
    let body = crypto.aead_decrypt(&pending.key, &iv, RESPONSE_AAD, response.get("ct")?.as_bytes()?).ok()?;
    let v = Value::decode(&body).ok()?;
    let [result, nonce] = v.as_list()? else { return None };
    (nonce.as_bytes()? == pending.nonce).then_some(result.as_bool()?)
}

/// Ledger-side liveness registry.
#[derive(Debug)]
pub struct Gatekeeper {
    verifier: AttestationVerifier,
    workers: u64,
    registered: BTreeMap<PublicKey, u64>,
    received: BTreeSet<(PublicKey, u64)>,
}

impl Gatekeeper {
    pub fn new(verifier: AttestationVerifier, workers: u64) -> Self {
        Gatekeeper { verifier, workers, registered: BTreeMap::new(), received: BTreeSet::new() }
    }

    pub fn heartbeats(&self) -> usize {
        self.received.len()
    }

    /// Heights at which a registered worker owed a heartbeat that never
    /// arrived, given the canonical chain up to `head`.
    pub fn missed(&self, ledger: &Ledger) -> Vec<(PublicKey, u64)> {
        let head = ledger.height();
        let mut out = Vec::new();
        for (pk, &since) in &self.registered {
            for h in since + 1..=head.saturating_sub(1 + GRACE_BLOCKS) {
                let hash = ledger.canonical_at(h).expect("canonical height").hash;
                if eligible(ledger.crypto(), pk, &hash, self.workers) && !self.received.contains(&(*pk, h)) {
                    out.push((*pk, h));
                }
            }
        }
        out
    }
}

fn field_pk(v: &Value) -> Option<PublicKey> {
    Some(PublicKey::from_bytes(v.get("pk")?.as_bytes()?.try_into().ok()?))
}

impl TxValidator for Gatekeeper {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        let malformed = |what: &str| ValidationError::Malformed(what.to_string());
        let pk = field_pk(&tx.payload).ok_or_else(|| malformed("missing pk"))?;
        match tx.payload.get("type").and_then(Value::as_str) {
            Some("worker") => {
                let report =
                    tx.payload.get("report").and_then(AttestationReport::from_value).ok_or_else(|| malformed("missing report"))?;
                if !self.verifier.verify(&report) || report.report_data != identity_binding(chain.crypto(), &pk) {
                    return Err(ValidationError::BadAttestation);
                }
                self.registered.entry(pk).or_insert(chain.head().height);
                Ok(())
            }
            Some("heartbeat") => {
                if !self.registered.contains_key(&pk) {
                    return Err(malformed("unknown worker"));
                }
                let hb_value = tx.payload.get("heartbeat").ok_or_else(|| malformed("missing heartbeat"))?;
                let hb = Heartbeat::from_value(hb_value).ok_or_else(|| malformed("bad heartbeat"))?;
                let sig = tx
                    .payload
                    .get("signature")
                    .and_then(Value::as_bytes)
                    .and_then(|b| b.try_into().ok())
                    .map(Signature::from_bytes)
                    .ok_or_else(|| malformed("missing signature"))?;
                if !chain.crypto().verify(&pk, &hb_value.encode(), &sig) {
                    return Err(ValidationError::BadSignature);
                }
                let hash = chain.canonical_hash_at(hb.challenge_block).ok_or(ValidationError::StaleAnchor)?;
                if !eligible(chain.crypto(), &pk, &hash, self.workers) {
                    return Err(malformed("worker not eligible for this block"));
                }
                self.received.insert((pk, hb.challenge_block));
                Ok(())
            }
            _ => Err(malformed("unknown gatekeeper tx")),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Logs the first missed heartbeat of each worker.
pub fn gatekeeper_audit(sim: &mut Simulation) -> usize {
    let missed = sim.ledger.validator::<Gatekeeper>(KIND).map(|g| g.missed(&sim.ledger)).unwrap_or_default();
    let mut seen = BTreeSet::new();
    for (pk, height) in &missed {
        if seen.insert(*pk) {
            sim.evidence(Evidence::MissedHeartbeat { worker: hex::encode(pk.to_bytes()), height: *height });
        }
    }
    missed.len()
}

/// Submits the heartbeats emitted while processing blocks.
fn submit_heartbeats(sim: &mut Simulation, records: &[StepRecord]) {
    for r in records {
        if let Ok(out) = &r.result {
            if r.label == "block" && out.get("type").is_some() {
                let _ = sim.submit_tx(Tx::new(KIND, out.clone()));
            }
        }
    }
}

pub fn advance_blocks(sim: &mut Simulation, n: u64) {
    for _ in 0..n {
        let records = sim.next_block();
        submit_heartbeats(sim, &records);
    }
}

pub struct Deployment {
    pub sim: Simulation,
    pub worker: Handle,
    pub contract: Digest,
    pub contract_pk: PublicKey,
    pub client: PhalaClient,
}

pub fn deploy(seed: u64, mode: ConsensusMode, workers: u64, patched: bool) -> Result<Deployment, RunError> {
    let mut sim = Simulation::new(seed, mode);
    let m = sim.world.register_program(Arc::new(PhalaWorker { workers, patched }))?;
    sim.ledger.register_tx_validator(KIND, Box::new(Gatekeeper::new(sim.world.verifier(), workers)))?;
    let p = sim.world.add_platform("worker-host")?;
    let worker = sim.launch(&p, m)?;
    sim.step(worker, &genesis_input())?;
    let registration = sim.step(worker, &Value::map([("op", Value::str("identity"))]))?;
    sim.submit_tx(Tx::new(KIND, registration))?;
    let head = sim.ledger.head().clone();
    let first = sim.step_labeled(worker, "block", &block_input(&head));
    submit_heartbeats(&mut sim, &[first]);
    sim.follow(worker);
    let contract = address(sim.crypto(), "flip");
    let contract_pk = contract_public(&mut sim, worker, &contract_id(&contract))?;
    let client_seed = host_bytes(&mut sim);
    let client = PhalaClient::new(sim.crypto(), &client_seed);
    advance_blocks(&mut sim, 2);
    Ok(Deployment { sim, worker, contract, contract_pk, client })
}

pub fn toggle(sim: &mut Simulation, contract: &Digest) -> Result<(), RunError> {
    sim.submit_tx(Tx::new(CONTRACT_KIND, Value::map([("address", Value::bytes(contract)), ("op", Value::str("toggle"))])))?;
    Ok(())
}

/// What the client made of one answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub value: Option<bool>,
    pub verdict: ClientVerdict,
}

/// Sends a `get` query for the flip contract to `h` and checks the response
/// the way the variant's client does.
pub fn query(d: &mut Deployment, h: Handle, patched: bool, variant: TimestampVariant, window: u64) -> Result<Answer, RunError> {
    let nonce = host_bytes(&mut d.sim);
    let mut iv = [0u8; AEAD_NONCE_LEN];
    iv.copy_from_slice(&host_bytes(&mut d.sim)[..AEAD_NONCE_LEN]);
    let pending = d.client.build(d.sim.crypto(), d.contract, &d.contract_pk, nonce, b"get", iv);
    let raw = d.sim.step(h, &pending.query.to_value())?;
    if !patched {
        return Ok(Answer { value: open_response(d.sim.crypto(), &pending, &raw), verdict: ClientVerdict::Accept });
    }
    let stamped = TimestampedResponse::from_value(&raw).ok_or_else(|| RunError::Sim("unstamped response".into()))?;
    if !stamped.verify(d.sim.crypto(), &d.contract_pk) {
        return Err(RunError::Sim("response signature does not verify".into()));
    }
    let view = d.sim.ledger.canonical_chain();
    let verdict = client_verify(&stamped, &view, variant, window);
    Ok(Answer { value: open_response(d.sim.crypto(), &pending, &stamped.payload), verdict })
}

fn judge(sim: &mut Simulation, expected: Option<bool>, answer: &Answer) {
    let show = |v: Option<bool>| v.map_or("none".to_string(), |b| b.to_string());
    match answer.verdict {
        ClientVerdict::RejectStale { height, client_head } => sim.evidence(Evidence::RejectStale { height, client_head }),
        ClientVerdict::RejectForkMismatch { height } => sim.evidence(Evidence::RejectForkMismatch { height }),
        ClientVerdict::Accept if answer.value != expected => {
            sim.evidence(Evidence::StaleResponseAccepted { expected: show(expected), got: show(answer.value) })
        }
        ClientVerdict::Accept => sim.note(format!("result {}", show(answer.value))),
    }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let workers = ctx.params.u64("workers", TARGET_SENDERS)?.max(1);
    let stale_blocks = ctx.params.u64("stale_blocks", 5)?;
    let patched = ctx.patched();
    let variant = ctx.mitigations.timestamping.unwrap_or(TimestampVariant::PlainHeight);
    let window = ctx.window();
    let mut d = deploy(ctx.seed, ctx.mode_or(preset()), workers, patched)?;
    match ctx.attack {
        AttackKind::None => {
            toggle(&mut d.sim, &d.contract)?;
            advance_blocks(&mut d.sim, 2);
            let worker = d.worker;
            let a = query(&mut d, worker, patched, variant, window)?;
            judge(&mut d.sim, Some(true), &a);
        }
        AttackKind::Cloning => {
            let blob = d.sim.blobs_of(d.worker)?.last().cloned().expect("worker seals");
            let clone = d.sim.clone_instance(d.worker, Some(&blob))?;
            d.sim.isolate(clone);
            toggle(&mut d.sim, &d.contract)?;
            advance_blocks(&mut d.sim, stale_blocks);
            let worker = d.worker;
            let expected = query(&mut d, worker, patched, variant, window)?.value;
            let a = query(&mut d, clone, patched, variant, window)?;
            judge(&mut d.sim, expected, &a);
        }
        AttackKind::Rollback => {
            let before = d.sim.blobs_of(d.worker)?.last().cloned().expect("worker seals");
            toggle(&mut d.sim, &d.contract)?;
            advance_blocks(&mut d.sim, 2);
            let worker = d.worker;
            let expected = query(&mut d, worker, patched, variant, window)?.value;
            let rolled = d.sim.restart_with(d.worker, Some(&before))?;
            // Held back from the chain so it keeps the pre-toggle state.
            d.sim.isolate(rolled);
            advance_blocks(&mut d.sim, stale_blocks);
            let a = query(&mut d, rolled, patched, variant, window)?;
            judge(&mut d.sim, expected, &a);
        }
    }
    gatekeeper_audit(&mut d.sim);
    Ok(RunResult::from_sim(d.sim, ctx.attack))
}

/// Identity keys of `workers` freshly launched workers.
fn worker_keys(seed: u64, workers: u64) -> Result<(TeeWorld, Vec<PublicKey>), RunError> {
    let mut world = TeeWorld::new(seed);
    let m = world.register_program(Arc::new(PhalaWorker { workers, patched: false }))?;
    let p = world.add_platform("calibration")?;
    let mut keys = Vec::new();
    for _ in 0..workers {
        let h = world.launch(&p, m)?;
        let id = world.step(h, &Value::map([("op", Value::str("identity"))]))?;
        keys.push(field_pk(&id).expect("identity returns pk"));
    }
    Ok((world, keys))
}

fn chain(world: &TeeWorld, seed: u64, blocks: u64) -> Vec<Digest> {
    let mut ledger = Ledger::new(world.crypto_arc(), preset(), seed);
    let mut hashes = Vec::with_capacity(blocks as usize);
    while (hashes.len() as u64) < blocks {
        hashes.extend(ledger.advance(BLOCK_INTERVAL_MS).iter().map(|b| b.hash));
    }
    hashes
}

/// Mean number of heartbeat senders per block among `workers` workers.
pub fn mean_senders(seed: u64, workers: u64, blocks: u64) -> Result<f64, RunError> {
    let (world, keys) = worker_keys(seed, workers)?;
    let hashes = chain(&world, seed, blocks);
    let total: usize =
        hashes.iter().map(|h| keys.iter().filter(|pk| eligible(world.crypto(), pk, h, workers)).count()).sum();
    Ok(total as f64 / hashes.len() as f64)
}

/// Mean logical time between two heartbeats of one worker among `workers`.
pub fn worker_gap_ms(seed: u64, workers: u64, blocks: u64) -> Result<f64, RunError> {
    let (world, keys) = worker_keys(seed, 1)?;
    let hashes = chain(&world, seed, blocks);
    let beats: Vec<u64> = (0..blocks).filter(|&i| eligible(world.crypto(), &keys[0], &hashes[i as usize], workers)).collect();
    if beats.len() < 2 {
        return Err(RunError::Sim("too few heartbeats to measure a gap".into()));
    }
    let span = beats[beats.len() - 1] - beats[0];
    Ok(span as f64 / (beats.len() - 1) as f64 * BLOCK_INTERVAL_MS as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::protocols::Variant;

    #[test]
    fn saturated_when_few_workers() {
        let c = crate::crypto::ToyCrypto;
        for i in 0..50u64 {
            assert!(eligible(&c, &PublicKey(i), &[i as u8; 32], 20));
            assert!(eligible(&c, &PublicKey(i), &[i as u8; 32], 7));
        }
    }

    #[test]
    fn heartbeat_layout_round_trips() {
        let hb = Heartbeat { session_id: 1, challenge_block: 2, challenge_time: 3, iterations: 4, n_clusters: 5, n_contracts: 6 };
        assert_eq!(hb.to_value(), Value::List((1..=6).map(Value::Uint).collect()));
        assert_eq!(Heartbeat::from_value(&hb.to_value()), Some(hb));
    }

    #[test]
    fn live_worker_reports_toggle() {
        let mut d = deploy(1, preset(), 20, false).unwrap();
        let w = d.worker;
        assert_eq!(query(&mut d, w, false, TimestampVariant::PlainHeight, 1).unwrap().value, Some(false));
        toggle(&mut d.sim, &d.contract).unwrap();
        advance_blocks(&mut d.sim, 1);
        assert_eq!(query(&mut d, w, false, TimestampVariant::PlainHeight, 1).unwrap().value, Some(true));
        assert!(d.sim.ledger.validator::<Gatekeeper>(KIND).unwrap().heartbeats() >= 3);
        assert_eq!(gatekeeper_audit(&mut d.sim), 0);
    }

    #[test]
    fn isolated_clone_goes_unnoticed_but_stale() {
        let r = run(&RunContext::new(1, Variant::Vulnerable, AttackKind::Cloning)).unwrap();
        assert!(r.outcome.succeeded);
        assert_eq!(
            r.outcome.evidence,
            vec![Evidence::StaleResponseAccepted { expected: "true".into(), got: "false".into() }]
        );
        let r = run(&RunContext::new(1, Variant::Patched, AttackKind::Cloning)).unwrap();
        assert!(!r.outcome.succeeded);
        assert!(matches!(r.outcome.evidence[..], [Evidence::RejectStale { .. }]));
    }

    #[test]
    fn rolled_back_worker_misses_heartbeats() {
        let r = run(&RunContext::new(1, Variant::Vulnerable, AttackKind::Rollback)).unwrap();
        assert!(!r.outcome.succeeded);
        assert!(r.outcome.evidence.iter().any(|e| matches!(e, Evidence::MissedHeartbeat { .. })));
    }

    #[test]
    fn wrong_contract_key_cannot_decrypt() {
        let mut d = deploy(2, preset(), 20, false).unwrap();
        let other = contract_public(&mut d.sim, d.worker, "someone-else").unwrap();
        let pending = d.client.build(d.sim.crypto(), d.contract, &other, [1; 32], b"get", [2; AEAD_NONCE_LEN]);
        assert!(d.sim.step(d.worker, &pending.query.to_value()).is_err());
    }

    #[test]
    fn calibrated_to_twenty_senders() {
        let mean = mean_senders(3, 400, 2_000).unwrap();
        assert!((18.5..=21.5).contains(&mean), "{mean}");
        let gap = worker_gap_ms(3, 400, 20_000).unwrap();
        assert!((gap - 45_000.0).abs() <= 4_500.0, "{gap}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn query_round_trip(seed in any::<u64>(), nonce in any::<[u8; 32]>(), raw in proptest::collection::vec(any::<u8>(), 0..48), iv in any::<[u8; 12]>()) {
            let c = crate::crypto::ToyCrypto;
            let client = PhalaClient::new(&c, &c.kdf(&seed.to_be_bytes(), b"t", b"client"));
            let contract = c.keypair_from_seed(&c.kdf(&seed.to_be_bytes(), b"t", b"contract"));
            let addr = address(&c, "flip");
            let p = client.build(&c, addr, &contract.public, nonce, &raw, iv);
            let q = PhalaQuery::from_value(&p.query.to_value()).unwrap();
            prop_assert_eq!(&q, &p.query);
            prop_assert!(c.verify(&q.identity, &q.payload(), &q.signature));
            let k = c.agree(contract.secret(), &q.client_pk);
            let pt = c.aead_decrypt(&k, &q.iv, QUERY_AAD, &q.ciphertext).unwrap();
            prop_assert_eq!(&pt[..32], &addr[..]);
            prop_assert_eq!(&pt[32..64], &nonce[..]);
            prop_assert_eq!(&pt[64..], &raw[..]);
        }
    }
}
