//! The untrusted host.
//!
//! [`Simulation`] owns the enclave world and the ledger and exposes exactly
//! the adversary's capabilities: launching, cloning and restarting instances
//! with any historical blob, isolating them from the chain, and delivering,
//! dropping, modifying or choosing among messages. Everything that happens is
//! recorded in an [`EventLog`]; attack verdicts are computed from that log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoProvider, Digest};
use crate::enclave::{Binding, EnclaveError, Handle, Measurement, PlatformId, SealedBlob, TeeWorld};
use crate::ledger::{Block, ConsensusMode, Ledger, LedgerError, Tx, TxReceipt};
use crate::value::Value;

/// Discrete-event queue in logical milliseconds. Ties are broken by
/// insertion order.
#[derive(Debug, Clone)]
pub struct SimClock<E> {
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), E>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        SimClock { now: 0, seq: 0, queue: BTreeMap::new() }
    }
}

impl<E> SimClock<E> {
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Events scheduled in the past fire at the current time.
    pub fn schedule_at(&mut self, at: u64, event: E) {
        let at = at.max(self.now);
        self.queue.insert((at, self.seq), event);
        self.seq += 1;
    }

    pub fn schedule_in(&mut self, delay: u64, event: E) {
        self.schedule_at(self.now + delay, event);
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Pops the earliest event due at or before `until`.
    pub fn pop_due(&mut self, until: u64) -> Option<(u64, E)> {
        let (&(t, seq), _) = self.queue.iter().next()?;
        if t > until {
            return None;
        }
        let event = self.queue.remove(&(t, seq)).expect("key just observed");
        self.now = t;
        Some((t, event))
    }

    pub fn advance_to(&mut self, t: u64) {
        self.now = self.now.max(t);
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    Rollback,
    Cloning,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::Rollback => "rollback",
            AttackKind::Cloning => "cloning",
        })
    }
}

/// Fixed evidence taxonomy. Each variant is either a sign the attack worked,
/// a sign a defense fired, or neither.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    StaleResponseAccepted { expected: String, got: String },
    DivergentResponses { a: String, b: String },
    ProposerAdvantage { p_measured: f64, p_baseline: f64, ci_low: f64, rounds: u64 },
    PreferredOutputSelected { chosen: String, distinct: usize },
    ForkedState { parent: String, children: Vec<String> },
    DuplicateAccepted { what: String, count: usize },
    RejectStale { height: u64, client_head: u64 },
    RejectForkMismatch { height: u64 },
    DecryptionFailed { instance: u64 },
    ViewMismatchDetected { served: u64, cached: u64 },
    StateMismatch { clients: Vec<usize> },
    BadSignature { clients: Vec<usize> },
    CounterMismatch { expected: u64, found: u64 },
    ValidationRejected { reason: String },
    AddressMismatch,
    MissedHeartbeat { worker: String, height: u64 },
    BrokenChain { height: u64 },
    NotInRange { height: u64 },
    NoAck,
    PolicyViolation { detail: String },
}

impl Evidence {
    pub fn indicates_success(&self) -> bool {
        match self {
            Evidence::StaleResponseAccepted { .. }
            | Evidence::DivergentResponses { .. }
            | Evidence::ForkedState { .. }
            | Evidence::DuplicateAccepted { .. } => true,
            Evidence::ProposerAdvantage { p_baseline, ci_low, .. } => ci_low > p_baseline,
            Evidence::PreferredOutputSelected { distinct, .. } => *distinct >= 2,
            _ => false,
        }
    }

    pub fn indicates_defense(&self) -> bool {
        !self.indicates_success()
            && !matches!(self, Evidence::ProposerAdvantage { .. } | Evidence::PreferredOutputSelected { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Evidence::StaleResponseAccepted { .. } => "StaleResponseAccepted",
            Evidence::DivergentResponses { .. } => "DivergentResponses",
            Evidence::ProposerAdvantage { .. } => "ProposerAdvantage",
            Evidence::PreferredOutputSelected { .. } => "PreferredOutputSelected",
            Evidence::ForkedState { .. } => "ForkedState",
            Evidence::DuplicateAccepted { .. } => "DuplicateAccepted",
            Evidence::RejectStale { .. } => "RejectStale",
            Evidence::RejectForkMismatch { .. } => "RejectForkMismatch",
            Evidence::DecryptionFailed { .. } => "DecryptionFailed",
            Evidence::ViewMismatchDetected { .. } => "ViewMismatchDetected",
            Evidence::StateMismatch { .. } => "StateMismatch",
            Evidence::BadSignature { .. } => "BadSignature",
            Evidence::CounterMismatch { .. } => "CounterMismatch",
            Evidence::ValidationRejected { .. } => "ValidationRejected",
            Evidence::AddressMismatch => "AddressMismatch",
            Evidence::MissedHeartbeat { .. } => "MissedHeartbeat",
            Evidence::BrokenChain { .. } => "BrokenChain",
            Evidence::NotInRange { .. } => "NotInRange",
            Evidence::NoAck => "NoAck",
            Evidence::PolicyViolation { .. } => "PolicyViolation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub attack_kind: AttackKind,
    pub applicable: bool,
    pub succeeded: bool,
    pub evidence: Vec<Evidence>,
}

impl AttackOutcome {
    /// An attack succeeds when the log holds success evidence and no defense
    /// fired along the way.
    pub fn from_log(attack_kind: AttackKind, log: &EventLog) -> Self {
        let evidence = log.evidence();
        let succeeded = attack_kind != AttackKind::None
            && evidence.iter().any(Evidence::indicates_success)
            && !evidence.iter().any(Evidence::indicates_defense);
        AttackOutcome { attack_kind, applicable: true, succeeded, evidence }
    }

    pub fn not_applicable(attack_kind: AttackKind) -> Self {
        AttackOutcome { attack_kind, applicable: false, succeeded: false, evidence: Vec::new() }
    }

    pub fn summary(&self) -> String {
        let mut labels: Vec<&str> = Vec::new();
        for l in self.evidence.iter().map(Evidence::label) {
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        labels.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Launch { handle: u64, platform: String, measurement: String },
    Clone { source: u64, clone: u64, blob_seq: Option<u64> },
    Restart { old: u64, new: u64, blob_seq: Option<u64> },
    Kill { handle: u64 },
    Isolate { handle: u64 },
    Unisolate { handle: u64, replayed: usize },
    Input { handle: u64, label: String, input: String },
    Output { handle: u64, label: String, output: String },
    Fault { handle: u64, label: String, fault: String },
    Drop { message: String },
    Modify { message: String, mutation: String },
    Select { chosen: usize, candidates: Vec<String> },
    TxSubmitted { kind: String, tx: String },
    TxRejected { kind: String, reason: String },
    Block { height: u64, hash: String, parent: String, txs: usize, proposer: String },
    Client { client: String, verdict: String },
    Round { index: u64, adversary_won: bool },
    FinalState { instance: String, digest: String, state: String },
    Evidence { evidence: Evidence },
    Note { text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub seq: u64,
    pub t_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn push(&mut self, t_ms: u64, event: Event) {
        let seq = self.entries.len() as u64;
        self.entries.push(LogEntry { seq, t_ms, event });
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn evidence(&self) -> Vec<Evidence> {
        self.entries
            .iter()
            .filter_map(|e| match &e.event {
                Event::Evidence { evidence } => Some(evidence.clone()),
                _ => None,
            })
            .collect()
    }

    /// `(rounds, adversary wins)` over all logged rounds.
    pub fn round_tally(&self) -> (u64, u64) {
        self.entries.iter().fold((0, 0), |(n, w), e| match e.event {
            Event::Round { adversary_won, .. } => (n + 1, w + u64::from(adversary_won)),
            _ => (n, w),
        })
    }

    pub fn final_states(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .filter_map(|e| match &e.event {
                Event::FinalState { instance, digest, .. } => Some((instance.clone(), digest.clone())),
                _ => None,
            })
            .collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("log entries always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self, crypto: &dyn CryptoProvider) -> Digest {
        crypto.hash(self.to_jsonl().as_bytes())
    }
}

/// Picks among candidate outputs collected from several instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    First,
    Min,
    Max,
    Equals(i64),
    #[serde(skip)]
    FieldEquals(String, Value),
    #[serde(skip)]
    MinField(String),
}

impl Selector {
    fn pick(&self, candidates: &[Value]) -> usize {
        let field = |v: &Value, k: &str| v.get(k).cloned().unwrap_or_default();
        let found = match self {
            Selector::First => Some(0),
            Selector::Min => candidates.iter().enumerate().min_by(|a, b| a.1.cmp(b.1)).map(|(i, _)| i),
            Selector::Max => candidates.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i),
            Selector::Equals(x) => candidates.iter().position(|v| v.as_i64() == Some(*x)),
            Selector::FieldEquals(k, x) => candidates.iter().position(|v| v.get(k) == Some(x)),
            Selector::MinField(k) => {
                candidates.iter().enumerate().min_by(|a, b| field(a.1, k).cmp(&field(b.1, k))).map(|(i, _)| i)
            }
        };
        found.unwrap_or(0)
    }
}

/// Host-side message tampering. The host holds no enclave keys, so these
/// only ever rewrite bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Flip one bit of the bytes field at `path`.
    FlipBit { path: Vec<String>, bit: usize },
    /// Overwrite the field at `path`.
    #[serde(skip)]
    Set { path: Vec<String>, value: Value },
    /// Add to an integer input.
    Add(i64),
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mutation::FlipBit { path, bit } => write!(f, "flip {}[bit {bit}]", path.join(".")),
            Mutation::Set { path, value } => write!(f, "set {} = {value}", path.join(".")),
            Mutation::Add(d) => write!(f, "add {d}"),
        }
    }
}

impl Mutation {
    pub fn apply(&self, message: &Value) -> Value {
        let mut out = message.clone();
        match self {
            Mutation::FlipBit { path, bit } => {
                if let Some(Value::Bytes(b)) = field_mut(&mut out, path) {
                    if !b.is_empty() {
                        let i = (bit / 8) % b.len();
                        b[i] ^= 1 << (bit % 8);
                    }
                }
            }
            Mutation::Set { path, value } => {
                if let Some(slot) = field_mut(&mut out, path) {
                    *slot = value.clone();
                }
            }
            Mutation::Add(d) => {
                if let Value::Int(i) = &mut out {
                    *i = i.wrapping_add(*d);
                }
            }
        }
        out
    }
}

fn field_mut<'a>(v: &'a mut Value, path: &[String]) -> Option<&'a mut Value> {
    path.iter().try_fold(v, |cur, key| cur.get_mut(key))
}

#[derive(Debug, Error)]
pub enum HostError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("unknown instance name `{0}`")]
    UnknownName(String),
    #[error("no sealed blob matches {0}")]
    NoSuchBlob(String),
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub handle: Handle,
    pub label: String,
    pub result: Result<Value, EnclaveError>,
}

#[derive(Clone, Debug)]
struct Scheduled {
    to: Handle,
    label: String,
    input: Value,
}

/// One scenario's world: enclaves, ledger, event log and the host's own
/// randomness (used for clients and adversary choices).
pub struct Simulation {
    pub world: TeeWorld,
    pub ledger: Ledger,
    log: EventLog,
    clock: SimClock<Scheduled>,
    followers: BTreeSet<Handle>,
    isolated: BTreeSet<Handle>,
    backlog: BTreeMap<Handle, Vec<Block>>,
    host_rng: ChaCha20Rng,
    seed: u64,
}

impl Simulation {
    pub fn new(seed: u64, mode: ConsensusMode) -> Self {
        let world = TeeWorld::new(seed);
        let ledger = Ledger::new(world.crypto_arc(), mode, seed);
        let host_seed = world.crypto().kdf(&seed.to_be_bytes(), b"host", b"rng");
        Simulation {
            world,
            ledger,
            log: EventLog::default(),
            clock: SimClock::default(),
            followers: BTreeSet::new(),
            isolated: BTreeSet::new(),
            backlog: BTreeMap::new(),
            host_rng: ChaCha20Rng::from_seed(host_seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> u64 {
        self.ledger.now_ms()
    }

    pub fn crypto(&self) -> &dyn CryptoProvider {
        self.world.crypto()
    }

    pub fn host_rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.host_rng
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn record(&mut self, event: Event) {
        let t = self.now();
        self.log.push(t, event);
    }

    pub fn evidence(&mut self, evidence: Evidence) {
        self.record(Event::Evidence { evidence });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.record(Event::Note { text: text.into() });
    }

    pub fn outcome(&self, kind: AttackKind) -> AttackOutcome {
        AttackOutcome::from_log(kind, &self.log)
    }

    pub fn launch(&mut self, platform: &PlatformId, measurement: Measurement) -> Result<Handle, HostError> {
        let h = self.world.launch(platform, measurement)?;
        self.record(Event::Launch { handle: h.0, platform: platform.0.clone(), measurement: measurement.to_string() });
        Ok(h)
    }

    /// Launches another instance of `source`'s program on the same platform.
    /// With a blob the clone starts from that sealed state, otherwise from
    /// `init()`. Follower status is inherited.
    pub fn clone_instance(&mut self, source: Handle, blob: Option<&SealedBlob>) -> Result<Handle, HostError> {
        if !self.world.is_live(source) {
            return Err(EnclaveError::DeadInstance(source).into());
        }
        let Binding { platform, measurement } = self.world.binding_of(source)?;
        let h = match blob {
            Some(b) => self.world.launch_from_blob(&platform, measurement, b)?,
            None => self.world.launch(&platform, measurement)?,
        };
        if self.followers.contains(&source) {
            self.followers.insert(h);
        }
        self.record(Event::Clone { source: source.0, clone: h.0, blob_seq: blob.map(|b| b.seq_hint) });
        Ok(h)
    }

    /// Kills `old` and launches a replacement from `blob` (or cold).
    pub fn restart_with(&mut self, old: Handle, blob: Option<&SealedBlob>) -> Result<Handle, HostError> {
        let Binding { platform, measurement } = self.world.binding_of(old)?;
        self.world.kill(old)?;
        let h = match blob {
            Some(b) => self.world.launch_from_blob(&platform, measurement, b)?,
            None => self.world.launch(&platform, measurement)?,
        };
        if self.followers.remove(&old) {
            self.followers.insert(h);
        }
        self.isolated.remove(&old);
        self.record(Event::Restart { old: old.0, new: h.0, blob_seq: blob.map(|b| b.seq_hint) });
        Ok(h)
    }

    pub fn kill(&mut self, h: Handle) -> Result<(), HostError> {
        self.world.kill(h)?;
        self.followers.remove(&h);
        self.record(Event::Kill { handle: h.0 });
        Ok(())
    }

    /// Blobs sealed under `h`'s binding, oldest first.
    pub fn blobs_of(&self, h: Handle) -> Result<Vec<SealedBlob>, HostError> {
        Ok(self.world.blobs_for(&self.world.binding_of(h)?))
    }

    /// Subscribes `h` to every canonical block produced from now on.
    pub fn follow(&mut self, h: Handle) {
        self.followers.insert(h);
    }

    pub fn isolate(&mut self, h: Handle) {
        self.isolated.insert(h);
        self.record(Event::Isolate { handle: h.0 });
    }

    pub fn is_isolated(&self, h: Handle) -> bool {
        self.isolated.contains(&h)
    }

    /// Reconnects `h`; with `replay` the blocks it missed are delivered in
    /// order first.
    pub fn unisolate(&mut self, h: Handle, replay: bool) -> Vec<StepRecord> {
        self.isolated.remove(&h);
        let missed = self.backlog.remove(&h).unwrap_or_default();
        let replayed = if replay { missed.len() } else { 0 };
        self.record(Event::Unisolate { handle: h.0, replayed });
        if !replay {
            return Vec::new();
        }
        missed.iter().map(|b| self.step_labeled(h, "block", &block_input(b))).collect()
    }

    /// Delivers `input` to `h` now and logs input and result.
    pub fn step(&mut self, h: Handle, input: &Value) -> Result<Value, EnclaveError> {
        self.step_labeled(h, "deliver", input).result
    }

    pub fn step_labeled(&mut self, h: Handle, label: &str, input: &Value) -> StepRecord {
        self.record(Event::Input { handle: h.0, label: label.to_string(), input: input.to_string() });
        let result = self.world.step(h, input);
        match &result {
            Ok(out) => self.record(Event::Output { handle: h.0, label: label.to_string(), output: out.to_string() }),
            Err(e) => self.record(Event::Fault { handle: h.0, label: label.to_string(), fault: e.to_string() }),
        }
        StepRecord { handle: h, label: label.to_string(), result }
    }

    /// Queues `input` for delivery to `h` after `delay_ms` of logical time.
    pub fn send(&mut self, h: Handle, label: &str, input: Value, delay_ms: u64) {
        let now = self.now();
        self.clock.advance_to(now);
        self.clock.schedule_at(now + delay_ms, Scheduled { to: h, label: label.to_string(), input });
    }

    pub fn drop_message(&mut self, message: &Value) {
        self.record(Event::Drop { message: message.to_string() });
    }

    pub fn modify(&mut self, message: &Value, mutation: &Mutation) -> Value {
        self.record(Event::Modify { message: message.to_string(), mutation: mutation.to_string() });
        mutation.apply(message)
    }

    /// Picks one candidate per `selector`, logging the choice as evidence.
    pub fn select_output(&mut self, candidates: &[Value], selector: &Selector) -> (usize, Value) {
        assert!(!candidates.is_empty(), "select_output needs candidates");
        let i = selector.pick(candidates);
        let distinct = candidates.iter().collect::<BTreeSet<_>>().len();
        self.record(Event::Select { chosen: i, candidates: candidates.iter().map(|c| c.to_string()).collect() });
        self.evidence(Evidence::PreferredOutputSelected { chosen: candidates[i].to_string(), distinct });
        (i, candidates[i].clone())
    }

    pub fn submit_tx(&mut self, tx: Tx) -> Result<TxReceipt, LedgerError> {
        let kind = tx.kind.clone();
        let shown = tx.payload.to_string();
        match self.ledger.submit_tx(tx) {
            Ok(r) => {
                self.record(Event::TxSubmitted { kind, tx: shown });
                Ok(r)
            }
            Err(e) => {
                self.record(Event::TxRejected { kind, reason: e.to_string() });
                Err(e)
            }
        }
    }

    /// Moves time forward by `dt_ms`, interleaving block production and
    /// queued deliveries in time order (blocks first on ties). Followers that
    /// are not isolated receive each new canonical block.
    pub fn advance_time(&mut self, dt_ms: u64) -> Vec<StepRecord> {
        let target = self.now() + dt_ms;
        let mut records = Vec::new();
        loop {
            let next_block = self.ledger.next_block_at();
            let next_event = self.clock.peek_time().filter(|&t| t <= target);
            if next_block <= target && next_event.is_none_or(|t| next_block <= t) {
                let dt = next_block - self.now();
                let blocks = self.ledger.advance(dt);
                self.clock.advance_to(self.now());
                records.extend(self.publish(blocks));
            } else if let Some(t) = next_event {
                let dt = t - self.now();
                self.ledger.advance(dt);
                let (_, s) = self.clock.pop_due(t).expect("peeked");
                records.push(self.step_labeled(s.to, &s.label, &s.input));
            } else {
                let dt = target - self.now();
                self.ledger.advance(dt);
                self.clock.advance_to(target);
                return records;
            }
        }
    }

    /// Advances to just after the next block.
    pub fn next_block(&mut self) -> Vec<StepRecord> {
        let dt = self.ledger.next_block_at() - self.now();
        self.advance_time(dt)
    }

    fn publish(&mut self, blocks: Vec<Block>) -> Vec<StepRecord> {
        let mut records = Vec::new();
        for b in &blocks {
            self.log_block(b);
        }
        let canonical: Vec<Block> = blocks.into_iter().filter(|b| self.ledger.is_canonical(&b.hash)).collect();
        for b in &canonical {
            let input = block_input(b);
            for h in self.followers.clone() {
                if !self.world.is_live(h) {
                    continue;
                }
                if self.isolated.contains(&h) {
                    self.backlog.entry(h).or_default().push(b.clone());
                } else {
                    records.push(self.step_labeled(h, "block", &input));
                }
            }
        }
        records
    }

    pub fn log_block(&mut self, b: &Block) {
        self.record(Event::Block {
            height: b.height,
            hash: hex::encode(b.hash),
            parent: hex::encode(b.parent_hash),
            txs: b.txs.len(),
            proposer: b.proposer.clone(),
        });
    }
}

/// Canonical input wrapping a block for a ledger-following enclave.
pub fn block_input(b: &Block) -> Value {
    Value::map([("op", Value::str("block")), ("block", b.to_value())])
}

/// Which sealed blob a scripted restart uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobChoice {
    /// Cold start from `init()`.
    None,
    /// The oldest blob for the binding.
    Initial,
    Latest,
    /// The n-th blob, oldest first.
    Index(usize),
    /// The blob `n` places before the latest.
    Back(usize),
}

/// Guards evaluated against what the log already holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Condition {
    OutputEquals { instance: String, value: i64 },
    Faulted { instance: String },
    Live { instance: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HostAction {
    Launch { name: String, platform: String },
    Restart { name: String, blob: BlobChoice },
    Clone { source: String, name: String, #[serde(default)] blob: Option<BlobChoice> },
    Isolate { name: String },
    Unisolate { name: String, #[serde(default)] replay: bool },
    Deliver { to: String, input: i64 },
    Drop { input: i64 },
    Modify { to: String, input: i64, mutation: Mutation },
    SelectOutput { candidates: Vec<String>, selector: Selector },
    SubmitTx { kind: String, payload: i64 },
    AdvanceTime { ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    #[serde(rename = "do")]
    pub action: HostAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Condition>,
}

impl From<HostAction> for ScriptStep {
    fn from(action: HostAction) -> Self {
        ScriptStep { action, when: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScript {
    pub kind: AttackKind,
    pub steps: Vec<ScriptStep>,
}

/// Runs a named-instance script against one program whose inputs and
/// outputs are integers. Every state transition is recorded as an edge
/// between state digests; two different successors of one digest are logged
/// as [`Evidence::ForkedState`]. Final states of all live named instances are
/// logged at the end.
pub struct ScriptRunner {
    measurement: Measurement,
    names: BTreeMap<String, Handle>,
    last_output: BTreeMap<String, Result<i64, String>>,
    edges: BTreeMap<Digest, BTreeSet<Digest>>,
}

impl ScriptRunner {
    pub fn new(measurement: Measurement) -> Self {
        ScriptRunner { measurement, names: BTreeMap::new(), last_output: BTreeMap::new(), edges: BTreeMap::new() }
    }

    pub fn handle(&self, name: &str) -> Result<Handle, HostError> {
        self.names.get(name).copied().ok_or_else(|| HostError::UnknownName(name.to_string()))
    }

    pub fn run(&mut self, sim: &mut Simulation, script: &AttackScript) -> Result<(), HostError> {
        for step in &script.steps {
            if let Some(cond) = &step.when {
                if !self.holds(sim, cond)? {
                    sim.note(format!("skipped: condition {cond:?} not met"));
                    continue;
                }
            }
            self.apply(sim, &step.action)?;
        }
        for (name, &h) in &self.names {
            if sim.world.is_live(h) {
                let digest = hex::encode(sim.world.state_digest(h)?);
                let state = sim.world.state(h)?.to_string();
                sim.record(Event::FinalState { instance: name.clone(), digest, state });
            }
        }
        Ok(())
    }

    fn holds(&self, sim: &Simulation, cond: &Condition) -> Result<bool, HostError> {
        Ok(match cond {
            Condition::OutputEquals { instance, value } => {
                self.last_output.get(instance) == Some(&Ok(*value))
            }
            Condition::Faulted { instance } => matches!(self.last_output.get(instance), Some(Err(_))),
            Condition::Live { instance } => sim.world.is_live(self.handle(instance)?),
        })
    }

    fn pick_blob(&self, sim: &Simulation, h: Handle, choice: &BlobChoice) -> Result<Option<SealedBlob>, HostError> {
        let blobs = sim.blobs_of(h)?;
        let missing = || HostError::NoSuchBlob(format!("{choice:?}"));
        Ok(match choice {
            BlobChoice::None => None,
            BlobChoice::Initial => Some(blobs.first().ok_or_else(missing)?.clone()),
            BlobChoice::Latest => Some(blobs.last().ok_or_else(missing)?.clone()),
            BlobChoice::Index(i) => Some(blobs.get(*i).ok_or_else(missing)?.clone()),
            BlobChoice::Back(k) => {
                let i = blobs.len().checked_sub(1 + k).ok_or_else(missing)?;
                Some(blobs[i].clone())
            }
        })
    }

    fn deliver(&mut self, sim: &mut Simulation, to: &str, input: i64) -> Result<(), HostError> {
        let h = self.handle(to)?;
        let before = sim.world.state_digest(h)?;
        let result = sim.step(h, &Value::Int(input));
        let after = sim.world.state_digest(h)?;
        self.last_output.insert(
            to.to_string(),
            result.as_ref().map(|v| v.as_i64().unwrap_or_default()).map_err(|e| e.to_string()),
        );
        if result.is_ok() {
            let children = self.edges.entry(before).or_default();
            children.insert(after);
            if children.len() == 2 {
                let children = children.iter().map(hex::encode).collect();
                sim.evidence(Evidence::ForkedState { parent: hex::encode(before), children });
            }
        }
        Ok(())
    }

    fn apply(&mut self, sim: &mut Simulation, action: &HostAction) -> Result<(), HostError> {
        match action {
            HostAction::Launch { name, platform } => {
                let p = PlatformId(platform.clone());
                // DuplicatePlatform just means an earlier step created it.
                let _ = sim.world.add_platform(platform.clone());
                let h = sim.launch(&p, self.measurement)?;
                self.names.insert(name.clone(), h);
            }
            HostAction::Restart { name, blob } => {
                let h = self.handle(name)?;
                let blob = self.pick_blob(sim, h, blob)?;
                let new = sim.restart_with(h, blob.as_ref())?;
                self.names.insert(name.clone(), new);
            }
            HostAction::Clone { source, name, blob } => {
                let h = self.handle(source)?;
                let blob = match blob {
                    Some(choice) => self.pick_blob(sim, h, choice)?,
                    None => None,
                };
                let c = sim.clone_instance(h, blob.as_ref())?;
                self.names.insert(name.clone(), c);
            }
            HostAction::Isolate { name } => {
                let h = self.handle(name)?;
                sim.isolate(h);
            }
            HostAction::Unisolate { name, replay } => {
                let h = self.handle(name)?;
                sim.unisolate(h, *replay);
            }
            HostAction::Deliver { to, input } => self.deliver(sim, to, *input)?,
            HostAction::Drop { input } => sim.drop_message(&Value::Int(*input)),
            HostAction::Modify { to, input, mutation } => {
                let modified = sim.modify(&Value::Int(*input), mutation);
                self.deliver(sim, to, modified.as_i64().unwrap_or_default())?;
            }
            HostAction::SelectOutput { candidates, selector } => {
                let values: Vec<Value> = candidates
                    .iter()
                    .filter_map(|n| self.last_output.get(n).and_then(|r| r.as_ref().ok()).map(|&i| Value::Int(i)))
                    .collect();
                if !values.is_empty() {
                    sim.select_output(&values, selector);
                }
            }
            HostAction::SubmitTx { kind, payload } => {
                // Rejections are already in the log.
                let _ = sim.submit_tx(Tx::new(kind.clone(), Value::Int(*payload)));
            }
            HostAction::AdvanceTime { ms } => {
                sim.advance_time(*ms);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::test_programs::Counter;
    use std::sync::Arc;

    fn sim_with_counter() -> (Simulation, PlatformId, Measurement) {
        let mut sim = Simulation::new(5, ConsensusMode::permissioned());
        let p = sim.world.add_platform("p0").unwrap();
        let m = sim.world.register_program(Arc::new(Counter { name: "ctr", start: 0, seal: true })).unwrap();
        (sim, p, m)
    }

    #[test]
    fn clock_orders_by_time_then_insertion() {
        let mut c = SimClock::default();
        c.schedule_at(10, "b");
        c.schedule_at(5, "a");
        c.schedule_at(10, "c");
        let order: Vec<_> = std::iter::from_fn(|| c.pop_due(100)).collect();
        assert_eq!(order, vec![(5, "a"), (10, "b"), (10, "c")]);
        c.schedule_at(1, "late");
        assert_eq!(c.pop_due(100), Some((10, "late")));
    }

    #[test]
    fn clone_preserves_binding_and_original() {
        let (mut sim, p, m) = sim_with_counter();
        let e = sim.launch(&p, m).unwrap();
        sim.step(e, &Value::str("increment")).unwrap();
        let c = sim.clone_instance(e, None).unwrap();
        assert_eq!(sim.world.binding_of(e).unwrap(), sim.world.binding_of(c).unwrap());
        assert_eq!(sim.world.state(e).unwrap(), &Value::Int(1));
        assert_eq!(sim.world.state(c).unwrap(), &Value::Int(0));
        let blob = sim.blobs_of(e).unwrap().pop().unwrap();
        assert!(sim.world.unseal(c, &blob).is_ok());
        sim.kill(e).unwrap();
        assert!(sim.clone_instance(e, None).is_err());
    }

    #[test]
    fn restart_with_older_blob_rolls_back() {
        let (mut sim, p, m) = sim_with_counter();
        let e = sim.launch(&p, m).unwrap();
        sim.step(e, &Value::str("increment")).unwrap();
        sim.step(e, &Value::str("increment")).unwrap();
        let first = sim.blobs_of(e).unwrap()[0].clone();
        let e2 = sim.restart_with(e, Some(&first)).unwrap();
        assert!(!sim.world.is_live(e));
        assert_eq!(sim.world.state(e2).unwrap(), &Value::Int(1));
        let cold = sim.restart_with(e2, None).unwrap();
        assert_eq!(sim.world.state(cold).unwrap(), &Value::Int(0));
    }

    #[test]
    fn isolated_followers_miss_blocks_until_replayed() {
        let (mut sim, p, m) = sim_with_counter();
        let a = sim.launch(&p, m).unwrap();
        let b = sim.launch(&p, m).unwrap();
        sim.follow(a);
        sim.follow(b);
        sim.isolate(b);
        let recs = sim.advance_time(3_000);
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.handle == a));
        let replayed = sim.unisolate(b, true);
        assert_eq!(replayed.len(), 3);
    }

    #[test]
    fn scheduled_deliveries_interleave_with_blocks() {
        let (mut sim, p, m) = sim_with_counter();
        let a = sim.launch(&p, m).unwrap();
        sim.follow(a);
        sim.send(a, "late", Value::str("get"), 1_500);
        sim.send(a, "early", Value::str("get"), 1_000);
        let labels: Vec<_> = sim.advance_time(2_000).into_iter().map(|r| r.label).collect();
        assert_eq!(labels, vec!["block", "early", "late", "block"]);
        assert_eq!(sim.now(), 2_000);
    }

    #[test]
    fn select_output_examples() {
        let mut sim = Simulation::new(1, ConsensusMode::permissioned());
        let lottery = [Value::map([("winner", Value::Uint(1))]), Value::map([("winner", Value::Uint(2))])];
        let (i, _) = sim.select_output(&lottery.iter().rev().cloned().collect::<Vec<_>>(), &Selector::FieldEquals("winner".into(), Value::Uint(1)));
        assert_eq!(i, 1);
        let rollups = [Value::map([("nonce", Value::Uint(7))]), Value::map([("nonce", Value::Uint(3))])];
        let (_, v) = sim.select_output(&rollups, &Selector::MinField("nonce".into()));
        assert_eq!(v.get("nonce"), Some(&Value::Uint(3)));
        assert!(sim.log().evidence().iter().all(|e| e.indicates_success()));
    }

    #[test]
    fn modification_only_rewrites_bytes() {
        let msg = Value::map([("ct", Value::bytes([0u8, 0, 0]))]);
        let m = Mutation::FlipBit { path: vec!["ct".into()], bit: 9 };
        assert_eq!(m.apply(&msg).get("ct"), Some(&Value::bytes([0u8, 2, 0])));
    }

    #[test]
    fn outcome_requires_success_without_defense() {
        let mut log = EventLog::default();
        log.push(0, Event::Evidence { evidence: Evidence::StaleResponseAccepted { expected: "2".into(), got: "1".into() } });
        assert!(AttackOutcome::from_log(AttackKind::Rollback, &log).succeeded);
        assert!(!AttackOutcome::from_log(AttackKind::None, &log).succeeded);
        log.push(1, Event::Evidence { evidence: Evidence::MissedHeartbeat { worker: "w".into(), height: 3 } });
        assert!(!AttackOutcome::from_log(AttackKind::Rollback, &log).succeeded);
    }

    #[test]
    fn log_is_json_lines() {
        let (mut sim, p, m) = sim_with_counter();
        sim.launch(&p, m).unwrap();
        sim.advance_time(1_000);
        let text = sim.log().to_jsonl();
        assert_eq!(text.lines().count(), sim.log().entries().len());
        assert!(text.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    }
}
