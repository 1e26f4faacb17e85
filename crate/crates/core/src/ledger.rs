//! Simulated layer-one ledger.
//!
//! Blocks appear on a schedule rather than through executed consensus. In
//! `Final` mode there is at most one block per height; in `Eventual` mode a
//! production round may fork into two siblings, and the canonical chain is
//! the longest one with ties going to the lexicographically lowest head hash.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoProvider, Digest};
use crate::enclave::short_hex;
use crate::value::Value;

pub const GENESIS_PARENT: Digest = [0u8; 32];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tx {
    pub kind: String,
    pub payload: Value,
}

impl Tx {
    pub fn new(kind: impl Into<String>, payload: Value) -> Self {
        Tx { kind: kind.into(), payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        Value::map([("kind", Value::str(self.kind.clone())), ("payload", self.payload.clone())]).encode()
    }

    pub fn to_value(&self) -> Value {
        Value::map([("kind", Value::str(self.kind.clone())), ("payload", self.payload.clone())])
    }

    pub fn from_value(v: &Value) -> Option<Tx> {
        Some(Tx { kind: v.get("kind")?.as_str()?.to_string(), payload: v.get("payload")?.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub hash: Digest,
    pub parent_hash: Digest,
    pub txs: Vec<Tx>,
    pub proposer: String,
    pub timestamp_ms: u64,
}

pub fn block_hash(crypto: &dyn CryptoProvider, parent: &Digest, height: u64, txs: &[Tx], proposer: &str) -> Digest {
    let body = Value::map([
        ("parent", Value::bytes(parent)),
        ("height", Value::Uint(height)),
        ("txs", Value::List(txs.iter().map(Tx::to_value).collect())),
        ("proposer", Value::str(proposer)),
    ]);
    crypto.hash(&body.encode())
}

impl Block {
    fn new(crypto: &dyn CryptoProvider, parent: &Digest, height: u64, txs: Vec<Tx>, proposer: &str, now: u64) -> Block {
        Block {
            height,
            hash: block_hash(crypto, parent, height, &txs, proposer),
            parent_hash: *parent,
            txs,
            proposer: proposer.to_string(),
            timestamp_ms: now,
        }
    }

    pub fn recompute_hash(&self, crypto: &dyn CryptoProvider) -> Digest {
        block_hash(crypto, &self.parent_hash, self.height, &self.txs, &self.proposer)
    }

    /// Encoding used when a block is delivered to an enclave.
    pub fn to_value(&self) -> Value {
        Value::map([
            ("height", Value::Uint(self.height)),
            ("hash", Value::bytes(self.hash)),
            ("parent", Value::bytes(self.parent_hash)),
            ("txs", Value::List(self.txs.iter().map(Tx::to_value).collect())),
            ("proposer", Value::str(self.proposer.clone())),
            ("timestamp", Value::Uint(self.timestamp_ms)),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Block> {
        let digest = |key: &str| -> Option<Digest> { v.get(key)?.as_bytes()?.try_into().ok() };
        Some(Block {
            height: v.get("height")?.as_u64()?,
            hash: digest("hash")?,
            parent_hash: digest("parent")?,
            txs: v.get("txs")?.as_list()?.iter().map(Tx::from_value).collect::<Option<Vec<_>>>()?,
            proposer: v.get("proposer")?.as_str()?.to_string(),
            timestamp_ms: v.get("timestamp")?.as_u64()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConsensusMode {
    Final { block_interval_ms: u64 },
    Eventual { block_interval_ms: u64, fork_probability: f64, confirmation_depth: u64 },
}

impl ConsensusMode {
    pub fn permissioned() -> Self {
        ConsensusMode::Final { block_interval_ms: 1_000 }
    }

    pub fn ethereum_like() -> Self {
        ConsensusMode::Eventual { block_interval_ms: 12_000, fork_probability: 0.05, confirmation_depth: 6 }
    }

    pub fn bitcoin_like() -> Self {
        ConsensusMode::Eventual { block_interval_ms: 600_000, fork_probability: 0.05, confirmation_depth: 6 }
    }

    pub fn block_interval_ms(&self) -> u64 {
        match *self {
            ConsensusMode::Final { block_interval_ms } | ConsensusMode::Eventual { block_interval_ms, .. } => {
                block_interval_ms
            }
        }
    }

    pub fn is_final(&self) -> bool {
        matches!(self, ConsensusMode::Final { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
pub enum ValidationError {
    #[error("stale anchor: not the current head")]
    StaleAnchor,
    #[error("predecessor digest differs from committed head")]
    WrongPredecessor,
    #[error("throttling token already spent")]
    ThrottleExceeded,
    #[error("ephemeral id not registered")]
    UnregisteredEphemeralId,
    #[error("role already has an active key")]
    RoleOccupied,
    #[error("signature does not verify")]
    BadSignature,
    #[error("attestation does not verify")]
    BadAttestation,
    #[error("malformed transaction: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("validation failed: {0}")]
    ValidationFailed(ValidationError),
    #[error("validator for kind `{0}` already registered")]
    DuplicateKind(String),
    #[error("no node connections")]
    NoConnections,
    #[error("unknown block")]
    UnknownBlock,
}

/// Read-only chain state visible to validators.
pub struct ChainState<'a> {
    ledger: &'a Ledger,
}

impl ChainState<'_> {
    pub fn head(&self) -> &Block {
        self.ledger.head()
    }

    pub fn canonical_hash_at(&self, height: u64) -> Option<Digest> {
        self.ledger.canonical_at(height).map(|b| b.hash)
    }

    pub fn now_ms(&self) -> u64 {
        self.ledger.now_ms
    }

    pub fn crypto(&self) -> &dyn CryptoProvider {
        self.ledger.crypto.as_ref()
    }

    /// Another kind's validator, for contracts that consult each other.
    pub fn validator<T: 'static>(&self, kind: &str) -> Option<&T> {
        self.ledger.validator(kind)
    }
}

/// Ledger-side contract logic for one transaction kind. Accepting a tx may
/// update validator state.
pub trait TxValidator: Send {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError>;
    fn as_any(&self) -> &dyn Any;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxReceipt {
    pub tx_hash: Digest,
    pub kind: String,
}

/// Structured block record for export.
#[derive(Clone, Debug, Serialize)]
pub struct BlockRecord {
    pub height: u64,
    pub hash: String,
    pub parent: String,
    pub proposer: String,
    pub timestamp_ms: u64,
    pub tx_kinds: Vec<String>,
    pub canonical: bool,
}

pub struct Ledger {
    crypto: Arc<dyn CryptoProvider>,
    mode: ConsensusMode,
    blocks: BTreeMap<Digest, Block>,
    /// Every block hash in production order; forks included.
    order: Vec<Digest>,
    canonical: Vec<Digest>,
    pending: Vec<Tx>,
    validators: BTreeMap<String, Box<dyn TxValidator>>,
    now_ms: u64,
    since_last_block: u64,
    rng: ChaCha20Rng,
}

impl Ledger {
    pub fn new(crypto: Arc<dyn CryptoProvider>, mode: ConsensusMode, seed: u64) -> Self {
        let genesis = Block::new(crypto.as_ref(), &GENESIS_PARENT, 0, Vec::new(), "genesis", 0);
        let rng_seed = crypto.kdf(&seed.to_be_bytes(), b"ledger", b"fork-draws");
        let mut blocks = BTreeMap::new();
        let gh = genesis.hash;
        blocks.insert(gh, genesis);
        Ledger {
            crypto,
            mode,
            blocks,
            order: vec![gh],
            canonical: vec![gh],
            pending: Vec::new(),
            validators: BTreeMap::new(),
            now_ms: 0,
            since_last_block: 0,
            rng: ChaCha20Rng::from_seed(rng_seed),
        }
    }

    pub fn crypto(&self) -> &dyn CryptoProvider {
        self.crypto.as_ref()
    }

    pub fn mode(&self) -> ConsensusMode {
        self.mode
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn head(&self) -> &Block {
        &self.blocks[self.canonical.last().expect("genesis always present")]
    }

    pub fn height(&self) -> u64 {
        self.head().height
    }

    pub fn genesis(&self) -> &Block {
        &self.blocks[&self.canonical[0]]
    }

    pub fn block(&self, hash: &Digest) -> Option<&Block> {
        self.blocks.get(hash)
    }

    pub fn canonical_at(&self, height: u64) -> Option<&Block> {
        self.canonical.get(height as usize).map(|h| &self.blocks[h])
    }

    pub fn is_canonical(&self, hash: &Digest) -> bool {
        self.blocks.get(hash).is_some_and(|b| self.canonical.get(b.height as usize) == Some(hash))
    }

    pub fn canonical_chain(&self) -> ChainView {
        ChainView { blocks: self.canonical.iter().map(|h| self.blocks[h].clone()).collect() }
    }

    /// All blocks in production order, forks included.
    pub fn all_blocks(&self) -> impl Iterator<Item = &Block> {
        self.order.iter().map(|h| &self.blocks[h])
    }

    /// Genesis-to-`tip` chain.
    pub fn chain_to(&self, tip: &Digest) -> Option<ChainView> {
        let mut blocks = Vec::new();
        let mut cur = self.blocks.get(tip)?;
        loop {
            blocks.push(cur.clone());
            if cur.height == 0 {
                break;
            }
            cur = self.blocks.get(&cur.parent_hash)?;
        }
        blocks.reverse();
        Some(ChainView { blocks })
    }

    pub fn pending(&self) -> &[Tx] {
        &self.pending
    }

    pub fn register_tx_validator(&mut self, kind: impl Into<String>, validator: Box<dyn TxValidator>) -> Result<(), LedgerError> {
        let kind = kind.into();
        if self.validators.contains_key(&kind) {
            return Err(LedgerError::DuplicateKind(kind));
        }
        self.validators.insert(kind, validator);
        Ok(())
    }

    pub fn validator<T: 'static>(&self, kind: &str) -> Option<&T> {
        self.validators.get(kind)?.as_any().downcast_ref::<T>()
    }

    /// Runs `tx` through its kind's validator (if any) and queues it for the
    /// next block.
    pub fn submit_tx(&mut self, tx: Tx) -> Result<TxReceipt, LedgerError> {
        if let Some(mut validator) = self.validators.remove(&tx.kind) {
            let verdict = validator.validate(&tx, &ChainState { ledger: self });
            self.validators.insert(tx.kind.clone(), validator);
            verdict.map_err(LedgerError::ValidationFailed)?;
        }
        let receipt = TxReceipt { tx_hash: self.crypto.hash(&tx.encode()), kind: tx.kind.clone() };
        self.pending.push(tx);
        Ok(receipt)
    }

    /// Logical time at which the next scheduled block appears.
    pub fn next_block_at(&self) -> u64 {
        self.now_ms + (self.mode.block_interval_ms() - self.since_last_block)
    }

    /// Moves logical time forward, producing one block per elapsed interval.
    pub fn advance(&mut self, dt_ms: u64) -> Vec<Block> {
        let interval = self.mode.block_interval_ms();
        let mut produced = Vec::new();
        let mut remaining = dt_ms;
        while self.since_last_block + remaining >= interval {
            let step = interval - self.since_last_block;
            remaining -= step;
            self.now_ms += step;
            self.since_last_block = 0;
            produced.extend(self.produce_round());
        }
        self.now_ms += remaining;
        self.since_last_block += remaining;
        produced
    }

    fn produce_round(&mut self) -> Vec<Block> {
        let fork = match self.mode {
            ConsensusMode::Final { .. } => false,
            ConsensusMode::Eventual { fork_probability, .. } => self.rng.gen_bool(fork_probability.clamp(0.0, 1.0)),
        };
        if fork {
            let (a, b) = self.fork_now();
            vec![a, b]
        } else {
            let parent = self.head().hash;
            vec![self.produce_on(&parent, "validator")]
        }
    }

    /// Produces two competing children of the current head. Pending txs go
    /// to the first sibling only.
    ///
    /// # Panics
    /// In `Final` mode, which never forks.
    pub fn fork_now(&mut self) -> (Block, Block) {
        assert!(!self.mode.is_final(), "final consensus never forks");
        let parent = self.head().hash;
        let height = self.head().height + 1;
        let txs = std::mem::take(&mut self.pending);
        let a = Block::new(self.crypto.as_ref(), &parent, height, txs, "validator", self.now_ms);
        let b = Block::new(self.crypto.as_ref(), &parent, height, Vec::new(), "rival", self.now_ms);
        self.insert(a.clone());
        self.insert(b.clone());
        (a, b)
    }

    /// Produces a block on an explicit parent, draining the pending pool.
    pub fn produce_on(&mut self, parent: &Digest, proposer: &str) -> Block {
        let height = self.blocks[parent].height + 1;
        if self.mode.is_final() {
            assert_eq!(parent, &self.head().hash, "final consensus only extends the head");
        }
        let txs = std::mem::take(&mut self.pending);
        let block = Block::new(self.crypto.as_ref(), parent, height, txs, proposer, self.now_ms);
        self.insert(block.clone());
        block
    }

    fn insert(&mut self, block: Block) {
        let hash = block.hash;
        let better = {
            let head = self.head();
            block.height > head.height || (block.height == head.height && block.hash < head.hash)
        };
        let extends_head = block.parent_hash == self.head().hash;
        self.order.push(hash);
        self.blocks.insert(hash, block);
        if better {
            if extends_head {
                self.canonical.push(hash);
            } else {
                self.canonical = self.chain_to(&hash).expect("parent known").blocks.iter().map(|b| b.hash).collect();
            }
        }
    }

    pub fn block_records(&self) -> Vec<BlockRecord> {
        self.all_blocks()
            .map(|b| BlockRecord {
                height: b.height,
                hash: short_hex(&b.hash),
                parent: short_hex(&b.parent_hash),
                proposer: b.proposer.clone(),
                timestamp_ms: b.timestamp_ms,
                tx_kinds: b.txs.iter().map(|t| t.kind.clone()).collect(),
                canonical: self.is_canonical(&b.hash),
            })
            .collect()
    }

    /// Serves a chain view through `connections`; the view adopts the highest
    /// valid chain any connection serves.
    pub fn read_view(&self, connections: &[NodeConnection]) -> Result<ChainView, LedgerError> {
        if connections.is_empty() {
            return Err(LedgerError::NoConnections);
        }
        let mut best: Option<ChainView> = None;
        for conn in connections {
            let Some(served) = self.serve(conn) else { continue };
            if served.verify_links(self.crypto.as_ref()).is_err() {
                continue;
            }
            let take = match &best {
                None => true,
                Some(b) => {
                    served.height() > b.height() || (served.height() == b.height() && served.head().hash < b.head().hash)
                }
            };
            if take {
                best = Some(served);
            }
        }
        Ok(best.unwrap_or_else(|| ChainView { blocks: vec![self.genesis().clone()] }))
    }

    fn serve(&self, conn: &NodeConnection) -> Option<ChainView> {
        if conn.honest {
            return Some(self.canonical_chain());
        }
        match &conn.strategy {
            ServeStrategy::Honest => Some(self.canonical_chain()),
            ServeStrategy::Stale(k) => {
                let mut view = self.canonical_chain();
                let keep = view.blocks.len().saturating_sub(*k as usize).max(1);
                view.blocks.truncate(keep);
                Some(view)
            }
            ServeStrategy::Branch(tip) => self.chain_to(tip),
            ServeStrategy::Silent => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServeStrategy {
    Honest,
    /// Canonical chain minus the last `k` blocks.
    Stale(u64),
    /// The chain ending at the given tip.
    Branch(Digest),
    Silent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeConnection {
    pub node: String,
    pub honest: bool,
    pub strategy: ServeStrategy,
}

impl NodeConnection {
    pub fn honest(node: impl Into<String>) -> Self {
        NodeConnection { node: node.into(), honest: true, strategy: ServeStrategy::Honest }
    }

    pub fn dishonest(node: impl Into<String>, strategy: ServeStrategy) -> Self {
        NodeConnection { node: node.into(), honest: false, strategy }
    }
}

/// A genesis-rooted prefix of some branch, as served to an enclave.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainView {
    pub blocks: Vec<Block>,
}

impl ChainView {
    pub fn head(&self) -> &Block {
        self.blocks.last().expect("views are never empty")
    }

    pub fn height(&self) -> u64 {
        self.head().height
    }

    pub fn hash_at(&self, height: u64) -> Option<Digest> {
        self.blocks.iter().find(|b| b.height == height).map(|b| b.hash)
    }

    pub fn contains(&self, height: u64, hash: &Digest) -> bool {
        self.hash_at(height).as_ref() == Some(hash)
    }

    /// Checks hash recomputation and parent links; returns the first height
    /// where the chain breaks.
    pub fn verify_links(&self, crypto: &dyn CryptoProvider) -> Result<(), u64> {
        let mut prev: Option<&Block> = None;
        for b in &self.blocks {
            if b.recompute_hash(crypto) != b.hash {
                return Err(b.height);
            }
            match prev {
                None if b.height != 0 || b.parent_hash != GENESIS_PARENT => return Err(b.height),
                Some(p) if b.parent_hash != p.hash || b.height != p.height + 1 => return Err(b.height),
                _ => {}
            }
            prev = Some(b);
        }
        Ok(())
    }

    pub fn truncated(&self, k: usize) -> ChainView {
        let keep = self.blocks.len().saturating_sub(k).max(1);
        ChainView { blocks: self.blocks[..keep].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ToyCrypto;

    fn ledger(mode: ConsensusMode) -> Ledger {
        Ledger::new(Arc::new(ToyCrypto), mode, 9)
    }

    struct RejectOdd;

    impl TxValidator for RejectOdd {
        fn validate(&mut self, tx: &Tx, _chain: &ChainState<'_>) -> Result<(), ValidationError> {
            match tx.payload.as_u64() {
                Some(n) if n % 2 == 0 => Ok(()),
                _ => Err(ValidationError::Malformed("odd".into())),
            }
        }

        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    #[test]
    fn final_mode_produces_one_block_per_interval() {
        let mut l = ledger(ConsensusMode::Final { block_interval_ms: 12_000 });
        let blocks = l.advance(36_000);
        assert_eq!(blocks.iter().map(|b| b.height).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(l.advance(0).is_empty());
        // remainder carries over
        assert!(l.advance(6_000).is_empty());
        assert_eq!(l.advance(6_000).len(), 1);
        assert_eq!(l.height(), 4);
    }

    #[test]
    fn submitted_tx_lands_in_next_block() {
        let mut l = ledger(ConsensusMode::permissioned());
        l.submit_tx(Tx::new("heartbeat", Value::Uint(1))).unwrap();
        let b = l.advance(1_000);
        assert_eq!(b[0].txs, vec![Tx::new("heartbeat", Value::Uint(1))]);
        assert!(l.pending().is_empty());
    }

    #[test]
    fn validators_gate_submission() {
        let mut l = ledger(ConsensusMode::permissioned());
        l.register_tx_validator("even", Box::new(RejectOdd)).unwrap();
        assert!(matches!(l.register_tx_validator("even", Box::new(RejectOdd)), Err(LedgerError::DuplicateKind(_))));
        assert!(l.submit_tx(Tx::new("even", Value::Uint(2))).is_ok());
        assert!(matches!(l.submit_tx(Tx::new("even", Value::Uint(3))), Err(LedgerError::ValidationFailed(_))));
        assert!(l.validator::<RejectOdd>("even").is_some());
    }

    #[test]
    fn forced_fork_gives_two_blocks_at_same_height() {
        let mut l = ledger(ConsensusMode::Eventual { block_interval_ms: 100, fork_probability: 1.0, confirmation_depth: 6 });
        let blocks = l.advance(100);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].height, blocks[1].height);
        assert_ne!(blocks[0].hash, blocks[1].hash);
        let lowest = blocks.iter().map(|b| b.hash).min().unwrap();
        assert_eq!(l.head().hash, lowest);
    }

    #[test]
    fn longest_branch_wins() {
        let mut l = ledger(ConsensusMode::Eventual { block_interval_ms: 100, fork_probability: 0.0, confirmation_depth: 6 });
        l.advance(300);
        let (a, b) = l.fork_now();
        let loser = if l.head().hash == a.hash { b } else { a };
        let ext = l.produce_on(&loser.hash, "rival");
        assert_eq!(l.head().hash, ext.hash);
        assert!(l.is_canonical(&loser.hash));
        l.canonical_chain().verify_links(&ToyCrypto).unwrap();
    }

    #[test]
    fn views_follow_connections() {
        let mut l = ledger(ConsensusMode::permissioned());
        l.advance(5_000);
        let stale = |n: &str| NodeConnection::dishonest(n, ServeStrategy::Stale(2));
        assert_eq!(l.read_view(&[]), Err(LedgerError::NoConnections));
        let v = l.read_view(&[stale("a"), stale("b"), stale("c"), NodeConnection::honest("d")]).unwrap();
        assert_eq!(v.head(), l.head());
        let v = l.read_view(&[stale("a"), stale("b")]).unwrap();
        assert_eq!(v.height(), l.height() - 2);
        let v = l.read_view(&[NodeConnection::dishonest("s", ServeStrategy::Silent)]).unwrap();
        assert_eq!(v.height(), 0);
    }

    #[test]
    fn branch_views_diverge_at_equal_height() {
        let mut l = ledger(ConsensusMode::ethereum_like());
        l.submit_tx(Tx::new("pay", Value::Uint(5))).unwrap();
        let (a, b) = l.fork_now();
        let va = l.read_view(&[NodeConnection::dishonest("x", ServeStrategy::Branch(a.hash))]).unwrap();
        let vb = l.read_view(&[NodeConnection::dishonest("y", ServeStrategy::Branch(b.hash))]).unwrap();
        assert_eq!(va.height(), vb.height());
        assert_ne!(va.head().hash, vb.head().hash);
        assert_eq!(va.head().txs.len(), 1);
        assert!(vb.head().txs.is_empty());
    }

    #[test]
    fn spliced_view_is_detected() {
        let mut l = ledger(ConsensusMode::permissioned());
        l.advance(4_000);
        let mut v = l.canonical_chain();
        v.blocks.remove(2);
        assert_eq!(v.verify_links(&ToyCrypto), Err(3));
        let mut v = l.canonical_chain();
        v.blocks[1].txs.push(Tx::new("forged", Value::Unit));
        assert_eq!(v.verify_links(&ToyCrypto), Err(1));
    }

    #[test]
    fn block_value_round_trip() {
        let mut l = ledger(ConsensusMode::permissioned());
        l.submit_tx(Tx::new("k", Value::Int(-1))).unwrap();
        let b = l.advance(1_000).remove(0);
        assert_eq!(Block::from_value(&b.to_value()).unwrap(), b);
    }
}
