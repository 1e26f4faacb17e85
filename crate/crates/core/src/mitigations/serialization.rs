use std::any::Any;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{CryptoProvider, Digest, Keypair, PublicKey, Signature};
use crate::ledger::{Block, ChainState, ChainView, LedgerError, Tx, TxReceipt, TxValidator, ValidationError};
use crate::host::Simulation;
use crate::enclave::ProgramFault;
use crate::value::Value;

pub const DEFAULT_FRESHNESS_WINDOW: u64 = 1;
/// Heartbeat acknowledgments stay valid for this many periods.
pub const ACK_PERIODS: u64 = 2;
pub const STATE_COMMIT_KIND: &str = "state-commit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimestampVariant {
    PlainHeight,
    HeightAndHash,
    Range { min: u64, max: u64 },
    HeartbeatAck { period_blocks: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerializationOption {
    ReplayRecovery,
    Timestamping(TimestampVariant),
    StateOnLedger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SerializationPolicy {
    pub option: SerializationOption,
    pub freshness_window: u64,
}

impl SerializationPolicy {
    pub fn new(option: SerializationOption) -> Self {
        SerializationPolicy { option, freshness_window: DEFAULT_FRESHNESS_WINDOW }
    }
}

/// Rebuilds state by folding `apply` over every relevant tx of `blocks`,
/// genesis to head, after checking the hash chain. Returns the height
/// reached.
pub fn replay_recover(
    crypto: &dyn CryptoProvider,
    blocks: &[Block],
    relevant: impl Fn(&Tx) -> bool,
    mut apply: impl FnMut(&Tx) -> Result<(), ProgramFault>,
) -> Result<u64, ProgramFault> {
    let view = ChainView { blocks: blocks.to_vec() };
    if blocks.is_empty() {
        return Err(ProgramFault::BrokenChain(0));
    }
    view.verify_links(crypto).map_err(ProgramFault::BrokenChain)?;
    for tx in blocks.iter().flat_map(|b| &b.txs).filter(|t| relevant(t)) {
        apply(tx)?;
    }
    Ok(view.height())
}

pub fn blocks_from_value(v: &Value) -> Option<Vec<Block>> {
    v.as_list()?.iter().map(Block::from_value).collect()
}

pub fn blocks_to_value(blocks: &[Block]) -> Value {
    Value::List(blocks.iter().map(Block::to_value).collect())
}

/// A response bound to the last block the enclave processed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestampedResponse {
    pub payload: Value,
    pub height: u64,
    pub block_hash: Option<Digest>,
    pub signature: Signature,
}

impl TimestampedResponse {
    /// Signed layout: `[payload, height, block_hash | unit]`.
    pub fn signed_bytes(payload: &Value, height: u64, block_hash: Option<&Digest>) -> Vec<u8> {
        Value::List(vec![payload.clone(), Value::Uint(height), block_hash.map_or(Value::Unit, Value::bytes)]).encode()
    }

    pub fn new(crypto: &dyn CryptoProvider, key: &Keypair, payload: Value, height: u64, block_hash: Option<Digest>) -> Self {
        let signature = crypto.sign(key, &Self::signed_bytes(&payload, height, block_hash.as_ref()));
        TimestampedResponse { payload, height, block_hash, signature }
    }

    pub fn verify(&self, crypto: &dyn CryptoProvider, pk: &PublicKey) -> bool {
        crypto.verify(pk, &Self::signed_bytes(&self.payload, self.height, self.block_hash.as_ref()), &self.signature)
    }

    pub fn to_value(&self) -> Value {
        Value::List(vec![
            self.payload.clone(),
            Value::Uint(self.height),
            self.block_hash.map_or(Value::Unit, Value::bytes),
            Value::bytes(self.signature.to_bytes()),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let [payload, height, hash, sig] = v.as_list()? else { return None };
        Some(TimestampedResponse {
            payload: payload.clone(),
            height: height.as_u64()?,
            block_hash: match hash {
                Value::Unit => None,
                h => Some(h.as_bytes()?.try_into().ok()?),
            },
            signature: Signature::from_bytes(sig.as_bytes()?.try_into().ok()?),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_value().encode()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ClientVerdict {
    Accept,
    RejectStale { height: u64, client_head: u64 },
    RejectForkMismatch { height: u64 },
}

/// Client-side freshness check against the client's own view.
pub fn client_verify(response: &TimestampedResponse, view: &ChainView, variant: TimestampVariant, window: u64) -> ClientVerdict {
    let head = view.height();
    if response.height + window < head {
        return ClientVerdict::RejectStale { height: response.height, client_head: head };
    }
    if variant == TimestampVariant::HeightAndHash {
        let on_chain = response.block_hash.is_some_and(|h| view.contains(response.height, &h));
        if !on_chain {
            return ClientVerdict::RejectForkMismatch { height: response.height };
        }
    }
    ClientVerdict::Accept
}

/// Enclave-side serve condition for the `Range` and `HeartbeatAck`
/// variants. `last_ack` is the height at which the latest heartbeat was
/// acknowledged on the ledger.
pub fn serve_check(variant: TimestampVariant, height: u64, last_ack: Option<u64>) -> Result<(), ProgramFault> {
    match variant {
        TimestampVariant::Range { min, max } if !(min..=max).contains(&height) => {
            Err(ProgramFault::NotInRange { height, min, max })
        }
        TimestampVariant::HeartbeatAck { period_blocks } => match last_ack {
            Some(ack) if height.saturating_sub(ack) <= ACK_PERIODS * period_blocks => Ok(()),
            _ => Err(ProgramFault::NoAck),
        },
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateCommit {
    pub contract: String,
    pub prev: Digest,
    pub new: Digest,
    pub anchor: Digest,
}

impl StateCommit {
    /// Layout: `[contract, prev, new, anchor]`.
    pub fn to_value(&self) -> Value {
        Value::List(vec![
            Value::str(self.contract.clone()),
            Value::bytes(self.prev),
            Value::bytes(self.new),
            Value::bytes(self.anchor),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let [c, p, n, a] = v.as_list()? else { return None };
        let d = |x: &Value| -> Option<Digest> { x.as_bytes()?.try_into().ok() };
        Some(StateCommit { contract: c.as_str()?.to_string(), prev: d(p)?, new: d(n)?, anchor: d(a)? })
    }
}

/// Ledger contract serializing each registered contract's state chain.
#[derive(Debug, Default)]
pub struct StateCommitValidator {
    window: u64,
    heads: BTreeMap<String, Digest>,
    genesis: BTreeMap<String, Digest>,
    accepted: Vec<StateCommit>,
}

impl StateCommitValidator {
    /// `window` is how many blocks behind the head an anchor may be.
    pub fn new(window: u64) -> Self {
        StateCommitValidator { window, ..Default::default() }
    }

    pub fn register_contract(&mut self, contract: impl Into<String>, genesis: Digest) {
        let c = contract.into();
        self.heads.insert(c.clone(), genesis);
        self.genesis.insert(c, genesis);
    }

    pub fn head(&self, contract: &str) -> Option<Digest> {
        self.heads.get(contract).copied()
    }

    pub fn genesis(&self, contract: &str) -> Option<Digest> {
        self.genesis.get(contract).copied()
    }

    pub fn accepted(&self) -> &[StateCommit] {
        &self.accepted
    }
}

impl TxValidator for StateCommitValidator {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        let c = StateCommit::from_value(&tx.payload).ok_or_else(|| ValidationError::Malformed("bad state commit".into()))?;
        let head = *self.heads.get(&c.contract).ok_or_else(|| ValidationError::Malformed("unknown contract".into()))?;
        let h = chain.head().height;
        let fresh = (h.saturating_sub(self.window)..=h).any(|k| chain.canonical_hash_at(k) == Some(c.anchor));
        if !fresh {
            return Err(ValidationError::StaleAnchor);
        }
        if c.prev != head {
            return Err(ValidationError::WrongPredecessor);
        }
        self.heads.insert(c.contract.clone(), c.new);
        self.accepted.push(c);
        Ok(())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

pub fn state_commit(sim: &mut Simulation, commit: &StateCommit) -> Result<TxReceipt, LedgerError> {
    sim.submit_tx(Tx::new(STATE_COMMIT_KIND, commit.to_value()))
}
