//! Secret-Network-style contract queries. Every node's enclave holds the
//! network-wide consensus key, so any node can decrypt a query for any
//! contract. Nodes keep no state across restarts and rebuild it by replaying
//! the transactions the host hands them.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::crypto::{CryptoProvider, Digest, Keypair, PublicKey, AEAD_NONCE_LEN};
use crate::enclave::{EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault};
use crate::host::{AttackKind, Evidence, Mutation, Simulation};
use crate::ledger::{Block, ConsensusMode, NodeConnection, ServeStrategy, Tx};
use crate::mitigations::replay_recover;
use crate::mitigations::serialization::{blocks_from_value, blocks_to_value};
use crate::protocols::network::{contract_keypair, contract_public, genesis_input, handle_network_op, master};
use crate::protocols::{bad_input, host_bytes, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["initial"];
pub const TX_KIND: &str = "secret-contract";
const CONSENSUS_IO: &str = "consensus-io";
const QUERY_AAD: &[u8] = b"secret-query";
const RESPONSE_AAD: &[u8] = b"secret-response";

/// Query key on the client side: `kdf(n, agree(client, consensusIo))`.
pub fn client_key(crypto: &dyn CryptoProvider, client: &Keypair, consensus_pk: &PublicKey, nonce: &[u8; 32]) -> [u8; 32] {
    crypto.kdf(nonce, &crypto.agree(client.secret(), consensus_pk), b"secret-query-key")
}

/// The same key as derived inside any enclave holding the consensus key.
pub fn enclave_key(crypto: &dyn CryptoProvider, consensus: &Keypair, client_pk: &PublicKey, nonce: &[u8; 32]) -> [u8; 32] {
    crypto.kdf(nonce, &crypto.agree(consensus.secret(), client_pk), b"secret-query-key")
}

fn aead_nonce(crypto: &dyn CryptoProvider, nonce: &[u8; 32], label: &[u8]) -> [u8; AEAD_NONCE_LEN] {
    let mut data = nonce.to_vec();
    data.extend_from_slice(label);
    crypto.hash(&data)[..AEAD_NONCE_LEN].try_into().expect("prefix")
}

/// A contract query. Address, nonce and client key travel in the clear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretQuery {
    pub address: Digest,
    pub nonce: [u8; 32],
    pub client_pk: PublicKey,
    pub ciphertext: Vec<u8>,
}

impl SecretQuery {
    /// Layout: `[address, nonce, client_pk, ciphertext]`.
    pub fn encode(&self) -> Value {
        Value::List(vec![
            Value::bytes(self.address),
            Value::bytes(self.nonce),
            Value::bytes(self.client_pk.to_bytes()),
            Value::bytes(&self.ciphertext),
        ])
    }

    pub fn decode(v: &Value) -> Option<Self> {
        let [a, n, pk, ct] = v.as_list()? else { return None };
        Some(SecretQuery {
            address: a.as_bytes()?.try_into().ok()?,
            nonce: n.as_bytes()?.try_into().ok()?,
            client_pk: PublicKey::from_bytes(pk.as_bytes()?.try_into().ok()?),
            ciphertext: ct.as_bytes()?.to_vec(),
        })
    }

    /// The message as it crosses the network; a proxy may rewrite `address`.
    pub fn to_message(&self) -> Value {
        Value::map([
            ("op", Value::str("query")),
            ("address", Value::bytes(self.address)),
            ("query", self.encode()),
        ])
    }

    pub fn from_message(v: &Value) -> Option<Self> {
        let mut q = Self::decode(v.get("query")?)?;
        q.address = v.get("address")?.as_bytes()?.try_into().ok()?;
        Some(q)
    }
}

pub struct SecretClient {
    pub key: Keypair,
}

pub struct Pending {
    pub query: SecretQuery,
    pub key: [u8; 32],
}

impl SecretClient {
    /// Plaintext is `codeHash || raw`, prefixed with the address when
    /// `bind_address` is set.
    pub fn build(&self, crypto: &dyn CryptoProvider, consensus_pk: &PublicKey, address: Digest, code_hash: Digest, nonce: [u8; 32], raw: &[u8], bind_address: bool) -> Pending {
        let key = client_key(crypto, &self.key, consensus_pk, &nonce);
        let mut pt = Vec::new();
        if bind_address {
            pt.extend_from_slice(&address);
        }
        pt.extend_from_slice(&code_hash);
        pt.extend_from_slice(raw);
        let ciphertext = crypto.aead_encrypt(&key, &aead_nonce(crypto, &nonce, QUERY_AAD), QUERY_AAD, &pt);
        Pending { query: SecretQuery { address, nonce, client_pk: self.key.public, ciphertext }, key }
    }

    pub fn open(&self, crypto: &dyn CryptoProvider, pending: &Pending, response: &Value) -> Option<i64> {
        let ct = response.as_bytes()?;
        let pt = crypto.aead_decrypt(&pending.key, &aead_nonce(crypto, &pending.query.nonce, RESPONSE_AAD), RESPONSE_AAD, ct).ok()?;
        Some(i64::from_be_bytes(pt.try_into().ok()?))
    }
}

fn contracts_mut(state: &mut Value) -> &mut BTreeMap<String, Value> {
    if !matches!(state.get("contracts"), Some(Value::Map(_))) {
        state.set("contracts", Value::map::<&str, _>([]));
    }
    match state.get_mut("contracts") {
        Some(Value::Map(m)) => m,
        _ => unreachable!("just inserted"),
    }
}

fn apply_tx(state: &mut Value, tx: &Tx) -> Result<(), ProgramFault> {
    if tx.kind != TX_KIND {
        return Ok(());
    }
    let p = &tx.payload;
    let addr = p.get("address").and_then(Value::as_bytes).map(hex::encode).ok_or_else(|| bad_input("tx needs address"))?;
    let contracts = contracts_mut(state);
    match p.get("type").and_then(Value::as_str) {
        Some("deploy") => {
            let c = Value::map([
                ("code_hash", p.get("code_hash").cloned().unwrap_or_default()),
                ("counter", Value::Int(p.get("init").and_then(Value::as_i64).unwrap_or_default())),
            ]);
            contracts.insert(addr, c);
        }
        Some("increment") => {
            if let Some(c) = contracts.get_mut(&addr) {
                let n = c.get("counter").and_then(Value::as_i64).unwrap_or_default();
                c.set("counter", Value::Int(n + 1));
            }
        }
        _ => return Err(bad_input("unknown contract tx")),
    }
    Ok(())
}

pub struct SecretNode {
    pub patched: bool,
}

impl SecretNode {
    fn sync(&self, state: &mut Value, input: &Value, ctx: &EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let blocks = input.get("blocks").and_then(blocks_from_value).ok_or_else(|| bad_input("sync needs blocks"))?;
        let mut rebuilt = Value::map([("network", state.get("network").cloned().unwrap_or_default())]);
        if self.patched {
            replay_recover(ctx.crypto(), &blocks, |t| t.kind == TX_KIND, |t| apply_tx(&mut rebuilt, t))?;
        } else {
            // Applies whatever the host supplies, in the order supplied.
            for tx in blocks.iter().flat_map(|b| &b.txs) {
                apply_tx(&mut rebuilt, tx)?;
            }
        }
        if let Some(last) = blocks.last() {
            rebuilt.set("height", Value::Uint(last.height));
        }
        *state = rebuilt;
        Ok(Value::Uint(state.get("height").and_then(Value::as_u64).unwrap_or_default()))
    }

    fn query(&self, state: &Value, input: &Value, ctx: &EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let q = SecretQuery::from_message(input).ok_or_else(|| bad_input("malformed query"))?;
        let consensus = contract_keypair(ctx, state, CONSENSUS_IO)?;
        let crypto = ctx.crypto();
        let k = enclave_key(crypto, &consensus, &q.client_pk, &q.nonce);
        let pt = crypto
            .aead_decrypt(&k, &aead_nonce(crypto, &q.nonce, QUERY_AAD), QUERY_AAD, &q.ciphertext)
            .map_err(|_| ProgramFault::DecryptFail)?;
        let body = if self.patched {
            if pt.len() < 32 || pt[..32] != q.address {
                return Err(ProgramFault::AddressMismatch);
            }
            &pt[32..]
        } else {
            &pt[..]
        };
        if body.len() < 32 {
            return Err(ProgramFault::DecryptFail);
        }
        let (code_hash, raw) = body.split_at(32);
        let contract = state
            .get("contracts")
            .and_then(|c| c.get(&hex::encode(q.address)))
            .ok_or_else(|| ProgramFault::Rejected("no contract at address".into()))?;
        if contract.get("code_hash").and_then(Value::as_bytes) != Some(code_hash) {
            return Err(ProgramFault::Rejected("code hash differs".into()));
        }
        let answer = match raw {
            b"get_count" => contract.get("counter").and_then(Value::as_i64).unwrap_or_default(),
            _ => return Err(bad_input("unknown raw query")),
        };
        let ct = crypto.aead_encrypt(&k, &aead_nonce(crypto, &q.nonce, RESPONSE_AAD), RESPONSE_AAD, &answer.to_be_bytes());
        Ok(Value::bytes(ct))
    }
}

impl Program for SecretNode {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("secret-node", 1, Value::map([("patched", Value::Bool(self.patched))]))
    }

    fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        Ok(Value::map([("network", Value::map::<&str, _>([]))]))
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        if let Some(result) = handle_network_op(state, input, ctx) {
            if result.is_ok() && master(state).is_some() {
                // Only the consensus seed survives a restart.
                let keep = Value::map([("network", state.get("network").cloned().unwrap_or_default())]);
                ctx.seal_state(&keep.encode())?;
            }
            return result;
        }
        match op(input) {
            "block" => {
                let block = input.get("block").and_then(Block::from_value).ok_or_else(|| bad_input("block op needs block"))?;
                for tx in &block.txs {
                    apply_tx(state, tx)?;
                }
                state.set("height", Value::Uint(block.height));
                Ok(Value::Unit)
            }
            "sync" => self.sync(state, input, ctx),
            "query" => self.query(state, input, ctx),
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

pub struct Network {
    pub sim: Simulation,
    pub node: Handle,
    pub consensus_pk: PublicKey,
    pub code_hash: Digest,
    pub a: Digest,
    pub a_prime: Digest,
    pub client: SecretClient,
    pub patched: bool,
}

/// Deploys two instances of the counter contract with the same code, both
/// starting at `initial`, then increments the one at `a`.
pub fn deploy(seed: u64, mode: ConsensusMode, patched: bool, initial: i64) -> Result<Network, RunError> {
    let mut sim = Simulation::new(seed, mode);
    let m = sim.world.register_program(Arc::new(SecretNode { patched }))?;
    let p = sim.world.add_platform("sn-node")?;
    let node = sim.launch(&p, m)?;
    sim.step(node, &genesis_input())?;
    sim.follow(node);
    let consensus_pk = contract_public(&mut sim, node, CONSENSUS_IO)?;
    let code_hash = sim.crypto().hash(b"counter-contract-v1");
    let a = sim.crypto().hash(b"contract-a");
    let a_prime = sim.crypto().hash(b"contract-a-prime");
    for addr in [a, a_prime] {
        let deploy = Value::map([
            ("type", Value::str("deploy")),
            ("address", Value::bytes(addr)),
            ("code_hash", Value::bytes(code_hash)),
            ("init", Value::Int(initial)),
        ]);
        sim.submit_tx(Tx::new(TX_KIND, deploy))?;
    }
    sim.next_block();
    sim.submit_tx(Tx::new(TX_KIND, Value::map([("type", Value::str("increment")), ("address", Value::bytes(a))])))?;
    sim.next_block();
    sim.next_block();
    let client_seed = host_bytes(&mut sim);
    let client = SecretClient { key: sim.crypto().keypair_from_seed(&client_seed) };
    Ok(Network { sim, node, consensus_pk, code_hash, a, a_prime, client, patched })
}

impl Network {
    fn pending(&mut self, address: Digest) -> Pending {
        let nonce = host_bytes(&mut self.sim);
        self.client.build(self.sim.crypto(), &self.consensus_pk, address, self.code_hash, nonce, b"get_count", self.patched)
    }

    /// Queries the counter at `a`; with `rewrite` a proxy redirects it to
    /// `a'` on the way.
    pub fn query_a(&mut self, rewrite: bool) -> Result<Result<i64, ProgramFault>, RunError> {
        let pending = self.pending(self.a);
        let mut message = pending.query.to_message();
        if rewrite {
            let to = Mutation::Set { path: vec!["address".into()], value: Value::bytes(self.a_prime) };
            message = self.sim.modify(&message, &to);
        }
        match self.sim.step(self.node, &message) {
            Ok(resp) => self
                .client
                .open(self.sim.crypto(), &pending, &resp)
                .map(Ok)
                .ok_or_else(|| RunError::Sim("response does not decrypt".into())),
            Err(crate::enclave::EnclaveError::Program(f)) => Ok(Err(f)),
            Err(e) => Err(e.into()),
        }
    }

    /// The canonical chain with the block carrying the increment stripped of
    /// it, as a host wanting the pre-increment state would serve it.
    pub fn spliced_chain(&self) -> Vec<Block> {
        let mut blocks = self.sim.ledger.canonical_chain().blocks;
        for b in &mut blocks {
            b.txs.retain(|t| t.payload.get("type").and_then(Value::as_str) != Some("increment"));
        }
        blocks
    }
}

fn sync_input(blocks: &[Block]) -> Value {
    Value::map([("op", Value::str("sync")), ("blocks", blocks_to_value(blocks))])
}

fn judge(sim: &mut Simulation, expected: i64, answer: Result<i64, ProgramFault>) {
    match answer {
        Ok(got) if got != expected => {
            sim.evidence(Evidence::StaleResponseAccepted { expected: expected.to_string(), got: got.to_string() })
        }
        Ok(got) => sim.note(format!("result {got}")),
        Err(ProgramFault::AddressMismatch) => sim.evidence(Evidence::AddressMismatch),
        Err(f) => sim.evidence(Evidence::ValidationRejected { reason: f.to_string() }),
    }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let initial = ctx.params.u64("initial", 1)? as i64;
    let mut n = deploy(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()), ctx.patched(), initial)?;
    let expected = initial + 1;
    match ctx.attack {
        AttackKind::None => {
            let a = n.query_a(false)?;
            judge(&mut n.sim, expected, a);
        }
        AttackKind::Cloning => {
            let first = n.query_a(false)?;
            n.sim.note(format!("unmodified query answered {first:?}"));
            let a = n.query_a(true)?;
            judge(&mut n.sim, expected, a);
        }
        AttackKind::Rollback => {
            let restarted = n.sim.restart_with(n.node, n.sim.blobs_of(n.node)?.last())?;
            n.node = restarted;
            if n.patched && ctx.connectivity.honest == 0 {
                // Every connection is the adversary's: serving the chain cut
                // just before the increment needs no splice.
                let chain = n.sim.ledger.canonical_chain();
                let cut = chain.blocks.iter().find(|b| has_increment(b)).map_or(0, |b| chain.height() - b.height + 1);
                let view = n.sim.ledger.read_view(&[NodeConnection::dishonest("adversary", ServeStrategy::Stale(cut))])?;
                n.sim.step(restarted, &sync_input(&view.blocks))?;
            } else {
                let spliced = n.spliced_chain();
                match n.sim.step(restarted, &sync_input(&spliced)) {
                    Ok(_) => {}
                    Err(crate::enclave::EnclaveError::Program(ProgramFault::BrokenChain(h))) => {
                        n.sim.evidence(Evidence::BrokenChain { height: h });
                        let view = n.sim.ledger.read_view(&ctx.connectivity.connections())?;
                        n.sim.step(restarted, &sync_input(&view.blocks))?;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let a = n.query_a(false)?;
            judge(&mut n.sim, expected, a);
        }
    }
    Ok(RunResult::from_sim(n.sim, ctx.attack))
}

fn has_increment(b: &Block) -> bool {
    b.txs.iter().any(|t| t.payload.get("type").and_then(Value::as_str) == Some("increment"))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::protocols::{Connectivity, Variant};

    #[test]
    fn unmodified_query_sees_increment() {
        let mut n = deploy(1, ConsensusMode::permissioned(), false, 1).unwrap();
        assert_eq!(n.query_a(false).unwrap(), Ok(2));
    }

    #[test]
    fn proxy_rewrite_answers_from_the_clone() {
        let mut n = deploy(1, ConsensusMode::permissioned(), false, 1).unwrap();
        assert_eq!(n.query_a(true).unwrap(), Ok(1));
        let mut n = deploy(1, ConsensusMode::permissioned(), true, 1).unwrap();
        assert_eq!(n.query_a(true).unwrap(), Err(ProgramFault::AddressMismatch));
        assert_eq!(n.query_a(false).unwrap(), Ok(2));
    }

    #[test]
    fn rollback_matrix() {
        let r = run(&RunContext::new(1, Variant::Vulnerable, AttackKind::Rollback)).unwrap();
        assert!(r.outcome.succeeded);
        let r = run(&RunContext::new(1, Variant::Patched, AttackKind::Rollback)).unwrap();
        assert!(!r.outcome.succeeded);
        assert!(matches!(r.outcome.evidence[..], [Evidence::BrokenChain { .. }]));
    }

    #[test]
    fn patched_rollback_needs_one_honest_node() {
        let mut ctx = RunContext::new(1, Variant::Patched, AttackKind::Rollback);
        ctx.connectivity = Connectivity { honest: 0, stale: 2, stale_depth: 3, silent: 0 };
        assert!(run(&ctx).unwrap().outcome.succeeded);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn key_symmetry(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), nonce in any::<[u8; 32]>()) {
            let c = crate::crypto::ToyCrypto;
            let client = c.keypair_from_seed(&a);
            let consensus = c.keypair_from_seed(&b);
            prop_assert_eq!(client_key(&c, &client, &consensus.public, &nonce), enclave_key(&c, &consensus, &client.public, &nonce));
        }

        #[test]
        fn query_layout_round_trips(addr in any::<[u8; 32]>(), nonce in any::<[u8; 32]>(), pk in any::<u64>(), ct in proptest::collection::vec(any::<u8>(), 0..40)) {
            let q = SecretQuery { address: addr, nonce, client_pk: PublicKey(pk), ciphertext: ct };
            prop_assert_eq!(SecretQuery::decode(&q.encode()), Some(q.clone()));
            prop_assert_eq!(SecretQuery::from_message(&q.to_message()), Some(q));
        }
    }
}
