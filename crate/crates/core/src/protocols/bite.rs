//! A BITE-style light-client service. The enclave scans blocks handed to it
//! by its host and answers balance queries. Under eventual consensus a host
//! running two clones can feed each one a different branch of a fork.

use std::sync::Arc;

use crate::crypto::{Keypair, PublicKey};
use crate::enclave::{EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault};
use crate::host::{block_input, AttackKind, Event, Evidence, Simulation};
use crate::ledger::{Block, ChainView, ConsensusMode, Tx};
use crate::mitigations::serialization::{client_verify, ClientVerdict, TimestampVariant, TimestampedResponse};
use crate::protocols::{bad_input, digest_field, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["amount", "depth"];
pub const TX_KIND: &str = "btc-transfer";
pub const CLIENT: &str = "light-client";

/// Eventual consensus without spontaneous forks; the scenario forks on cue.
pub fn preset() -> ConsensusMode {
    ConsensusMode::Eventual { block_interval_ms: 600_000, fork_probability: 0.0, confirmation_depth: 6 }
}

fn identity(ctx: &EnclaveCtx<'_>, state: &Value) -> Result<Keypair, ProgramFault> {
    let seed = state.get("identity").and_then(Value::as_bytes).ok_or_else(|| bad_input("no identity"))?;
    Ok(ctx.derive_keypair(seed, b"bite-identity"))
}

pub fn transfer(to: &str, amount: i64) -> Tx {
    Tx::new(TX_KIND, Value::map([("to", Value::str(to)), ("amount", Value::Int(amount))]))
}

pub struct BiteEnclave;

impl BiteEnclave {
    fn apply_block(ctx: &EnclaveCtx<'_>, state: &mut Value, block: &Block) -> Result<(), ProgramFault> {
        if block.recompute_hash(ctx.crypto()) != block.hash {
            return Err(ProgramFault::BrokenChain(block.height));
        }
        let height = state.get("height").and_then(Value::as_u64).unwrap_or_default();
        let linked = match digest_field(state, "head") {
            Some(head) => block.parent_hash == head,
            None => true,
        };
        if !linked || block.height != height + 1 {
            return Err(ProgramFault::BrokenChain(block.height));
        }
        for tx in block.txs.iter().filter(|t| t.kind == TX_KIND) {
            let to = tx.payload.get("to").and_then(Value::as_str).ok_or_else(|| bad_input("transfer needs to"))?.to_string();
            let amount = tx.payload.get("amount").and_then(Value::as_i64).ok_or_else(|| bad_input("transfer needs amount"))?;
            let balance = state.get("balances").and_then(|b| b.get(&to)).and_then(Value::as_i64).unwrap_or_default();
            if let Some(Value::Map(b)) = state.get_mut("balances") {
                b.insert(to, Value::Int(balance + amount));
            }
        }
        state.set("height", Value::Uint(block.height));
        state.set("head", Value::bytes(block.hash));
        Ok(())
    }
}

impl Program for BiteEnclave {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("bite-enclave", 1, Value::Unit)
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let seed: Vec<u8> = (0..4).flat_map(|_| ctx.draw_u64().to_be_bytes()).collect();
        let state = Value::map([
            ("identity", Value::bytes(seed)),
            ("height", Value::Uint(0)),
            ("balances", Value::map::<String, _>([])),
        ]);
        ctx.seal_state(&state.encode())?;
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        match op(input) {
            "identity" => Ok(Value::bytes(identity(ctx, state)?.public.to_bytes())),
            "block" => {
                let block = input.get("block").and_then(Block::from_value).ok_or_else(|| bad_input("block needs block"))?;
                Self::apply_block(ctx, state, &block)?;
                ctx.seal_state(&state.encode())?;
                Ok(Value::Unit)
            }
            // Every answer is signed together with the block it reflects, so
            // clients can bind it to their own view of the chain.
            "balance" => {
                let address = input.get("address").and_then(Value::as_str).unwrap_or_default();
                let balance = state.get("balances").and_then(|b| b.get(address)).cloned().unwrap_or(Value::Int(0));
                let height = state.get("height").and_then(Value::as_u64).unwrap_or_default();
                let key = identity(ctx, state)?;
                Ok(TimestampedResponse::new(ctx.crypto(), &key, balance, height, digest_field(state, "head")).to_value())
            }
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

/// A light client that knows the enclave's key and follows the chain itself.
pub struct LightClient {
    pub enclave_pk: PublicKey,
    /// `None` accepts any correctly signed answer.
    pub check: Option<TimestampVariant>,
    pub window: u64,
}

impl LightClient {
    pub fn balance_query(
        &self,
        sim: &mut Simulation,
        h: Handle,
        address: &str,
        view: &ChainView,
    ) -> Result<Result<i64, ClientVerdict>, RunError> {
        let out = sim.step(h, &Value::map([("op", Value::str("balance")), ("address", Value::str(address))]))?;
        let resp = TimestampedResponse::from_value(&out).ok_or_else(|| RunError::Sim("malformed balance response".into()))?;
        if !resp.verify(sim.crypto(), &self.enclave_pk) {
            return Err(RunError::Sim("bad enclave signature".into()));
        }
        let verdict = match self.check {
            Some(variant) => client_verify(&resp, view, variant, self.window),
            None => ClientVerdict::Accept,
        };
        sim.record(Event::Client { client: CLIENT.into(), verdict: format!("{verdict:?}") });
        Ok(match verdict {
            ClientVerdict::Accept => Ok(resp.payload.as_i64().unwrap_or_default()),
            v => Err(v),
        })
    }
}

fn feed(sim: &mut Simulation, h: Handle, blocks: &[Block]) -> Result<(), RunError> {
    for b in blocks {
        sim.step_labeled(h, "block", &block_input(b)).result?;
    }
    Ok(())
}

struct Service {
    sim: Simulation,
    enclave: Handle,
    client: LightClient,
}

fn setup(ctx: &RunContext) -> Result<Service, RunError> {
    let depth = ctx.params.u64("depth", 2)?;
    let mut sim = Simulation::new(ctx.seed, ctx.mode_or(preset()));
    let p = sim.world.add_platform("bite-host")?;
    let m = sim.world.register_program(Arc::new(BiteEnclave))?;
    let enclave = sim.launch(&p, m)?;
    for _ in 0..depth {
        sim.next_block();
    }
    let chain = sim.ledger.canonical_chain().blocks;
    feed(&mut sim, enclave, &chain[1..])?;
    let pk = sim.step(enclave, &Value::map([("op", Value::str("identity"))]))?;
    let enclave_pk = PublicKey::from_bytes(pk.as_bytes().and_then(|b| b.try_into().ok()).ok_or_else(|| RunError::Sim("bad identity".into()))?);
    let check = ctx.mitigations.timestamping.or(ctx.patched().then_some(TimestampVariant::HeightAndHash));
    let client = LightClient { enclave_pk, check, window: ctx.window() };
    Ok(Service { sim, enclave, client })
}

/// Balance reported for the client, or the client's rejection.
pub fn bite_balance_query(sim: &mut Simulation, client: &LightClient, h: Handle) -> Result<Result<i64, ClientVerdict>, RunError> {
    let view = sim.ledger.canonical_chain();
    client.balance_query(sim, h, CLIENT, &view)
}

fn report(sim: &mut Simulation, answers: &[Result<i64, ClientVerdict>]) {
    for a in answers {
        if let Err(ClientVerdict::RejectForkMismatch { height }) = a {
            sim.evidence(Evidence::RejectForkMismatch { height: *height });
        }
        if let Err(ClientVerdict::RejectStale { height, client_head }) = a {
            sim.evidence(Evidence::RejectStale { height: *height, client_head: *client_head });
        }
    }
    let accepted: Vec<i64> = answers.iter().filter_map(|a| a.as_ref().ok().copied()).collect();
    if let [a, b, ..] = accepted[..] {
        if a != b {
            sim.evidence(Evidence::DivergentResponses { a: a.to_string(), b: b.to_string() });
        }
    }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let amount = ctx.params.u64("amount", 5)? as i64;
    let Service { mut sim, enclave, client } = setup(ctx)?;
    match ctx.attack {
        AttackKind::Cloning => {
            let blob = sim.blobs_of(enclave)?.last().cloned().expect("enclave seals");
            let twin = sim.clone_instance(enclave, Some(&blob))?;
            sim.submit_tx(transfer(CLIENT, amount))?;
            let (a, b) = sim.ledger.fork_now();
            sim.log_block(&a);
            sim.log_block(&b);
            let a2 = sim.ledger.produce_on(&a.hash, "validator");
            sim.log_block(&a2);
            feed(&mut sim, enclave, &[a])?;
            feed(&mut sim, twin, &[b])?;
            let answers = [bite_balance_query(&mut sim, &client, enclave)?, bite_balance_query(&mut sim, &client, twin)?];
            report(&mut sim, &answers);
        }
        AttackKind::None => {
            sim.submit_tx(transfer(CLIENT, amount))?;
            sim.next_block();
            let head = sim.ledger.head().clone();
            feed(&mut sim, enclave, &[head])?;
            let answer = bite_balance_query(&mut sim, &client, enclave)?;
            report(&mut sim, &[answer]);
            if let Ok(balance) = answer {
                sim.note(format!("result {balance}"));
            }
        }
        AttackKind::Rollback => return Err(RunError::Sim("bite-fork has no rollback scenario".into())),
    }
    Ok(RunResult::from_sim(sim, ctx.attack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::Variant;

    #[test]
    fn honest_balance_includes_transfer() {
        for v in [Variant::Vulnerable, Variant::Patched] {
            let r = run(&RunContext::new(1, v, AttackKind::None)).unwrap();
            assert!(!r.outcome.succeeded);
            assert!(r.outcome.evidence.is_empty());
            assert!(r.log.entries().iter().any(|e| matches!(&e.event, Event::Note { text } if text == "result 5")));
        }
    }

    #[test]
    fn forked_clones_diverge() {
        let r = run(&RunContext::new(3, Variant::Vulnerable, AttackKind::Cloning)).unwrap();
        assert!(r.outcome.succeeded);
        assert_eq!(r.outcome.evidence, vec![Evidence::DivergentResponses { a: "5".into(), b: "0".into() }]);
    }

    #[test]
    fn block_hash_binding_rejects_the_other_branch() {
        let r = run(&RunContext::new(3, Variant::Patched, AttackKind::Cloning)).unwrap();
        assert!(!r.outcome.succeeded);
        assert_eq!(r.outcome.evidence, vec![Evidence::RejectForkMismatch { height: 3 }]);
    }

    #[test]
    fn height_alone_does_not_help() {
        let mut ctx = RunContext::new(3, Variant::Patched, AttackKind::Cloning);
        ctx.mitigations.timestamping = Some(TimestampVariant::PlainHeight);
        assert!(run(&ctx).unwrap().outcome.succeeded);
    }

    #[test]
    fn enclave_refuses_unlinked_blocks() {
        let Service { mut sim, enclave, .. } = setup(&RunContext::new(1, Variant::Vulnerable, AttackKind::None)).unwrap();
        let genesis = sim.ledger.genesis().clone();
        let err = sim.step_labeled(enclave, "block", &block_input(&genesis)).result;
        assert!(err.is_err());
    }
}
