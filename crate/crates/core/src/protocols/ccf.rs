//! A CCF-style replicated key-value store. Time is divided into views; every
//! transaction and view change is appended to the ledger, clients cache the
//! last view they saw and refuse nodes that are behind it, and a restarted
//! node rebuilds its state by replaying the ledger.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::crypto::Digest;
use crate::enclave::{EnclaveCtx, Handle, Program, ProgramDescriptor, ProgramFault};
use crate::host::{AttackKind, Event, Evidence, Simulation};
use crate::ledger::{ConsensusMode, Tx};
use crate::mitigations::serialization::{blocks_from_value, blocks_to_value};
use crate::mitigations::replay_recover;
use crate::protocols::{bad_input, digest_field, op, RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["view_changes"];
pub const LOG_KIND: &str = "ccf-log";

fn fresh_state() -> Value {
    Value::map([
        ("view", Value::Uint(0)),
        ("seqno", Value::Uint(0)),
        ("kv", Value::map::<String, _>([])),
        ("log_digest", Value::bytes([0u8; 32])),
    ])
}

fn append(ctx: &EnclaveCtx<'_>, state: &mut Value, entry: &Value) {
    let prev: Digest = digest_field(state, "log_digest").unwrap_or_default();
    let next = ctx.crypto().hash(&Value::List(vec![Value::bytes(prev), entry.clone()]).encode());
    state.set("log_digest", Value::bytes(next));
}

fn apply_entry(ctx: &EnclaveCtx<'_>, state: &mut Value, entry: &Value) -> Result<(), ProgramFault> {
    match entry.get("type").and_then(Value::as_str) {
        Some("tx") => {
            let key = entry.get("key").and_then(Value::as_str).ok_or_else(|| bad_input("tx needs key"))?.to_string();
            let value = entry.get("value").cloned().unwrap_or_default();
            if let Some(Value::Map(kv)) = state.get_mut("kv") {
                kv.insert(key, value);
            }
            let seqno = state.get("seqno").and_then(Value::as_u64).unwrap_or_default() + 1;
            state.set("seqno", Value::Uint(seqno));
        }
        Some("view") => {
            let view = state.get("view").and_then(Value::as_u64).unwrap_or_default() + 1;
            state.set("view", Value::Uint(view));
        }
        _ => return Err(bad_input("unknown log entry")),
    }
    append(ctx, state, entry);
    Ok(())
}

pub struct CcfNode;

impl Program for CcfNode {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("ccf-node", 1, Value::Unit)
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let state = fresh_state();
        ctx.seal_state(&state.encode())?;
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        match op(input) {
            "connect" => Ok(Value::map([("view", state.get("view").cloned().unwrap_or_default())])),
            "get" => {
                let key = input.get("key").and_then(Value::as_str).unwrap_or_default();
                Ok(state.get("kv").and_then(|kv| kv.get(key)).cloned().unwrap_or_default())
            }
            "tx" | "view-change" => {
                let entry = if op(input) == "tx" {
                    Value::map([
                        ("type", Value::str("tx")),
                        ("key", input.get("key").cloned().unwrap_or_default()),
                        ("value", input.get("value").cloned().unwrap_or_default()),
                    ])
                } else {
                    Value::map([("type", Value::str("view"))])
                };
                apply_entry(ctx, state, &entry)?;
                ctx.seal_state(&state.encode())?;
                Ok(Value::map([
                    ("view", state.get("view").cloned().unwrap_or_default()),
                    ("seqno", state.get("seqno").cloned().unwrap_or_default()),
                    ("entry", entry),
                ]))
            }
            "recover" => {
                let blocks = input.get("blocks").and_then(blocks_from_value).ok_or_else(|| bad_input("recover needs blocks"))?;
                let mut rebuilt = fresh_state();
                replay_recover(ctx.crypto(), &blocks, |t| t.kind == LOG_KIND, |t| apply_entry(ctx, &mut rebuilt, &t.payload))?;
                *state = rebuilt;
                ctx.seal_state(&state.encode())?;
                Ok(Value::map([("view", state.get("view").cloned().unwrap_or_default())]))
            }
            other => Err(bad_input(&format!("unknown op {other:?}"))),
        }
    }
}

/// A client that caches the highest view it has seen.
#[derive(Clone, Debug, Default)]
pub struct CcfClient {
    pub cached_view: u64,
}

pub enum Submit {
    Executed(Value),
    Aborted { served: u64, cached: u64 },
}

impl CcfClient {
    /// Connects to `h` and, if its view is not behind, submits `key = value`.
    pub fn submit(&mut self, sim: &mut Simulation, h: Handle, key: &str, value: i64) -> Result<Submit, RunError> {
        let served = sim.step(h, &Value::map([("op", Value::str("connect"))]))?.get("view").and_then(Value::as_u64).unwrap_or_default();
        if served < self.cached_view {
            sim.record(Event::Client { client: "ccf-client".into(), verdict: format!("view mismatch {served} < {}", self.cached_view) });
            return Ok(Submit::Aborted { served, cached: self.cached_view });
        }
        self.cached_view = served;
        let out = execute(sim, h, Value::map([("op", Value::str("tx")), ("key", Value::str(key)), ("value", Value::Int(value))]))?;
        Ok(Submit::Executed(out))
    }
}

/// Runs an op on the node and appends the resulting log entry to the ledger.
fn execute(sim: &mut Simulation, h: Handle, input: Value) -> Result<Value, RunError> {
    let out = sim.step(h, &input)?;
    if let Some(entry) = out.get("entry") {
        sim.submit_tx(Tx::new(LOG_KIND, entry.clone()))?;
    }
    Ok(out)
}

pub fn view_change(sim: &mut Simulation, h: Handle) -> Result<u64, RunError> {
    let out = execute(sim, h, Value::map([("op", Value::str("view-change"))]))?;
    Ok(out.get("view").and_then(Value::as_u64).unwrap_or_default())
}

pub fn recover(sim: &mut Simulation, h: Handle) -> Result<u64, RunError> {
    let blocks = sim.ledger.canonical_chain().blocks;
    let out = sim.step(h, &Value::map([("op", Value::str("recover")), ("blocks", blocks_to_value(&blocks))]))?;
    Ok(out.get("view").and_then(Value::as_u64).unwrap_or_default())
}

struct Service {
    sim: Simulation,
    primary: Handle,
    client: CcfClient,
    /// Blobs sealed before the last view change.
    old_blob: crate::enclave::SealedBlob,
}

fn setup(ctx: &RunContext) -> Result<Service, RunError> {
    let view_changes = ctx.params.u64("view_changes", 1)?.max(1);
    let mut sim = Simulation::new(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()));
    let p = sim.world.add_platform("ccf-host")?;
    let m = sim.world.register_program(Arc::new(CcfNode))?;
    let primary = sim.launch(&p, m)?;
    let mut client = CcfClient::default();
    if let Submit::Aborted { .. } = client.submit(&mut sim, primary, "a", 1)? {
        return Err(RunError::Sim("fresh node refused".into()));
    }
    for _ in 0..view_changes - 1 {
        view_change(&mut sim, primary)?;
    }
    let old_blob = sim.blobs_of(primary)?.last().cloned().expect("node seals");
    view_change(&mut sim, primary)?;
    client.submit(&mut sim, primary, "b", 2)?;
    sim.next_block();
    Ok(Service { sim, primary, client, old_blob })
}

fn report(sim: &mut Simulation, result: Submit) {
    match result {
        Submit::Aborted { served, cached } => sim.evidence(Evidence::ViewMismatchDetected { served, cached }),
        Submit::Executed(out) => sim.note(format!("result {}", out.get("seqno").cloned().unwrap_or_default())),
    }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let Service { mut sim, primary, mut client, old_blob } = setup(ctx)?;
    match ctx.attack {
        AttackKind::None => {
            let cold = sim.restart_with(primary, None)?;
            recover(&mut sim, cold)?;
            let r = client.submit(&mut sim, cold, "c", 3)?;
            report(&mut sim, r);
        }
        AttackKind::Rollback => {
            let e = sim.restart_with(primary, Some(&old_blob))?;
            let r = client.submit(&mut sim, e, "c", 3)?;
            report(&mut sim, r);
        }
        AttackKind::Cloning => {
            let clone = sim.clone_instance(primary, Some(&old_blob))?;
            let r = client.submit(&mut sim, clone, "c", 3)?;
            report(&mut sim, r);
        }
    }
    Ok(RunResult::from_sim(sim, ctx.attack))
}

/// The store's contents, for tests and reports.
pub fn kv(sim: &Simulation, h: Handle) -> BTreeMap<String, Value> {
    match sim.world.state(h).ok().and_then(|s| s.get("kv")) {
        Some(Value::Map(m)) => m.clone(),
        _ => BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::Variant;

    #[test]
    fn matching_views_execute() {
        let Service { mut sim, primary, mut client, .. } = setup(&RunContext::new(1, Variant::Vulnerable, AttackKind::None)).unwrap();
        assert!(matches!(client.submit(&mut sim, primary, "x", 9).unwrap(), Submit::Executed(_)));
        assert_eq!(kv(&sim, primary).get("x"), Some(&Value::Int(9)));
    }

    #[test]
    fn stale_clone_and_rollback_are_aborted() {
        for attack in [AttackKind::Rollback, AttackKind::Cloning] {
            let r = run(&RunContext::new(1, Variant::Vulnerable, attack)).unwrap();
            assert!(!r.outcome.succeeded);
            assert_eq!(r.outcome.evidence, vec![Evidence::ViewMismatchDetected { served: 0, cached: 1 }]);
        }
    }

    #[test]
    fn recovery_replays_the_ledger() {
        let Service { mut sim, primary, .. } = setup(&RunContext::new(1, Variant::Vulnerable, AttackKind::None)).unwrap();
        let before = sim.world.state(primary).unwrap().clone();
        let cold = sim.restart_with(primary, None).unwrap();
        assert_eq!(recover(&mut sim, cold).unwrap(), 1);
        assert_eq!(sim.world.state(cold).unwrap(), &before);
    }
}
