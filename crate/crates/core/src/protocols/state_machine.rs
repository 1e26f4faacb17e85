//! The generic enclave state machine `s' = f(s, i)` used to demonstrate the
//! two forking attacks in isolation.

use std::sync::Arc;

use crate::enclave::{EnclaveCtx, Program, ProgramDescriptor, ProgramFault, ProgramFlags};
use crate::host::{AttackKind, AttackScript, BlobChoice, HostAction, ScriptRunner, Simulation};
use crate::ledger::ConsensusMode;
use crate::protocols::{RunContext, RunError, RunResult};
use crate::value::Value;

pub const PARAMS: &[&str] = &["s0", "i1", "i2"];

pub const MULTIPLIER: i64 = 31;

/// `f(s, i) = 31 s + i` (wrapping).
pub fn transition(s: i64, i: i64) -> i64 {
    s.wrapping_mul(MULTIPLIER).wrapping_add(i)
}

/// Integer accumulator that seals its state after `init` and every step.
pub struct Accumulator {
    pub s0: i64,
}

impl Program for Accumulator {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("accumulator", 1, Value::Int(self.s0))
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags::default()
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let s = Value::Int(self.s0);
        ctx.seal_state(&s.encode())?;
        Ok(s)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let i = input.as_i64().ok_or_else(|| ProgramFault::BadInput("expected an integer".into()))?;
        let s = transition(state.as_i64().unwrap_or_default(), i);
        *state = Value::Int(s);
        ctx.seal_state(&state.encode())?;
        Ok(Value::Int(s))
    }
}

fn launch(name: &str) -> HostAction {
    HostAction::Launch { name: name.into(), platform: "p0".into() }
}

fn deliver(to: &str, input: i64) -> HostAction {
    HostAction::Deliver { to: to.into(), input }
}

/// Rollback: process `i1`, restart from the initial blob, process `i2`.
pub fn rollback_script(i1: i64, i2: i64) -> AttackScript {
    AttackScript {
        kind: AttackKind::Rollback,
        steps: vec![
            launch("e").into(),
            deliver("e", i1).into(),
            HostAction::Restart { name: "e".into(), blob: BlobChoice::Initial }.into(),
            deliver("e", i2).into(),
        ],
    }
}

/// Cloning: two instances from the initial state, one input each.
pub fn cloning_script(i1: i64, i2: i64) -> AttackScript {
    AttackScript {
        kind: AttackKind::Cloning,
        steps: vec![
            launch("e").into(),
            HostAction::Clone { source: "e".into(), name: "e2".into(), blob: Some(BlobChoice::Initial) }.into(),
            deliver("e", i1).into(),
            deliver("e2", i2).into(),
        ],
    }
}

pub fn honest_script(i1: i64, i2: i64) -> AttackScript {
    AttackScript { kind: AttackKind::None, steps: vec![launch("e").into(), deliver("e", i1).into(), deliver("e", i2).into()] }
}

pub fn run(ctx: &RunContext) -> Result<RunResult, RunError> {
    let s0 = ctx.params.u64("s0", 1)? as i64;
    let i1 = ctx.params.u64("i1", 5)? as i64;
    let i2 = ctx.params.u64("i2", 7)? as i64;
    let script = match &ctx.script {
        Some(s) => s.clone(),
        None => match ctx.attack {
            AttackKind::Rollback => rollback_script(i1, i2),
            AttackKind::Cloning => cloning_script(i1, i2),
            AttackKind::None => honest_script(i1, i2),
        },
    };
    let mut sim = Simulation::new(ctx.seed, ctx.mode_or(ConsensusMode::permissioned()));
    let m = sim.world.register_program(Arc::new(Accumulator { s0 }))?;
    let mut runner = ScriptRunner::new(m);
    runner.run(&mut sim, &script)?;
    Ok(RunResult::from_sim(sim, ctx.attack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::Evidence;
    use crate::protocols::Variant;

    fn final_values(r: &RunResult) -> Vec<i64> {
        let mut out: Vec<i64> = r
            .log
            .entries()
            .iter()
            .filter_map(|e| match &e.event {
                crate::host::Event::FinalState { state, .. } => state.parse().ok(),
                _ => None,
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn rollback_ends_in_f_s0_i2() {
        let r = run(&RunContext::new(1, Variant::Vulnerable, AttackKind::Rollback)).unwrap();
        assert_eq!(final_values(&r), vec![transition(1, 7)]);
        assert!(r.outcome.succeeded);
        assert!(matches!(r.outcome.evidence[0], Evidence::ForkedState { .. }));
    }

    #[test]
    fn cloning_yields_both_branches() {
        let r = run(&RunContext::new(1, Variant::Vulnerable, AttackKind::Cloning)).unwrap();
        assert_eq!(final_values(&r), vec![transition(1, 5), transition(1, 7)]);
        assert!(r.outcome.succeeded);
    }

    #[test]
    fn honest_run_folds_both_inputs() {
        let r = run(&RunContext::new(1, Variant::Vulnerable, AttackKind::None)).unwrap();
        assert_eq!(final_values(&r), vec![transition(transition(1, 5), 7)]);
        assert!(r.outcome.evidence.is_empty());
    }
}
