use std::sync::Arc;

use crate::enclave::{EnclaveCtx, EnclaveProgram, Persistence, Program, ProgramDescriptor, ProgramFault, ProgramFlags};
use crate::value::Value;

/// Wraps a program so that only immutable configuration may ever be sealed.
pub struct StatelessWrap {
    inner: EnclaveProgram,
}

/// Rejects programs that declare mutable persistent state up front; the
/// runtime guard catches any that lie about it.
pub fn stateless_wrap(program: EnclaveProgram) -> Result<EnclaveProgram, ProgramFault> {
    if program.flags().persistence == Persistence::Mutable {
        return Err(ProgramFault::PolicyViolation(format!(
            "`{}` keeps mutable persistent state",
            program.descriptor().name
        )));
    }
    Ok(Arc::new(StatelessWrap { inner: program }))
}

impl Program for StatelessWrap {
    fn descriptor(&self) -> ProgramDescriptor {
        let d = self.inner.descriptor();
        ProgramDescriptor::new(d.name, d.version, Value::map([("policy", Value::str("stateless")), ("inner", d.params)]))
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags { persistence: Persistence::Stateless, ..self.inner.flags() }
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        ctx.restrict_sealing_to_config();
        self.inner.init(ctx)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        ctx.restrict_sealing_to_config();
        self.inner.step(state, input, ctx)
    }

    fn restore(&self, sealed: &[u8], ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        ctx.restrict_sealing_to_config();
        self.inner.restore(sealed, ctx)
    }
}

/// Transaction mixer: outputs a random permutation of its input batch,
/// signed with a key kept as sealed configuration.
pub struct Mixer;

impl Program for Mixer {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("mixer", 1, Value::Unit)
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags {
            deterministic: false,
            uses_randomness: true,
            ephemeral_keys: false,
            persistence: Persistence::ImmutableConfig,
        }
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let mut seed = Vec::with_capacity(32);
        for _ in 0..4 {
            seed.extend_from_slice(&ctx.draw_u64().to_be_bytes());
        }
        ctx.seal_config(&seed);
        Ok(Value::map([("key_seed", Value::bytes(seed))]))
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let batch = input.as_list().ok_or_else(|| ProgramFault::BadInput("mixer expects a list".into()))?;
        let mut out = batch.to_vec();
        for i in (1..out.len()).rev() {
            let j = (ctx.draw_u64() % (i as u64 + 1)) as usize;
            out.swap(i, j);
        }
        let seed = state.get("key_seed").and_then(Value::as_bytes).unwrap_or_default().to_vec();
        let key = ctx.derive_keypair(&seed, b"mixer-signing");
        let batch = Value::List(out);
        let sig = ctx.crypto().sign(&key, &batch.encode());
        Ok(Value::map([("batch", batch), ("signature", Value::bytes(sig.to_bytes()))]))
    }

    fn restore(&self, sealed: &[u8], _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        Ok(Value::map([("key_seed", Value::bytes(sealed))]))
    }
}

/// Deliberately stateful: seals its counter after every increment.
pub struct CounterContract;

impl Program for CounterContract {
    fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor::new("counter-contract", 1, Value::Unit)
    }

    fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        Ok(Value::Int(0))
    }

    fn step(&self, state: &mut Value, _input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let next = state.as_i64().unwrap_or_default() + 1;
        *state = Value::Int(next);
        ctx.seal_state(&state.encode())?;
        Ok(state.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::TeeWorld;
    use crate::host::{AttackKind, Simulation};
    use crate::ledger::ConsensusMode;

    fn batch() -> Value {
        Value::List((0..6).map(Value::Int).collect())
    }

    fn sorted(v: &Value) -> Vec<Value> {
        let mut items = v.get("batch").unwrap().as_list().unwrap().to_vec();
        items.sort();
        items
    }

    #[test]
    fn mixer_is_accepted_and_counter_is_not() {
        assert!(stateless_wrap(Arc::new(Mixer)).is_ok());
        assert!(matches!(stateless_wrap(Arc::new(CounterContract)), Err(ProgramFault::PolicyViolation(_))));
    }

    struct Liar;

    impl Program for Liar {
        fn descriptor(&self) -> ProgramDescriptor {
            ProgramDescriptor::new("liar", 1, Value::Unit)
        }
        fn flags(&self) -> ProgramFlags {
            ProgramFlags { persistence: Persistence::Stateless, ..ProgramFlags::default() }
        }
        fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
            Ok(Value::Int(0))
        }
        fn step(&self, state: &mut Value, _i: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
            ctx.seal_state(&state.encode())?;
            Ok(Value::Unit)
        }
    }

    #[test]
    fn runtime_guard_blocks_state_sealing() {
        let mut w = TeeWorld::new(1);
        let p = w.add_platform("p").unwrap();
        let m = w.register_program(stateless_wrap(Arc::new(Liar)).unwrap()).unwrap();
        let h = w.launch(&p, m).unwrap();
        assert!(matches!(
            w.step(h, &Value::Unit),
            Err(crate::enclave::EnclaveError::Program(ProgramFault::PolicyViolation(_)))
        ));
    }

    #[test]
    fn rollback_against_wrapped_mixer_gains_nothing() {
        let mut sim = Simulation::new(3, ConsensusMode::permissioned());
        let p = sim.world.add_platform("p").unwrap();
        let m = sim.world.register_program(stateless_wrap(Arc::new(Mixer)).unwrap()).unwrap();
        let h = sim.launch(&p, m).unwrap();
        let first = sim.step(h, &batch()).unwrap();
        let config = sim.blobs_of(h).unwrap()[0].clone();
        let h2 = sim.restart_with(h, Some(&config)).unwrap();
        let second = sim.step(h2, &batch()).unwrap();
        assert_eq!(sorted(&first), sorted(&second));
        assert_eq!(sim.world.state(h2).unwrap().get("key_seed"), sim.world.state(h).unwrap().get("key_seed"));
        assert!(!sim.outcome(AttackKind::Rollback).succeeded);
    }
}
