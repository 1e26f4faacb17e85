use std::sync::Arc;

use crate::crypto::{CryptoProvider, Digest, Keypair, PublicKey, Signature};
use crate::enclave::{EnclaveCtx, EnclaveProgram, Program, ProgramDescriptor, ProgramFault, ProgramFlags};
use crate::value::Value;

/// A client set fixed at setup. Each round needs one signed input per client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedClientPolicy {
    pub clients: Vec<PublicKey>,
}

/// Digest of round `round` with inner state `state`.
pub fn state_digest(crypto: &dyn CryptoProvider, round: u64, state: &Value) -> Digest {
    crypto.hash(&Value::List(vec![Value::Uint(round), state.clone()]).encode())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedInput {
    pub client: usize,
    pub digest: Digest,
    pub input: Value,
    pub signature: Signature,
}

impl SignedInput {
    fn signed_bytes(client: usize, digest: &Digest, input: &Value) -> Vec<u8> {
        Value::List(vec![Value::Uint(client as u64), Value::bytes(digest), input.clone()]).encode()
    }

    pub fn sign(crypto: &dyn CryptoProvider, key: &Keypair, client: usize, digest: Digest, input: Value) -> Self {
        let signature = crypto.sign(key, &Self::signed_bytes(client, &digest, &input));
        SignedInput { client, digest, input, signature }
    }

    pub fn verify(&self, crypto: &dyn CryptoProvider, pk: &PublicKey) -> bool {
        crypto.verify(pk, &Self::signed_bytes(self.client, &self.digest, &self.input), &self.signature)
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("client", Value::Uint(self.client as u64)),
            ("digest", Value::bytes(self.digest)),
            ("input", self.input.clone()),
            ("signature", Value::bytes(self.signature.to_bytes())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        Some(SignedInput {
            client: v.get("client")?.as_u64()? as usize,
            digest: v.get("digest")?.as_bytes()?.try_into().ok()?,
            input: v.get("input")?.clone(),
            signature: Signature::from_bytes(v.get("signature")?.as_bytes()?.try_into().ok()?),
        })
    }
}

pub fn round_input(inputs: &[SignedInput]) -> Value {
    Value::map([("op", Value::str("round")), ("inputs", Value::List(inputs.iter().map(SignedInput::to_value).collect()))])
}

/// Wraps a program so it only advances on unanimous, correctly signed
/// client views of its current state. State after setup is
/// `{round, digest, inner}` and is sealed after every round.
pub struct FixedClientWrap {
    inner: EnclaveProgram,
    policy: FixedClientPolicy,
}

pub fn fixed_client_wrap(inner: EnclaveProgram, policy: FixedClientPolicy) -> EnclaveProgram {
    Arc::new(FixedClientWrap { inner, policy })
}

fn wrap_state(crypto: &dyn CryptoProvider, round: u64, inner: Value) -> Value {
    let digest = state_digest(crypto, round, &inner);
    Value::map([("round", Value::Uint(round)), ("digest", Value::bytes(digest)), ("inner", inner)])
}

impl FixedClientWrap {
    /// Checks a round's inputs against the policy and the local digest.
    fn check(&self, crypto: &dyn CryptoProvider, local: &[u8], inputs: &[SignedInput]) -> Result<(), ProgramFault> {
        let k = self.policy.clients.len();
        let ids: Vec<usize> = inputs.iter().map(|i| i.client).collect();
        if ids != (0..k).collect::<Vec<_>>() {
            return Err(ProgramFault::BadInput(format!("expected one input per client 0..{k}, got {ids:?}")));
        }
        let bad_sig: Vec<usize> =
            inputs.iter().filter(|i| !i.verify(crypto, &self.policy.clients[i.client])).map(|i| i.client).collect();
        if !bad_sig.is_empty() {
            return Err(ProgramFault::BadSignature(bad_sig));
        }
        let mismatched: Vec<usize> = inputs.iter().filter(|i| i.digest[..] != *local).map(|i| i.client).collect();
        if !mismatched.is_empty() {
            return Err(ProgramFault::StateMismatch(mismatched));
        }
        Ok(())
    }
}

impl Program for FixedClientWrap {
    fn descriptor(&self) -> ProgramDescriptor {
        let d = self.inner.descriptor();
        let clients = Value::List(self.policy.clients.iter().map(|c| Value::bytes(c.to_bytes())).collect());
        ProgramDescriptor::new(
            d.name,
            d.version,
            Value::map([("policy", Value::str("fixed-client")), ("clients", clients), ("inner", d.params)]),
        )
    }

    fn flags(&self) -> ProgramFlags {
        self.inner.flags()
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        let inner = self.inner.init(ctx)?;
        let state = wrap_state(ctx.crypto(), 0, inner);
        ctx.seal_state(&state.encode())?;
        Ok(state)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        match input.get("op").and_then(Value::as_str) {
            Some("round") => {}
            Some("digest") => {
                return Ok(Value::map([
                    ("round", state.get("round").cloned().unwrap_or_default()),
                    ("digest", state.get("digest").cloned().unwrap_or_default()),
                ]))
            }
            _ => return self.inner.step(state.get_mut("inner").expect("wrapped state"), input, ctx),
        }
        let inputs = input
            .get("inputs")
            .and_then(Value::as_list)
            .and_then(|l| l.iter().map(SignedInput::from_value).collect::<Option<Vec<_>>>())
            .ok_or_else(|| ProgramFault::BadInput("round needs signed inputs".into()))?;
        let local = state.get("digest").and_then(Value::as_bytes).unwrap_or_default().to_vec();
        self.check(ctx.crypto(), &local, &inputs)?;
        let round = state.get("round").and_then(Value::as_u64).unwrap_or_default() + 1;
        let mut inner = state.get("inner").cloned().unwrap_or_default();
        let combined = Value::List(inputs.into_iter().map(|i| i.input).collect());
        let output = self.inner.step(&mut inner, &combined, ctx)?;
        *state = wrap_state(ctx.crypto(), round, inner);
        ctx.seal_state(&state.encode())?;
        Ok(Value::map([
            ("output", output),
            ("round", Value::Uint(round)),
            ("digest", state.get("digest").cloned().unwrap_or_default()),
        ]))
    }
}

/// The client side: one key per client plus the digest they last agreed on.
pub struct ClientGroup {
    pub keys: Vec<Keypair>,
    pub digest: Digest,
}

impl ClientGroup {
    pub fn new(crypto: &dyn CryptoProvider, seeds: impl IntoIterator<Item = [u8; 32]>) -> Self {
        ClientGroup { keys: seeds.into_iter().map(|s| crypto.keypair_from_seed(&s)).collect(), digest: [0; 32] }
    }

    pub fn policy(&self) -> FixedClientPolicy {
        FixedClientPolicy { clients: self.keys.iter().map(|k| k.public).collect() }
    }

    /// Every client signs its own input over the current digest.
    pub fn sign_round(&self, crypto: &dyn CryptoProvider, inputs: &[Value]) -> Vec<SignedInput> {
        self.keys
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (k, input))| SignedInput::sign(crypto, k, i, self.digest, input.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::{EnclaveError, Persistence};
    use crate::host::Simulation;
    use crate::ledger::ConsensusMode;

    /// Sums every client's integer input.
    struct Sum;

    impl Program for Sum {
        fn descriptor(&self) -> ProgramDescriptor {
            ProgramDescriptor::new("sum", 1, Value::Unit)
        }
        fn flags(&self) -> ProgramFlags {
            ProgramFlags { persistence: Persistence::Mutable, ..ProgramFlags::default() }
        }
        fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
            Ok(Value::Int(0))
        }
        fn step(&self, state: &mut Value, input: &Value, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
            let add: i64 = input.as_list().unwrap_or_default().iter().filter_map(Value::as_i64).sum();
            *state = Value::Int(state.as_i64().unwrap_or_default() + add);
            Ok(state.clone())
        }
    }

    fn setup() -> (Simulation, crate::enclave::Handle, ClientGroup) {
        let mut sim = Simulation::new(8, ConsensusMode::permissioned());
        let p = sim.world.add_platform("p").unwrap();
        let mut group = ClientGroup::new(sim.crypto(), (0..3u8).map(|i| [i + 1; 32]));
        let m = sim.world.register_program(fixed_client_wrap(Arc::new(Sum), group.policy())).unwrap();
        let h = sim.launch(&p, m).unwrap();
        let d = sim.step(h, &Value::map([("op", Value::str("digest"))])).unwrap();
        group.digest = d.get("digest").unwrap().as_bytes().unwrap().try_into().unwrap();
        (sim, h, group)
    }

    fn ints(xs: &[i64]) -> Vec<Value> {
        xs.iter().map(|&x| Value::Int(x)).collect()
    }

    fn advance(sim: &mut Simulation, h: crate::enclave::Handle, group: &mut ClientGroup, xs: &[i64]) -> Result<Value, EnclaveError> {
        let signed = group.sign_round(sim.crypto(), &ints(xs));
        let out = sim.step(h, &round_input(&signed))?;
        group.digest = out.get("digest").unwrap().as_bytes().unwrap().try_into().unwrap();
        Ok(out)
    }

    #[test]
    fn honest_rounds_advance() {
        let (mut sim, h, mut group) = setup();
        let out = advance(&mut sim, h, &mut group, &[1, 2, 3]).unwrap();
        assert_eq!(out.get("output"), Some(&Value::Int(6)));
        let out = advance(&mut sim, h, &mut group, &[1, 1, 1]).unwrap();
        assert_eq!(out.get("round"), Some(&Value::Uint(2)));
    }

    #[test]
    fn rolled_back_enclave_reports_state_mismatch() {
        let (mut sim, h, mut group) = setup();
        advance(&mut sim, h, &mut group, &[1, 2, 3]).unwrap();
        let old = sim.blobs_of(h).unwrap()[0].clone();
        let h2 = sim.restart_with(h, Some(&old)).unwrap();
        let err = advance(&mut sim, h2, &mut group, &[1, 1, 1]).unwrap_err();
        assert_eq!(err, EnclaveError::Program(ProgramFault::StateMismatch(vec![0, 1, 2])));
    }

    #[test]
    fn tampered_input_is_bad_signature() {
        let (mut sim, h, group) = setup();
        let mut signed = group.sign_round(sim.crypto(), &ints(&[1, 2, 3]));
        signed[1].input = Value::Int(100);
        assert_eq!(
            sim.step(h, &round_input(&signed)).unwrap_err(),
            EnclaveError::Program(ProgramFault::BadSignature(vec![1]))
        );
        signed.pop();
        assert!(matches!(sim.step(h, &round_input(&signed)), Err(EnclaveError::Program(ProgramFault::BadInput(_)))));
    }
}
