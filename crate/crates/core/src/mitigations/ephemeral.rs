use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::crypto::{CryptoProvider, Keypair, PublicKey, AEAD_NONCE_LEN};
use crate::enclave::{
    AttestationReport, AttestationVerifier, EnclaveCtx, EnclaveProgram, Handle, Measurement, Program,
    ProgramDescriptor, ProgramFault, ProgramFlags,
};
use crate::host::Simulation;
use crate::ledger::{ChainState, LedgerError, Tx, TxReceipt, TxValidator, ValidationError};
use crate::value::Value;

pub const REGISTER_KIND: &str = "eph-register";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegistryLocation {
    Ledger,
    None,
}

/// Who may replace the active key of a role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SupersedeAuth {
    /// A fresh attested instance of the same program that names the key it
    /// replaces.
    #[default]
    AttestedSuccessor,
    /// Roles are write-once.
    Never,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EphemeralIdPolicy {
    pub registry: RegistryLocation,
    pub auth: SupersedeAuth,
}

impl Default for EphemeralIdPolicy {
    fn default() -> Self {
        EphemeralIdPolicy { registry: RegistryLocation::Ledger, auth: SupersedeAuth::default() }
    }
}

/// Report data binding an ephemeral key to a role.
pub fn registration_binding(crypto: &dyn CryptoProvider, role: &str, pk: &PublicKey) -> Vec<u8> {
    crypto.hash(&Value::List(vec![Value::str(role), Value::bytes(pk.to_bytes())]).encode()).to_vec()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registration {
    pub role: String,
    pub pk: PublicKey,
    pub supersedes: Option<PublicKey>,
    pub report: AttestationReport,
}

impl Registration {
    pub fn to_value(&self) -> Value {
        Value::map([
            ("role", Value::str(self.role.clone())),
            ("pk", Value::bytes(self.pk.to_bytes())),
            ("supersedes", self.supersedes.map_or(Value::Unit, |p| Value::bytes(p.to_bytes()))),
            ("report", self.report.to_value()),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let pk = |x: &Value| x.as_bytes().and_then(|b| b.try_into().ok()).map(PublicKey::from_bytes);
        Some(Registration {
            role: v.get("role")?.as_str()?.to_string(),
            pk: pk(v.get("pk")?)?,
            supersedes: match v.get("supersedes")? {
                Value::Unit => None,
                other => Some(pk(other)?),
            },
            report: AttestationReport::from_value(v.get("report")?)?,
        })
    }
}

/// Ledger contract tracking one active ephemeral key per role.
pub struct EphemeralRegistry {
    verifier: AttestationVerifier,
    auth: SupersedeAuth,
    /// Active key, its program, and the chain height when it was admitted.
    active: BTreeMap<String, (PublicKey, Measurement, u64)>,
    retired: BTreeSet<PublicKey>,
}

impl EphemeralRegistry {
    pub fn new(verifier: AttestationVerifier, auth: SupersedeAuth) -> Self {
        EphemeralRegistry { verifier, auth, active: BTreeMap::new(), retired: BTreeSet::new() }
    }

    pub fn active(&self, role: &str) -> Option<PublicKey> {
        self.active.get(role).map(|(pk, _, _)| *pk)
    }

    pub fn role_of(&self, pk: &PublicKey) -> Option<&str> {
        self.active.iter().find(|(_, (k, _, _))| k == pk).map(|(r, _)| r.as_str())
    }

    pub fn check_active(&self, pk: &PublicKey) -> Result<(), ValidationError> {
        self.role_of(pk).map(|_| ()).ok_or(ValidationError::UnregisteredEphemeralId)
    }

    /// Head height at the time `pk` became active, if it is active.
    pub fn active_since(&self, pk: &PublicKey) -> Option<u64> {
        self.active.values().find(|(k, _, _)| k == pk).map(|(_, _, h)| *h)
    }

    pub fn roles(&self) -> impl Iterator<Item = (&str, PublicKey)> {
        self.active.iter().map(|(r, (pk, _, _))| (r.as_str(), *pk))
    }

    fn admit(&mut self, reg: &Registration, crypto: &dyn CryptoProvider, height: u64) -> Result<(), ValidationError> {
        if !self.verifier.verify(&reg.report)
            || reg.report.report_data[..32] != registration_binding(crypto, &reg.role, &reg.pk)[..]
        {
            return Err(ValidationError::BadAttestation);
        }
        if self.retired.contains(&reg.pk) || self.role_of(&reg.pk).is_some() {
            return Err(ValidationError::Malformed("ephemeral key already used".into()));
        }
        match self.active.get(&reg.role) {
            None => {}
            Some(&(current, measurement, _)) => {
                let successor = self.auth == SupersedeAuth::AttestedSuccessor
                    && reg.supersedes == Some(current)
                    && reg.report.measurement == measurement;
                if !successor {
                    return Err(ValidationError::RoleOccupied);
                }
                self.retired.insert(current);
            }
        }
        self.active.insert(reg.role.clone(), (reg.pk, reg.report.measurement, height));
        Ok(())
    }
}

impl TxValidator for EphemeralRegistry {
    fn validate(&mut self, tx: &Tx, chain: &ChainState<'_>) -> Result<(), ValidationError> {
        let reg = Registration::from_value(&tx.payload)
            .ok_or_else(|| ValidationError::Malformed("bad registration".into()))?;
        self.admit(&reg, chain.crypto(), chain.head().height)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Adds ephemeral-key registration to any program. The key pair is created
/// at launch and never sealed, so every clone or restart holds a new one.
pub struct EphemeralIdWrap {
    inner: EnclaveProgram,
}

pub fn ephemeral_wrap(inner: EnclaveProgram) -> EnclaveProgram {
    Arc::new(EphemeralIdWrap { inner })
}

/// Produces an attested registration for the instance's ephemeral key.
pub fn registration_in_enclave(
    ctx: &EnclaveCtx<'_>,
    role: &str,
    supersedes: Option<PublicKey>,
) -> Result<Registration, ProgramFault> {
    let pk = ctx.ephemeral().ok_or(ProgramFault::Rejected("no ephemeral key".into()))?.public;
    let data = registration_binding(ctx.crypto(), role, &pk);
    let report = ctx.attest(crate::enclave::report_data(&data));
    Ok(Registration { role: role.to_string(), pk, supersedes, report })
}

/// Input understood by [`EphemeralIdWrap`] (and by programs that embed the
/// same op).
pub fn register_input(role: &str, supersedes: Option<PublicKey>) -> Value {
    Value::map([
        ("op", Value::str("eph-register")),
        ("role", Value::str(role)),
        ("supersedes", supersedes.map_or(Value::Unit, |p| Value::bytes(p.to_bytes()))),
    ])
}

/// Handles the `eph-register` op if `input` is one.
pub fn handle_register_op(input: &Value, ctx: &EnclaveCtx<'_>) -> Option<Result<Value, ProgramFault>> {
    if input.get("op").and_then(Value::as_str) != Some("eph-register") {
        return None;
    }
    let role = input.get("role").and_then(Value::as_str).unwrap_or_default().to_string();
    let supersedes = input
        .get("supersedes")
        .and_then(Value::as_bytes)
        .and_then(|b| b.try_into().ok())
        .map(PublicKey::from_bytes);
    Some(registration_in_enclave(ctx, &role, supersedes).map(|r| r.to_value()))
}

impl Program for EphemeralIdWrap {
    fn descriptor(&self) -> ProgramDescriptor {
        let d = self.inner.descriptor();
        ProgramDescriptor::new(d.name, d.version, Value::map([("policy", Value::str("ephemeral-id")), ("inner", d.params)]))
    }

    fn flags(&self) -> ProgramFlags {
        ProgramFlags { ephemeral_keys: true, ..self.inner.flags() }
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        self.inner.init(ctx)
    }

    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        match handle_register_op(input, ctx) {
            Some(r) => r,
            None => self.inner.step(state, input, ctx),
        }
    }

    fn restore(&self, sealed: &[u8], ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        self.inner.restore(sealed, ctx)
    }
}

/// Asks instance `h` for a registration of `role` and submits it.
pub fn ephemeral_register(
    sim: &mut Simulation,
    h: Handle,
    role: &str,
    supersedes: Option<PublicKey>,
) -> Result<TxReceipt, LedgerError> {
    let reg = sim
        .step(h, &register_input(role, supersedes))
        .map_err(|e| LedgerError::ValidationFailed(ValidationError::Malformed(e.to_string())))?;
    sim.submit_tx(Tx::new(REGISTER_KIND, reg))
}

/// Encrypts `pt` to `recipient` under a one-off sender key derived from
/// `sender_seed`. Only the holder of the recipient's secret key can open it.
pub fn encrypt_to(
    crypto: &dyn CryptoProvider,
    sender_seed: &[u8; 32],
    recipient: &PublicKey,
    aad: &[u8],
    pt: &[u8],
) -> Value {
    let sender = crypto.keypair_from_seed(sender_seed);
    let key = crypto.agree(sender.secret(), recipient);
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    nonce.copy_from_slice(&crypto.hash(sender_seed)[..AEAD_NONCE_LEN]);
    Value::map([
        ("epk", Value::bytes(sender.public.to_bytes())),
        ("nonce", Value::bytes(nonce)),
        ("ct", Value::bytes(crypto.aead_encrypt(&key, &nonce, aad, pt))),
    ])
}

pub fn open_envelope(crypto: &dyn CryptoProvider, key: &Keypair, aad: &[u8], envelope: &Value) -> Result<Vec<u8>, ProgramFault> {
    let field = |k: &str| envelope.get(k).and_then(Value::as_bytes).ok_or(ProgramFault::DecryptFail);
    let epk = PublicKey::from_bytes(field("epk")?.try_into().map_err(|_| ProgramFault::DecryptFail)?);
    let nonce: [u8; AEAD_NONCE_LEN] = field("nonce")?.try_into().map_err(|_| ProgramFault::DecryptFail)?;
    let shared = crypto.agree(key.secret(), &epk);
    crypto.aead_decrypt(&shared, &nonce, aad, field("ct")?).map_err(|_| ProgramFault::DecryptFail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::{Persistence, PlatformId};
    use crate::ledger::ConsensusMode;
    use proptest::prelude::*;

    /// Decrypts envelopes addressed to its ephemeral key.
    struct Inbox;

    impl Program for Inbox {
        fn descriptor(&self) -> ProgramDescriptor {
            ProgramDescriptor::new("inbox", 1, Value::Unit)
        }
        fn flags(&self) -> ProgramFlags {
            ProgramFlags { persistence: Persistence::Stateless, ..ProgramFlags::default() }
        }
        fn init(&self, _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
            Ok(Value::Unit)
        }
        fn step(&self, _s: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
            let key = ctx.ephemeral().ok_or(ProgramFault::DecryptFail)?;
            open_envelope(ctx.crypto(), key, b"inbox", input).map(Value::bytes)
        }
    }

    fn setup(seed: u64, auth: SupersedeAuth) -> (Simulation, PlatformId, Measurement) {
        let mut sim = Simulation::new(seed, ConsensusMode::permissioned());
        let p = sim.world.add_platform("p").unwrap();
        let m = sim.world.register_program(ephemeral_wrap(Arc::new(Inbox))).unwrap();
        let registry = EphemeralRegistry::new(sim.world.verifier(), auth);
        sim.ledger.register_tx_validator(REGISTER_KIND, Box::new(registry)).unwrap();
        (sim, p, m)
    }

    fn registry(sim: &Simulation) -> &EphemeralRegistry {
        sim.ledger.validator::<EphemeralRegistry>(REGISTER_KIND).unwrap()
    }

    fn claimers(sim: &mut Simulation, handles: &[Handle], envelope: &Value) -> usize {
        handles.iter().filter(|&&h| sim.step(h, envelope).is_ok()).count()
    }

    #[test]
    fn clone_cannot_decrypt_payment_to_registered_key() {
        let (mut sim, p, m) = setup(1, SupersedeAuth::default());
        let e = sim.launch(&p, m).unwrap();
        ephemeral_register(&mut sim, e, "merchant", None).unwrap();
        let pk = registry(&sim).active("merchant").unwrap();
        let clone = sim.clone_instance(e, None).unwrap();
        assert_ne!(sim.world.ephemeral_public(clone).unwrap(), Some(pk));
        let env = encrypt_to(sim.crypto(), &[7; 32], &pk, b"inbox", b"pay 10");
        assert!(matches!(
            sim.step(clone, &env),
            Err(crate::enclave::EnclaveError::Program(ProgramFault::DecryptFail))
        ));
        assert_eq!(sim.step(e, &env).unwrap(), Value::bytes(b"pay 10"));
    }

    #[test]
    fn rotation_strands_messages_to_old_key() {
        let (mut sim, p, m) = setup(2, SupersedeAuth::default());
        let e = sim.launch(&p, m).unwrap();
        ephemeral_register(&mut sim, e, "merchant", None).unwrap();
        let old = registry(&sim).active("merchant").unwrap();
        let env = encrypt_to(sim.crypto(), &[9; 32], &old, b"inbox", b"late");
        let e2 = sim.restart_with(e, None).unwrap();
        ephemeral_register(&mut sim, e2, "merchant", Some(old)).unwrap();
        assert_ne!(registry(&sim).active("merchant"), Some(old));
        assert!(sim.step(e, &env).is_err());
        assert!(sim.step(e2, &env).is_err());
    }

    #[test]
    fn second_registration_waits_for_supersession() {
        let (mut sim, p, m) = setup(3, SupersedeAuth::default());
        let a = sim.launch(&p, m).unwrap();
        let b = sim.launch(&p, m).unwrap();
        ephemeral_register(&mut sim, a, "r", None).unwrap();
        assert_eq!(
            ephemeral_register(&mut sim, b, "r", None),
            Err(LedgerError::ValidationFailed(ValidationError::RoleOccupied))
        );
        let pk_a = registry(&sim).active("r").unwrap();
        ephemeral_register(&mut sim, b, "r", Some(pk_a)).unwrap();
        // A cannot come back once retired.
        let pk_b = registry(&sim).active("r").unwrap();
        assert!(ephemeral_register(&mut sim, a, "r", Some(pk_b)).is_err());
    }

    #[test]
    fn write_once_roles_never_rotate() {
        let (mut sim, p, m) = setup(4, SupersedeAuth::Never);
        let a = sim.launch(&p, m).unwrap();
        let b = sim.launch(&p, m).unwrap();
        ephemeral_register(&mut sim, a, "r", None).unwrap();
        let pk = registry(&sim).active("r");
        assert!(ephemeral_register(&mut sim, b, "r", pk).is_err());
    }

    #[test]
    fn forged_registrations_are_rejected() {
        let (mut sim, p, m) = setup(5, SupersedeAuth::default());
        let a = sim.launch(&p, m).unwrap();
        let reg = sim.step(a, &register_input("r", None)).unwrap();
        let mut forged = Registration::from_value(&reg).unwrap();
        forged.role = "other".into();
        assert_eq!(
            sim.submit_tx(Tx::new(REGISTER_KIND, forged.to_value())),
            Err(LedgerError::ValidationFailed(ValidationError::BadAttestation))
        );
    }

    /// Registry transitions from random event sequences keep one active key
    /// per role and never reactivate a retired key.
    #[derive(Clone, Debug)]
    enum Ev {
        Launch,
        Register { who: usize, supersede_active: bool },
    }

    fn ev() -> impl Strategy<Value = Ev> {
        prop_oneof![
            Just(Ev::Launch),
            (0usize..6, any::<bool>()).prop_map(|(who, supersede_active)| Ev::Register { who, supersede_active }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn registry_keeps_single_active_key(events in proptest::collection::vec(ev(), 1..20)) {
            let (mut sim, p, m) = setup(11, SupersedeAuth::default());
            let mut handles = vec![sim.launch(&p, m).unwrap()];
            let mut ever_active = Vec::new();
            for e in events {
                match e {
                    Ev::Launch => handles.push(sim.launch(&p, m).unwrap()),
                    Ev::Register { who, supersede_active } => {
                        let h = handles[who % handles.len()];
                        let sup = if supersede_active { registry(&sim).active("r") } else { None };
                        let before = registry(&sim).active("r");
                        let ok = ephemeral_register(&mut sim, h, "r", sup).is_ok();
                        let after = registry(&sim).active("r");
                        prop_assert_eq!(ok, before != after);
                        if ok {
                            prop_assert!(!ever_active.contains(&after.unwrap()));
                            ever_active.push(after.unwrap());
                        }
                    }
                }
            }
            prop_assert!(registry(&sim).roles().count() <= 1);
        }

        #[test]
        fn exactly_one_clone_decrypts(clones in 1usize..=8, seed in any::<u64>()) {
            let (mut sim, p, m) = setup(seed, SupersedeAuth::default());
            let e = sim.launch(&p, m).unwrap();
            ephemeral_register(&mut sim, e, "payee", None).unwrap();
            let mut handles = vec![e];
            for _ in 0..clones {
                handles.push(sim.clone_instance(e, None).unwrap());
            }
            let pk = registry(&sim).active("payee").unwrap();
            let env = encrypt_to(sim.crypto(), &seed.to_be_bytes().repeat(4).try_into().unwrap(), &pk, b"inbox", b"x");
            prop_assert_eq!(claimers(&mut sim, &handles, &env), 1);
        }
    }
}
