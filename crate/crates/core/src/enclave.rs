//! Enclaves as deterministic transition systems.
//!
//! An enclave is identified by its [`Measurement`] only. Two instances of the
//! same program on the same platform share the sealing key and produce
//! identical attestation reports for identical report data; the simulator's
//! [`Handle`] never leaks into anything a remote party can observe.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{
    unit_interval, CryptoProvider, Digest, Keypair, PublicKey, Signature, ToyCrypto, AEAD_NONCE_LEN,
};
use crate::value::Value;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Measurement(pub Digest);

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mr:{}", short_hex(&self.0))
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&short_hex(&self.0))
    }
}

pub(crate) fn short_hex(d: &[u8]) -> String {
    d.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlatformId(pub String);

impl fmt::Display for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Simulator-internal instance id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handle(pub u64);

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Canonical description of a program; its hash is the measurement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramDescriptor {
    pub name: String,
    pub version: u32,
    pub params: Value,
}

impl ProgramDescriptor {
    pub fn new(name: impl Into<String>, version: u32, params: Value) -> Self {
        ProgramDescriptor { name: name.into(), version, params }
    }

    pub fn measurement(&self, crypto: &dyn CryptoProvider) -> Measurement {
        let params_digest = crypto.hash(&self.params.encode());
        let canonical = Value::map([
            ("name", Value::str(self.name.clone())),
            ("version", Value::Uint(u64::from(self.version))),
            ("params", Value::bytes(params_digest)),
        ]);
        Measurement(crypto.hash(&canonical.encode()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Persistence {
    /// Fetches nothing from storage on restart.
    Stateless,
    /// Seals configuration that never changes after setup (e.g. a signing key).
    ImmutableConfig,
    /// Seals mutable state.
    Mutable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgramFlags {
    pub deterministic: bool,
    pub uses_randomness: bool,
    pub ephemeral_keys: bool,
    pub persistence: Persistence,
}

impl Default for ProgramFlags {
    fn default() -> Self {
        ProgramFlags {
            deterministic: true,
            uses_randomness: false,
            ephemeral_keys: false,
            persistence: Persistence::Mutable,
        }
    }
}

/// Program-defined rejection. Returned to the host as a typed output; the
/// instance stays live and its state is left untouched.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ProgramFault {
    #[error("malformed input: {0}")]
    BadInput(String),
    #[error("state mismatch reported by clients {0:?}")]
    StateMismatch(Vec<usize>),
    #[error("bad signature from clients {0:?}")]
    BadSignature(Vec<usize>),
    #[error("monotonic counter mismatch: expected {expected}, found {found}")]
    CounterMismatch { expected: u64, found: u64 },
    #[error("monotonic counters unsupported on this platform")]
    CounterUnsupported,
    #[error("latest processed height {height} outside [{min}, {max}]")]
    NotInRange { height: u64, min: u64, max: u64 },
    #[error("no fresh heartbeat acknowledgment")]
    NoAck,
    #[error("decryption failed")]
    DecryptFail,
    #[error("query addressed to a different contract")]
    AddressMismatch,
    #[error("supplied chain breaks at height {0}")]
    BrokenChain(u64),
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("throttling token for this block already spent")]
    ThrottleExceeded,
    #[error("enclave not enrolled")]
    NotEnrolled,
    #[error("attestation failed")]
    AttestationFailed,
    #[error("{0}")]
    Rejected(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("program name `{0}` already registered with a different body")]
    DuplicateName(String),
    #[error("unknown measurement {0}")]
    UnknownMeasurement(Measurement),
    #[error("unknown platform {0}")]
    UnknownPlatform(PlatformId),
    #[error("platform {0} already exists")]
    DuplicatePlatform(PlatformId),
    #[error("unknown instance {0}")]
    UnknownHandle(Handle),
    #[error("instance {0} is not live")]
    DeadInstance(Handle),
    #[error("sealed blob failed integrity check")]
    IntegrityFailure,
    #[error("monotonic counters unsupported on this platform")]
    CounterUnsupported,
    #[error(transparent)]
    Program(#[from] ProgramFault),
}

pub trait Program: Send + Sync {
    fn descriptor(&self) -> ProgramDescriptor;

    fn flags(&self) -> ProgramFlags {
        ProgramFlags::default()
    }

    fn init(&self, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault>;

    /// The transition function: mutates `state` and returns the output.
    fn step(&self, state: &mut Value, input: &Value, ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault>;

    /// Rebuilds volatile state from an unsealed payload at restart.
    fn restore(&self, sealed: &[u8], _ctx: &mut EnclaveCtx<'_>) -> Result<Value, ProgramFault> {
        Value::decode(sealed).map_err(|e| ProgramFault::BadInput(e.to_string()))
    }
}

pub type EnclaveProgram = Arc<dyn Program>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Binding {
    pub platform: PlatformId,
    pub measurement: Measurement,
}

impl Binding {
    fn aad(&self) -> Vec<u8> {
        Value::map([
            ("platform", Value::str(self.platform.0.clone())),
            ("measurement", Value::bytes(self.measurement.0)),
        ])
        .encode()
    }
}

/// Authenticated ciphertext bound to (platform, measurement). Carries no
/// freshness: `seq_hint` is host-visible metadata that unseal never reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub ciphertext: Vec<u8>,
    pub binding: Binding,
    pub seq_hint: u64,
    nonce: [u8; AEAD_NONCE_LEN],
}

impl SealedBlob {
    /// Tampering hook for adversarial tests.
    pub fn with_ciphertext(mut self, ciphertext: Vec<u8>) -> Self {
        self.ciphertext = ciphertext;
        self
    }

    pub fn relabel(mut self, binding: Binding) -> Self {
        self.binding = binding;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformAttributes {
    pub platform: PlatformId,
    pub tcb: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationReport {
    pub measurement: Measurement,
    pub platform_attributes: PlatformAttributes,
    pub report_data: [u8; 64],
    pub signature: Signature,
}

impl AttestationReport {
    fn signed_bytes(measurement: &Measurement, attrs: &PlatformAttributes, report_data: &[u8; 64]) -> Vec<u8> {
        Value::map([
            ("measurement", Value::bytes(measurement.0)),
            ("platform", Value::str(attrs.platform.0.clone())),
            ("tcb", Value::str(attrs.tcb.clone())),
            ("report_data", Value::bytes(report_data)),
        ])
        .encode()
    }

    pub fn with_signature(mut self, signature: Signature) -> Self {
        self.signature = signature;
        self
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("measurement", Value::bytes(self.measurement.0)),
            ("platform", Value::str(self.platform_attributes.platform.0.clone())),
            ("tcb", Value::str(self.platform_attributes.tcb.clone())),
            ("report_data", Value::bytes(self.report_data)),
            ("signature", Value::bytes(self.signature.to_bytes())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Self> {
        let bytes = |k: &str| v.get(k).and_then(Value::as_bytes);
        Some(AttestationReport {
            measurement: Measurement(bytes("measurement")?.try_into().ok()?),
            platform_attributes: PlatformAttributes {
                platform: PlatformId(v.get("platform")?.as_str()?.to_string()),
                tcb: v.get("tcb")?.as_str()?.to_string(),
            },
            report_data: bytes("report_data")?.try_into().ok()?,
            signature: Signature::from_bytes(bytes("signature")?.try_into().ok()?),
        })
    }
}

/// Packs up to 64 bytes of caller data into a report-data field.
pub fn report_data(bytes: &[u8]) -> [u8; 64] {
    let mut out = [0u8; 64];
    let n = bytes.len().min(64);
    out[..n].copy_from_slice(&bytes[..n]);
    out
}

/// What a remote verifier needs: the manufacturer key and the set of
/// registered programs.
#[derive(Clone, Debug)]
pub struct AttestationVerifier {
    crypto: Arc<dyn CryptoProvider>,
    manufacturer: PublicKey,
    registered: BTreeSet<Measurement>,
}

impl AttestationVerifier {
    pub fn verify(&self, report: &AttestationReport) -> bool {
        let msg = AttestationReport::signed_bytes(&report.measurement, &report.platform_attributes, &report.report_data);
        self.registered.contains(&report.measurement) && self.crypto.verify(&self.manufacturer, &msg, &report.signature)
    }
}

#[derive(Debug)]
struct Platform {
    master_secret: [u8; 32],
    tcb: String,
    counter_enabled: bool,
    counter: u64,
    seal_seq: BTreeMap<Measurement, u64>,
}

pub struct EnclaveInstance {
    handle: Handle,
    platform: PlatformId,
    measurement: Measurement,
    volatile_state: Value,
    ephemeral: Option<Keypair>,
    rng: ChaCha20Rng,
    live: bool,
}

impl EnclaveInstance {
    pub fn handle(&self) -> Handle {
        self.handle
    }

    pub fn platform(&self) -> &PlatformId {
        &self.platform
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn is_live(&self) -> bool {
        self.live
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SealGuard {
    Any,
    ConfigOnly,
}

/// The in-enclave view of the platform, handed to [`Program`] callbacks.
pub struct EnclaveCtx<'a> {
    crypto: &'a dyn CryptoProvider,
    binding: Binding,
    platform: &'a mut Platform,
    rng: &'a mut ChaCha20Rng,
    ephemeral: Option<&'a Keypair>,
    manufacturer: &'a Keypair,
    disk: &'a mut Vec<SealedBlob>,
    guard: SealGuard,
}

impl<'a> EnclaveCtx<'a> {
    pub fn crypto(&self) -> &dyn CryptoProvider {
        self.crypto
    }

    pub fn measurement(&self) -> Measurement {
        self.binding.measurement
    }

    pub fn platform_id(&self) -> &PlatformId {
        &self.binding.platform
    }

    pub fn draw_u64(&mut self) -> u64 {
        self.crypto.uniform(self.rng)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn draw_unit(&mut self) -> f64 {
        unit_interval(self.draw_u64())
    }

    pub fn ephemeral(&self) -> Option<&Keypair> {
        self.ephemeral
    }

    /// Key pair derived from sealed secret material; identical across clones.
    pub fn derive_keypair(&self, secret: &[u8], label: &[u8]) -> Keypair {
        let seed = self.crypto.kdf(secret, label, b"keypair");
        self.crypto.keypair_from_seed(&seed)
    }

    /// Forbids sealing of mutable state for the rest of this callback.
    pub fn restrict_sealing_to_config(&mut self) {
        self.guard = SealGuard::ConfigOnly;
    }

    pub fn seal_state(&mut self, payload: &[u8]) -> Result<SealedBlob, ProgramFault> {
        if self.guard == SealGuard::ConfigOnly {
            return Err(ProgramFault::PolicyViolation("stateless enclave may not seal mutable state".into()));
        }
        Ok(self.seal(payload))
    }

    pub fn seal_config(&mut self, payload: &[u8]) -> SealedBlob {
        self.seal(payload)
    }

    fn seal(&mut self, payload: &[u8]) -> SealedBlob {
        let seq = self.platform.seal_seq.entry(self.binding.measurement).or_insert(0);
        *seq += 1;
        let blob = seal_with(self.crypto, &self.platform.master_secret, &self.binding, *seq, payload);
        self.disk.push(blob.clone());
        blob
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, ProgramFault> {
        unseal_with(self.crypto, &self.platform.master_secret, &self.binding, blob)
            .map_err(|_| ProgramFault::Rejected("sealed blob failed integrity check".into()))
    }

    pub fn attest(&self, report_data: [u8; 64]) -> AttestationReport {
        attest_with(self.crypto, self.manufacturer, self.binding.measurement, self.platform, &self.binding.platform, report_data)
    }

    /// Checks a peer's report against the manufacturer key and this
    /// enclave's own measurement.
    pub fn verify_peer(&self, report: &AttestationReport) -> bool {
        let msg = AttestationReport::signed_bytes(&report.measurement, &report.platform_attributes, &report.report_data);
        report.measurement == self.binding.measurement && self.crypto.verify(&self.manufacturer.public, &msg, &report.signature)
    }

    pub fn read_counter(&self) -> Result<u64, ProgramFault> {
        if !self.platform.counter_enabled {
            return Err(ProgramFault::CounterUnsupported);
        }
        Ok(self.platform.counter)
    }

    pub fn increment_counter(&mut self) -> Result<u64, ProgramFault> {
        if !self.platform.counter_enabled {
            return Err(ProgramFault::CounterUnsupported);
        }
        self.platform.counter += 1;
        Ok(self.platform.counter)
    }
}

fn sealing_key(crypto: &dyn CryptoProvider, master_secret: &[u8; 32], measurement: &Measurement) -> [u8; 32] {
    crypto.kdf(master_secret, &measurement.0, b"sealing-key")
}

fn seal_with(
    crypto: &dyn CryptoProvider,
    master_secret: &[u8; 32],
    binding: &Binding,
    seq: u64,
    payload: &[u8],
) -> SealedBlob {
    let key = sealing_key(crypto, master_secret, &binding.measurement);
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    nonce[4..].copy_from_slice(&seq.to_be_bytes());
    SealedBlob {
        ciphertext: crypto.aead_encrypt(&key, &nonce, &binding.aad(), payload),
        binding: binding.clone(),
        seq_hint: seq,
        nonce,
    }
}

fn unseal_with(
    crypto: &dyn CryptoProvider,
    master_secret: &[u8; 32],
    own: &Binding,
    blob: &SealedBlob,
) -> Result<Vec<u8>, EnclaveError> {
    // The blob's binding label is host-controlled; only the key and the
    // enclave's own binding decide.
    let key = sealing_key(crypto, master_secret, &own.measurement);
    crypto
        .aead_decrypt(&key, &blob.nonce, &own.aad(), &blob.ciphertext)
        .map_err(|_| EnclaveError::IntegrityFailure)
}

fn attest_with(
    crypto: &dyn CryptoProvider,
    manufacturer: &Keypair,
    measurement: Measurement,
    platform: &Platform,
    platform_id: &PlatformId,
    report_data: [u8; 64],
) -> AttestationReport {
    let attrs = PlatformAttributes { platform: platform_id.clone(), tcb: platform.tcb.clone() };
    let msg = AttestationReport::signed_bytes(&measurement, &attrs, &report_data);
    AttestationReport { measurement, platform_attributes: attrs, report_data, signature: crypto.sign(manufacturer, &msg) }
}

/// All platforms, registered programs and enclave instances of a scenario,
/// plus the untrusted disk holding every blob ever sealed.
pub struct TeeWorld {
    crypto: Arc<dyn CryptoProvider>,
    seed: u64,
    manufacturer: Keypair,
    programs: BTreeMap<Measurement, (ProgramDescriptor, EnclaveProgram)>,
    names: BTreeMap<String, Measurement>,
    platforms: BTreeMap<PlatformId, Platform>,
    instances: BTreeMap<Handle, EnclaveInstance>,
    next_handle: u64,
    disk: Vec<SealedBlob>,
}

impl TeeWorld {
    pub fn new(seed: u64) -> Self {
        Self::with_crypto(seed, Arc::new(ToyCrypto))
    }

    pub fn with_crypto(seed: u64, crypto: Arc<dyn CryptoProvider>) -> Self {
        let mseed = crypto.kdf(&seed.to_be_bytes(), b"manufacturer", b"attestation-key");
        let manufacturer = crypto.keypair_from_seed(&mseed);
        TeeWorld {
            crypto,
            seed,
            manufacturer,
            programs: BTreeMap::new(),
            names: BTreeMap::new(),
            platforms: BTreeMap::new(),
            instances: BTreeMap::new(),
            next_handle: 1,
            disk: Vec::new(),
        }
    }

    pub fn crypto(&self) -> &dyn CryptoProvider {
        self.crypto.as_ref()
    }

    pub fn crypto_arc(&self) -> Arc<dyn CryptoProvider> {
        Arc::clone(&self.crypto)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a program and returns its measurement. Registering an
    /// identical descriptor again is idempotent.
    pub fn register_program(&mut self, program: EnclaveProgram) -> Result<Measurement, EnclaveError> {
        let descriptor = program.descriptor();
        let measurement = descriptor.measurement(self.crypto.as_ref());
        if let Some(existing) = self.names.get(&descriptor.name) {
            return if *existing == measurement {
                Ok(measurement)
            } else {
                Err(EnclaveError::DuplicateName(descriptor.name))
            };
        }
        self.names.insert(descriptor.name.clone(), measurement);
        self.programs.insert(measurement, (descriptor, program));
        Ok(measurement)
    }

    pub fn program(&self, measurement: &Measurement) -> Option<&EnclaveProgram> {
        self.programs.get(measurement).map(|(_, p)| p)
    }

    pub fn add_platform(&mut self, id: impl Into<String>) -> Result<PlatformId, EnclaveError> {
        let id = PlatformId(id.into());
        if self.platforms.contains_key(&id) {
            return Err(EnclaveError::DuplicatePlatform(id));
        }
        let master_secret = self.crypto.kdf(&self.seed.to_be_bytes(), id.0.as_bytes(), b"platform-master-secret");
        self.platforms.insert(
            id.clone(),
            Platform { master_secret, tcb: "tcb-1".into(), counter_enabled: false, counter: 0, seal_seq: BTreeMap::new() },
        );
        Ok(id)
    }

    pub fn set_counter_enabled(&mut self, platform: &PlatformId, enabled: bool) -> Result<(), EnclaveError> {
        self.platform_mut(platform)?.counter_enabled = enabled;
        Ok(())
    }

    fn platform_mut(&mut self, id: &PlatformId) -> Result<&mut Platform, EnclaveError> {
        self.platforms.get_mut(id).ok_or_else(|| EnclaveError::UnknownPlatform(id.clone()))
    }

    pub fn read_monotonic_counter(&self, platform: &PlatformId) -> Result<u64, EnclaveError> {
        let p = self.platforms.get(platform).ok_or_else(|| EnclaveError::UnknownPlatform(platform.clone()))?;
        if !p.counter_enabled {
            return Err(EnclaveError::CounterUnsupported);
        }
        Ok(p.counter)
    }

    pub fn increment_monotonic_counter(&mut self, platform: &PlatformId) -> Result<u64, EnclaveError> {
        let p = self.platform_mut(platform)?;
        if !p.counter_enabled {
            return Err(EnclaveError::CounterUnsupported);
        }
        p.counter += 1;
        Ok(p.counter)
    }

    fn stream_seed(&self, label: &[u8], handle: Handle) -> [u8; 32] {
        self.crypto.kdf(&self.seed.to_be_bytes(), label, &handle.0.to_be_bytes())
    }

    /// Starts a fresh instance: new handle, `init()` state, new ephemeral key
    /// pair when the program asks for one.
    pub fn launch(&mut self, platform: &PlatformId, measurement: Measurement) -> Result<Handle, EnclaveError> {
        self.launch_inner(platform, measurement, None)
    }

    /// Starts a fresh instance whose state is restored from `blob`.
    pub fn launch_from_blob(
        &mut self,
        platform: &PlatformId,
        measurement: Measurement,
        blob: &SealedBlob,
    ) -> Result<Handle, EnclaveError> {
        self.launch_inner(platform, measurement, Some(blob))
    }

    fn launch_inner(
        &mut self,
        platform: &PlatformId,
        measurement: Measurement,
        blob: Option<&SealedBlob>,
    ) -> Result<Handle, EnclaveError> {
        let program = Arc::clone(
            self.program(&measurement).ok_or(EnclaveError::UnknownMeasurement(measurement))?,
        );
        if !self.platforms.contains_key(platform) {
            return Err(EnclaveError::UnknownPlatform(platform.clone()));
        }
        let handle = Handle(self.next_handle);
        let rng = ChaCha20Rng::from_seed(self.stream_seed(b"enclave-rng", handle));
        let ephemeral = program
            .flags()
            .ephemeral_keys
            .then(|| self.crypto.keypair_from_seed(&self.stream_seed(b"ephemeral-key", handle)));
        let mut instance = EnclaveInstance {
            handle,
            platform: platform.clone(),
            measurement,
            volatile_state: Value::Unit,
            ephemeral,
            rng,
            live: true,
        };
        let binding = Binding { platform: platform.clone(), measurement };
        let plat = self.platforms.get_mut(platform).expect("checked above");
        let mut ctx = EnclaveCtx {
            crypto: self.crypto.as_ref(),
            binding: binding.clone(),
            platform: plat,
            rng: &mut instance.rng,
            ephemeral: instance.ephemeral.as_ref(),
            manufacturer: &self.manufacturer,
            disk: &mut self.disk,
            guard: SealGuard::Any,
        };
        instance.volatile_state = match blob {
            None => program.init(&mut ctx)?,
            Some(blob) => {
                let payload = unseal_with(ctx.crypto, &ctx.platform.master_secret, &binding, blob)?;
                program.restore(&payload, &mut ctx)?
            }
        };
        self.next_handle += 1;
        self.instances.insert(handle, instance);
        Ok(handle)
    }

    pub fn instance(&self, handle: Handle) -> Result<&EnclaveInstance, EnclaveError> {
        self.instances.get(&handle).ok_or(EnclaveError::UnknownHandle(handle))
    }

    fn live_instance(&self, handle: Handle) -> Result<&EnclaveInstance, EnclaveError> {
        let inst = self.instance(handle)?;
        if !inst.live {
            return Err(EnclaveError::DeadInstance(handle));
        }
        Ok(inst)
    }

    pub fn is_live(&self, handle: Handle) -> bool {
        self.instances.get(&handle).is_some_and(|i| i.live)
    }

    pub fn live_handles(&self) -> Vec<Handle> {
        self.instances.values().filter(|i| i.live).map(|i| i.handle).collect()
    }

    pub fn binding_of(&self, handle: Handle) -> Result<Binding, EnclaveError> {
        let inst = self.instance(handle)?;
        Ok(Binding { platform: inst.platform.clone(), measurement: inst.measurement })
    }

    /// Observer access for the harness; not an adversary capability.
    pub fn state(&self, handle: Handle) -> Result<&Value, EnclaveError> {
        Ok(&self.instance(handle)?.volatile_state)
    }

    pub fn state_digest(&self, handle: Handle) -> Result<Digest, EnclaveError> {
        Ok(self.crypto.hash(&self.state(handle)?.encode()))
    }

    pub fn ephemeral_public(&self, handle: Handle) -> Result<Option<PublicKey>, EnclaveError> {
        Ok(self.instance(handle)?.ephemeral.map(|k| k.public))
    }

    pub fn kill(&mut self, handle: Handle) -> Result<(), EnclaveError> {
        let inst = self.instances.get_mut(&handle).ok_or(EnclaveError::UnknownHandle(handle))?;
        inst.live = false;
        Ok(())
    }

    /// Runs the program's transition function on one input. A
    /// [`ProgramFault`] leaves the state unchanged.
    pub fn step(&mut self, handle: Handle, input: &Value) -> Result<Value, EnclaveError> {
        self.with_ctx(handle, |program, state, ctx| {
            let mut next = state.clone();
            let out = program.step(&mut next, input, ctx)?;
            *state = next;
            Ok(out)
        })
    }

    fn with_ctx<T>(
        &mut self,
        handle: Handle,
        f: impl FnOnce(&EnclaveProgram, &mut Value, &mut EnclaveCtx<'_>) -> Result<T, EnclaveError>,
    ) -> Result<T, EnclaveError> {
        self.live_instance(handle)?;
        let mut inst = self.instances.remove(&handle).expect("checked live");
        let program = Arc::clone(&self.programs[&inst.measurement].1);
        let binding = Binding { platform: inst.platform.clone(), measurement: inst.measurement };
        let plat = self.platforms.get_mut(&inst.platform).expect("instances only exist on known platforms");
        let mut state = std::mem::take(&mut inst.volatile_state);
        let result = {
            let mut ctx = EnclaveCtx {
                crypto: self.crypto.as_ref(),
                binding,
                platform: plat,
                rng: &mut inst.rng,
                ephemeral: inst.ephemeral.as_ref(),
                manufacturer: &self.manufacturer,
                disk: &mut self.disk,
                guard: SealGuard::Any,
            };
            f(&program, &mut state, &mut ctx)
        };
        inst.volatile_state = state;
        self.instances.insert(handle, inst);
        result
    }

    pub fn seal(&mut self, handle: Handle, payload: &[u8]) -> Result<SealedBlob, EnclaveError> {
        self.with_ctx(handle, |_, _, ctx| Ok(ctx.seal(payload)))
    }

    pub fn unseal(&self, handle: Handle, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
        let inst = self.live_instance(handle)?;
        let binding = Binding { platform: inst.platform.clone(), measurement: inst.measurement };
        unseal_with(self.crypto.as_ref(), &self.platforms[&inst.platform].master_secret, &binding, blob)
    }

    pub fn attest(&self, handle: Handle, data: &[u8]) -> Result<AttestationReport, EnclaveError> {
        let inst = self.live_instance(handle)?;
        Ok(attest_with(
            self.crypto.as_ref(),
            &self.manufacturer,
            inst.measurement,
            &self.platforms[&inst.platform],
            &inst.platform,
            report_data(data),
        ))
    }

    pub fn verifier(&self) -> AttestationVerifier {
        AttestationVerifier {
            crypto: Arc::clone(&self.crypto),
            manufacturer: self.manufacturer.public,
            registered: self.programs.keys().copied().collect(),
        }
    }

    pub fn verify_attestation(&self, report: &AttestationReport) -> bool {
        self.verifier().verify(report)
    }

    /// Every blob ever sealed, in sealing order. Host-visible.
    pub fn disk(&self) -> &[SealedBlob] {
        &self.disk
    }

    pub fn blobs_for(&self, binding: &Binding) -> Vec<SealedBlob> {
        self.disk.iter().filter(|b| &b.binding == binding).cloned().collect()
    }
}


#[cfg(test)]
mod tests {
    use super::test_programs::*;
    use super::*;
    use proptest::prelude::*;

    fn world() -> (TeeWorld, PlatformId, PlatformId) {
        let mut w = TeeWorld::new(42);
        let p1 = w.add_platform("P1").unwrap();
        let p2 = w.add_platform("P2").unwrap();
        (w, p1, p2)
    }

    fn counter(name: &'static str) -> EnclaveProgram {
        Arc::new(Counter { name, start: 1, seal: true })
    }

    #[test]
    fn registration_is_deterministic_and_injective() {
        let (mut w, _, _) = world();
        let a = w.register_program(counter("flip")).unwrap();
        assert_eq!(w.register_program(counter("flip")).unwrap(), a);
        let b = w.register_program(counter("counter")).unwrap();
        assert_ne!(a, b);
        let other_body: EnclaveProgram = Arc::new(Counter { name: "flip", start: 5, seal: true });
        assert_eq!(w.register_program(other_body), Err(EnclaveError::DuplicateName("flip".into())));
        // identity does not depend on the world or platform
        let mut w2 = TeeWorld::new(7);
        assert_eq!(w2.register_program(counter("flip")).unwrap(), a);
    }

    #[test]
    fn launch_gives_init_state_distinct_handles_and_keys() {
        let (mut w, p1, _) = world();
        let m = w.register_program(Arc::new(Dice)).unwrap();
        let a = w.launch(&p1, m).unwrap();
        let b = w.launch(&p1, m).unwrap();
        assert_ne!(a, b);
        assert_eq!(w.state(a).unwrap(), &Value::List(vec![]));
        assert_eq!(w.instance(a).unwrap().measurement(), w.instance(b).unwrap().measurement());
        assert_ne!(w.ephemeral_public(a).unwrap(), w.ephemeral_public(b).unwrap());
        let bogus = Measurement([9; 32]);
        assert_eq!(w.launch(&p1, bogus), Err(EnclaveError::UnknownMeasurement(bogus)));
    }

    #[test]
    fn step_composes_and_faults_leave_state() {
        let (mut w, p1, _) = world();
        let m = w.register_program(counter("ctr")).unwrap();
        let e = w.launch(&p1, m).unwrap();
        assert_eq!(w.step(e, &"increment".into()).unwrap(), Value::Int(2));
        assert_eq!(w.step(e, &"increment".into()).unwrap(), Value::Int(3));
        let err = w.step(e, &"bogus".into()).unwrap_err();
        assert!(matches!(err, EnclaveError::Program(ProgramFault::BadInput(_))));
        assert!(w.is_live(e));
        assert_eq!(w.state(e).unwrap(), &Value::Int(3));
    }

    #[test]
    fn same_seed_gives_same_random_trace() {
        let trace = |seed| {
            let mut w = TeeWorld::new(seed);
            let p = w.add_platform("P").unwrap();
            let m = w.register_program(Arc::new(Dice)).unwrap();
            let e = w.launch(&p, m).unwrap();
            (0..5).map(|_| w.step(e, &Value::Unit).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(trace(3), trace(3));
        assert_ne!(trace(3), trace(4));
    }

    #[test]
    fn sealing_binds_platform_and_measurement_but_not_freshness() {
        let (mut w, p1, p2) = world();
        let m = w.register_program(counter("ctr")).unwrap();
        let other = w.register_program(counter("other")).unwrap();
        let a = w.launch(&p1, m).unwrap();
        let clone = w.launch(&p1, m).unwrap();
        let remote = w.launch(&p2, m).unwrap();
        let foreign = w.launch(&p1, other).unwrap();

        let blob = w.seal(a, b"s1").unwrap();
        assert_eq!(w.unseal(a, &blob).unwrap(), b"s1");
        assert_eq!(w.unseal(clone, &blob).unwrap(), b"s1");
        assert_eq!(w.unseal(remote, &blob), Err(EnclaveError::IntegrityFailure));
        assert_eq!(w.unseal(foreign, &blob), Err(EnclaveError::IntegrityFailure));

        // relabelling the host-visible binding does not help
        let relabelled = blob.clone().relabel(w.binding_of(foreign).unwrap());
        assert_eq!(w.unseal(foreign, &relabelled), Err(EnclaveError::IntegrityFailure));

        let mut tampered = blob.ciphertext.clone();
        tampered[0] ^= 0x80;
        assert_eq!(w.unseal(a, &blob.clone().with_ciphertext(tampered)), Err(EnclaveError::IntegrityFailure));

        let newer = w.seal(clone, b"s2").unwrap();
        assert!(newer.seq_hint > blob.seq_hint);
        // stale blob still accepted
        assert_eq!(w.unseal(a, &blob).unwrap(), b"s1");
    }

    #[test]
    fn restart_from_older_blob_rolls_back() {
        let (mut w, p1, _) = world();
        let m = w.register_program(counter("ctr")).unwrap();
        let e = w.launch(&p1, m).unwrap();
        w.step(e, &"increment".into()).unwrap();
        w.step(e, &"increment".into()).unwrap();
        let blobs = w.blobs_for(&w.binding_of(e).unwrap());
        assert_eq!(blobs.len(), 2);
        w.kill(e).unwrap();
        let r = w.launch_from_blob(&p1, m, &blobs[0]).unwrap();
        assert_eq!(w.state(r).unwrap(), &Value::Int(2));
        assert_eq!(w.step(e, &"get".into()), Err(EnclaveError::DeadInstance(e)));
    }

    #[test]
    fn attestation_is_handle_blind() {
        let (mut w, p1, p2) = world();
        let m = w.register_program(counter("ctr")).unwrap();
        let a = w.launch(&p1, m).unwrap();
        let b = w.launch(&p1, m).unwrap();
        let c = w.launch(&p2, m).unwrap();
        let ra = w.attest(a, b"hello").unwrap();
        assert!(w.verify_attestation(&ra));
        assert_eq!(ra, w.attest(b, b"hello").unwrap());
        assert_ne!(ra, w.attest(c, b"hello").unwrap());
        assert_ne!(ra, w.attest(b, b"other").unwrap());

        let forged = ra.clone().with_signature(w.attest(b, b"other").unwrap().signature);
        assert!(!w.verify_attestation(&forged));
        let mut unregistered = ra.clone();
        unregistered.measurement = Measurement([1; 32]);
        assert!(!w.verify_attestation(&unregistered));
    }

    #[test]
    fn monotonic_counter_semantics() {
        let (mut w, p1, _) = world();
        assert_eq!(w.read_monotonic_counter(&p1), Err(EnclaveError::CounterUnsupported));
        w.set_counter_enabled(&p1, true).unwrap();
        assert_eq!(w.read_monotonic_counter(&p1).unwrap(), 0);
        assert_eq!(w.increment_monotonic_counter(&p1).unwrap(), 1);
        assert_eq!(w.read_monotonic_counter(&p1).unwrap(), 1);

        let m = w.register_program(Arc::new(MonoCounterUser)).unwrap();
        let a = w.launch(&p1, m).unwrap();
        let b = w.launch(&p1, m).unwrap();
        w.step(a, &"start".into()).unwrap();
        w.step(b, &"start".into()).unwrap();
        assert_eq!(w.read_monotonic_counter(&p1).unwrap(), 3);
        let ok = [a, b].iter().filter(|h| w.step(**h, &"check".into()).is_ok()).count();
        assert_eq!(ok, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// unseal succeeds exactly for blobs sealed under the same binding,
        /// whatever their sequence number.
        #[test]
        fn unseal_accepts_exactly_matching_bindings(
            seal_at in proptest::collection::vec((0usize..2, 0usize..2), 1..6),
            probe in (0usize..2, 0usize..2),
        ) {
            let mut w = TeeWorld::new(1);
            let plats = [w.add_platform("A").unwrap(), w.add_platform("B").unwrap()];
            let progs = [w.register_program(counter("x")).unwrap(), w.register_program(counter("y")).unwrap()];
            let mut blobs = Vec::new();
            for (p, m) in &seal_at {
                let h = w.launch(&plats[*p], progs[*m]).unwrap();
                blobs.push(((*p, *m), w.seal(h, &[*p as u8, *m as u8]).unwrap()));
            }
            let reader = w.launch(&plats[probe.0], progs[probe.1]).unwrap();
            for (binding, blob) in blobs.iter().rev() {
                prop_assert_eq!(w.unseal(reader, blob).is_ok(), *binding == probe);
            }
        }
    }
}
