//! Case-study protocols. Each module provides the enclave program(s), the
//! ledger contracts it needs, and a scenario runner for the honest run and
//! the rollback and cloning attacks against its vulnerable and patched
//! variants.

pub mod bite;
pub mod ccf;
pub mod fastkitten;
pub mod network;
pub mod phala;
pub mod pol;
pub mod pouw;
pub mod secret;
pub mod state_machine;
pub mod ten;
pub mod twilight;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::enclave::EnclaveError;
use crate::host::{AttackKind, AttackOutcome, AttackScript, Event, EventLog, Evidence, HostError, Simulation};
use crate::ledger::{ConsensusMode, LedgerError, NodeConnection, ServeStrategy};
use crate::mitigations::TimestampVariant;
use crate::stats::proportion;
use crate::value::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    #[serde(rename = "pouw")]
    PoUw,
    #[serde(rename = "proof-of-luck")]
    ProofOfLuck,
    #[serde(rename = "twilight")]
    Twilight,
    #[serde(rename = "fastkitten-lottery")]
    FastKittenLottery,
    #[serde(rename = "ccf-kvs")]
    CcfKvs,
    #[serde(rename = "phala-worker")]
    PhalaWorker,
    #[serde(rename = "secret-query")]
    SecretQuery,
    #[serde(rename = "ten-pobi")]
    TenPobi,
    #[serde(rename = "bite-fork")]
    BiteFork,
    #[serde(rename = "state-machine")]
    StateMachine,
}

impl ProtocolId {
    /// Protocols that appear in the attack matrix, in report order.
    pub const MATRIX: [ProtocolId; 9] = [
        ProtocolId::PoUw,
        ProtocolId::ProofOfLuck,
        ProtocolId::Twilight,
        ProtocolId::FastKittenLottery,
        ProtocolId::CcfKvs,
        ProtocolId::PhalaWorker,
        ProtocolId::SecretQuery,
        ProtocolId::TenPobi,
        ProtocolId::BiteFork,
    ];

    pub const ALL: [ProtocolId; 10] = [
        ProtocolId::PoUw,
        ProtocolId::ProofOfLuck,
        ProtocolId::Twilight,
        ProtocolId::FastKittenLottery,
        ProtocolId::CcfKvs,
        ProtocolId::PhalaWorker,
        ProtocolId::SecretQuery,
        ProtocolId::TenPobi,
        ProtocolId::BiteFork,
        ProtocolId::StateMachine,
    ];

    /// Identifier used in scenario files.
    pub fn id(self) -> &'static str {
        match self {
            ProtocolId::PoUw => "pouw",
            ProtocolId::ProofOfLuck => "proof-of-luck",
            ProtocolId::Twilight => "twilight",
            ProtocolId::FastKittenLottery => "fastkitten-lottery",
            ProtocolId::CcfKvs => "ccf-kvs",
            ProtocolId::PhalaWorker => "phala-worker",
            ProtocolId::SecretQuery => "secret-query",
            ProtocolId::TenPobi => "ten-pobi",
            ProtocolId::BiteFork => "bite-fork",
            ProtocolId::StateMachine => "state-machine",
        }
    }

    /// Name used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            ProtocolId::PoUw => "PoUW",
            ProtocolId::ProofOfLuck => "ProofOfLuck",
            ProtocolId::Twilight => "Twilight",
            ProtocolId::FastKittenLottery => "FastKittenLottery",
            ProtocolId::CcfKvs => "CcfKvs",
            ProtocolId::PhalaWorker => "PhalaWorker",
            ProtocolId::SecretQuery => "SecretQuery",
            ProtocolId::TenPobi => "TenPobi",
            ProtocolId::BiteFork => "BiteForkScenario",
            ProtocolId::StateMachine => "StateMachine",
        }
    }

    pub fn applicable(self, attack: AttackKind) -> bool {
        !matches!(
            (self, attack),
            (ProtocolId::Twilight, AttackKind::Rollback) | (ProtocolId::BiteFork, AttackKind::Rollback)
        )
    }

    /// Parameter keys the protocol understands.
    pub fn params(self) -> &'static [&'static str] {
        match self {
            ProtocolId::PoUw => pouw::PARAMS,
            ProtocolId::ProofOfLuck => pol::PARAMS,
            ProtocolId::Twilight => twilight::PARAMS,
            ProtocolId::FastKittenLottery => fastkitten::PARAMS,
            ProtocolId::CcfKvs => ccf::PARAMS,
            ProtocolId::PhalaWorker => phala::PARAMS,
            ProtocolId::SecretQuery => secret::PARAMS,
            ProtocolId::TenPobi => ten::PARAMS,
            ProtocolId::BiteFork => bite::PARAMS,
            ProtocolId::StateMachine => state_machine::PARAMS,
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vulnerable,
    Patched,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vulnerable => "vulnerable",
            Variant::Patched => "patched",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(pub BTreeMap<String, ParamValue>);

impl Params {
    pub fn with(mut self, key: &str, value: ParamValue) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    fn bad(key: &str, want: &str) -> RunError {
        RunError::Config { path: format!("params.{key}"), message: format!("expected {want}") }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, RunError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(ParamValue::Int(i)) if *i >= 0 => Ok(*i as u64),
            Some(_) => Err(Self::bad(key, "a non-negative integer")),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, RunError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(ParamValue::Float(x)) => Ok(*x),
            Some(ParamValue::Int(i)) => Ok(*i as f64),
            Some(_) => Err(Self::bad(key, "a number")),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, RunError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(ParamValue::Bool(b)) => Ok(*b),
            Some(_) => Err(Self::bad(key, "a boolean")),
        }
    }

    pub fn str<'a>(&'a self, key: &str, default: &'a str) -> Result<&'a str, RunError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(ParamValue::Str(s)) => Ok(s),
            Some(_) => Err(Self::bad(key, "a string")),
        }
    }
}

/// How an enclave's chain reads are served.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Connectivity {
    pub honest: u32,
    pub stale: u32,
    pub stale_depth: u64,
    pub silent: u32,
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity { honest: 1, stale: 3, stale_depth: 2, silent: 0 }
    }
}

impl Connectivity {
    pub fn connections(&self) -> Vec<NodeConnection> {
        let mut out = Vec::new();
        for i in 0..self.honest {
            out.push(NodeConnection::honest(format!("honest-{i}")));
        }
        for i in 0..self.stale {
            out.push(NodeConnection::dishonest(format!("stale-{i}"), ServeStrategy::Stale(self.stale_depth)));
        }
        for i in 0..self.silent {
            out.push(NodeConnection::dishonest(format!("silent-{i}"), ServeStrategy::Silent));
        }
        out
    }
}

/// Per-scenario overrides of the patched variants' countermeasure settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationOverrides {
    pub freshness_window: Option<u64>,
    pub timestamping: Option<TimestampVariant>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("simulation error: {0}")]
    Sim(String),
}

impl RunError {
    pub fn config(path: &str, message: impl Into<String>) -> Self {
        RunError::Config { path: path.to_string(), message: message.into() }
    }
}

impl From<HostError> for RunError {
    fn from(e: HostError) -> Self {
        RunError::Sim(e.to_string())
    }
}

impl From<EnclaveError> for RunError {
    fn from(e: EnclaveError) -> Self {
        RunError::Sim(e.to_string())
    }
}

impl From<LedgerError> for RunError {
    fn from(e: LedgerError) -> Self {
        RunError::Sim(e.to_string())
    }
}

/// Everything a protocol runner needs to know about one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunContext {
    pub seed: u64,
    pub variant: Variant,
    pub attack: AttackKind,
    pub consensus: Option<ConsensusMode>,
    pub connectivity: Connectivity,
    pub params: Params,
    pub mitigations: MitigationOverrides,
    pub script: Option<AttackScript>,
}

impl RunContext {
    pub fn new(seed: u64, variant: Variant, attack: AttackKind) -> Self {
        RunContext {
            seed,
            variant,
            attack,
            consensus: None,
            connectivity: Connectivity::default(),
            params: Params::default(),
            mitigations: MitigationOverrides::default(),
            script: None,
        }
    }

    pub fn with_params(mut self, params: Params) -> Self {
        self.params = params;
        self
    }

    pub fn patched(&self) -> bool {
        self.variant == Variant::Patched
    }

    pub fn mode_or(&self, default: ConsensusMode) -> ConsensusMode {
        self.consensus.unwrap_or(default)
    }

    pub fn window(&self) -> u64 {
        self.mitigations.freshness_window.unwrap_or(crate::mitigations::serialization::DEFAULT_FRESHNESS_WINDOW)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: AttackOutcome,
    pub log: EventLog,
}

impl RunResult {
    pub fn from_sim(sim: Simulation, attack: AttackKind) -> Self {
        let outcome = sim.outcome(attack);
        RunResult { outcome, log: sim.into_log() }
    }
}

/// Runs one scenario of `protocol`.
pub fn run(protocol: ProtocolId, ctx: &RunContext) -> Result<RunResult, RunError> {
    if let Some(key) = ctx.params.0.keys().find(|k| !protocol.params().contains(&k.as_str())) {
        return Err(RunError::config(&format!("params.{key}"), format!("unknown parameter for {}", protocol.id())));
    }
    if ctx.script.is_some() && protocol != ProtocolId::StateMachine {
        return Err(RunError::config("script", "scripts are only supported by the state-machine protocol"));
    }
    if !protocol.applicable(ctx.attack) {
        let mut log = EventLog::default();
        log.push(0, Event::Note { text: format!("{} has no {} surface", protocol.id(), ctx.attack) });
        return Ok(RunResult { outcome: AttackOutcome::not_applicable(ctx.attack), log });
    }
    match protocol {
        ProtocolId::PoUw => pouw::run(ctx),
        ProtocolId::ProofOfLuck => pol::run(ctx),
        ProtocolId::Twilight => twilight::run(ctx),
        ProtocolId::FastKittenLottery => fastkitten::run(ctx),
        ProtocolId::CcfKvs => ccf::run(ctx),
        ProtocolId::PhalaWorker => phala::run(ctx),
        ProtocolId::SecretQuery => secret::run(ctx),
        ProtocolId::TenPobi => ten::run(ctx),
        ProtocolId::BiteFork => bite::run(ctx),
        ProtocolId::StateMachine => state_machine::run(ctx),
    }
}

/// Logs the adversary's measured win rate over all rounds so far against
/// `baseline`.
pub(crate) fn log_advantage(sim: &mut Simulation, baseline: f64) {
    let (rounds, wins) = sim.log().round_tally();
    let p = proportion(wins, rounds);
    sim.evidence(Evidence::ProposerAdvantage { p_measured: p.frequency, p_baseline: baseline, ci_low: p.ci_low, rounds });
}

pub(crate) fn op(input: &Value) -> &str {
    input.get("op").and_then(Value::as_str).unwrap_or_default()
}

pub(crate) fn digest_field(v: &Value, key: &str) -> Option<Digest> {
    v.get(key)?.as_bytes()?.try_into().ok()
}

pub(crate) fn bad_input(what: &str) -> crate::enclave::ProgramFault {
    crate::enclave::ProgramFault::BadInput(what.to_string())
}

/// 32 bytes of host randomness, e.g. for client key seeds and nonces.
pub(crate) fn host_bytes(sim: &mut Simulation) -> [u8; 32] {
    use rand::RngCore;
    let mut out = [0u8; 32];
    sim.host_rng().fill_bytes(&mut out);
    out
}
