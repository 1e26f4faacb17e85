//! Scenario files, the attack matrix and trial batches.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::host::{AttackKind, AttackOutcome, EventLog};
use crate::protocols::{self, ProtocolId, RunError, Variant};
use crate::stats::{proportion, Proportion};

pub use config::{ConfigError, Expectation, ScenarioConfig, SEED_ENV};

#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub config: ScenarioConfig,
    pub outcome: AttackOutcome,
    pub log: EventLog,
}

impl ScenarioReport {
    pub fn cell(&self) -> Expectation {
        cell_of(&self.outcome)
    }
}

pub fn cell_of(outcome: &AttackOutcome) -> Expectation {
    match (outcome.applicable, outcome.succeeded) {
        (false, _) => Expectation::NotApplicable,
        (true, true) => Expectation::Succeeds,
        (true, false) => Expectation::Fails,
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioReport, RunError> {
    let result = protocols::run(config.protocol, &config.context())?;
    Ok(ScenarioReport { config: config.clone(), outcome: result.outcome, log: result.log })
}

/// Seed of trial `index`, independent of every other trial's.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"forklab-trial");
    h.update(seed.to_be_bytes());
    h.update(index.to_be_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialReport {
    pub name: String,
    pub protocol: ProtocolId,
    pub variant: Variant,
    pub attack: AttackKind,
    pub seed: u64,
    pub trials: u64,
    /// Runs whose attack outcome was a success.
    pub attack_succeeded: u64,
    /// Adversary wins over every round of every trial. Equals the trial
    /// count when each trial plays one round.
    pub rounds: Proportion,
}

pub const MIN_TRIALS: u64 = 100;

/// Runs `trials` copies of `config`, each under its own sub-seed.
pub fn run_trials(config: &ScenarioConfig, trials: u64) -> Result<TrialReport, RunError> {
    if trials < MIN_TRIALS {
        return Err(RunError::config("trials", format!("at least {MIN_TRIALS} trials are needed")));
    }
    let per_trial: Vec<(bool, u64, u64)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.seed = sub_seed(config.seed, i);
            let r = protocols::run(cfg.protocol, &cfg.context())?;
            let (rounds, wins) = r.log.round_tally();
            Ok((r.outcome.succeeded, rounds, wins))
        })
        .collect::<Result<_, RunError>>()?;
    let attack_succeeded = per_trial.iter().filter(|t| t.0).count() as u64;
    let rounds = per_trial.iter().map(|t| t.1).sum();
    let wins = per_trial.iter().map(|t| t.2).sum();
    Ok(TrialReport {
        name: config.name.clone(),
        protocol: config.protocol,
        variant: config.variant,
        attack: config.attack,
        seed: config.seed,
        trials,
        attack_succeeded,
        rounds: proportion(wins, rounds),
    })
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus is missing scenarios for: {}", .0.join(", "))]
    IncompleteCorpus(Vec<String>),
    #[error("{file}: {source}")]
    Run { file: String, source: RunError },
}

/// Every `*.toml` below `dir`, sorted by path.
pub fn load_corpus(dir: &Path) -> Result<Vec<(PathBuf, ScenarioConfig)>, ConfigError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ConfigError> {
        let io = |source| ConfigError::Io { file: dir.display().to_string(), source };
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.extension().is_some_and(|e| e == "toml") {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.sort();
    paths.into_iter().map(|p| ScenarioConfig::load(&p).map(|c| (p, c))).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixCell {
    pub outcome: Expectation,
    pub evidence: String,
    pub scenario: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixRow {
    pub protocol: String,
    pub variant: Variant,
    pub rollback: MatrixCell,
    pub cloning: MatrixCell,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

type CellKey = (ProtocolId, Variant, AttackKind);

fn matrix_keys() -> Vec<CellKey> {
    let mut keys = Vec::new();
    for p in ProtocolId::MATRIX {
        for v in [Variant::Vulnerable, Variant::Patched] {
            for a in [AttackKind::Rollback, AttackKind::Cloning] {
                keys.push((p, v, a));
            }
        }
    }
    keys
}

/// Runs the first scenario of the corpus for every (protocol, variant,
/// attack) cell. Other scenarios are ignored.
pub fn run_matrix(configs: &[ScenarioConfig]) -> Result<MatrixReport, MatrixError> {
    let mut chosen: BTreeMap<CellKey, &ScenarioConfig> = BTreeMap::new();
    for c in configs {
        chosen.entry((c.protocol, c.variant, c.attack)).or_insert(c);
    }
    let keys = matrix_keys();
    let missing: Vec<String> = keys
        .iter()
        .filter(|k| !chosen.contains_key(k))
        .map(|(p, v, a)| format!("{}/{v}/{a}", p.id()))
        .collect();
    if !missing.is_empty() {
        return Err(MatrixError::IncompleteCorpus(missing));
    }
    let cells: Vec<MatrixCell> = keys
        .par_iter()
        .map(|k| {
            let cfg = chosen[k];
            let r = run_scenario(cfg).map_err(|source| MatrixError::Run { file: cfg.name.clone(), source })?;
            Ok(MatrixCell { outcome: r.cell(), evidence: r.outcome.summary(), scenario: cfg.name.clone(), seed: cfg.seed })
        })
        .collect::<Result<_, MatrixError>>()?;
    let rows = cells
        .chunks(2)
        .zip(keys.chunks(2))
        .map(|(c, k)| MatrixRow {
            protocol: k[0].0.display_name().to_string(),
            variant: k[0].1,
            rollback: c[0].clone(),
            cloning: c[1].clone(),
        })
        .collect();
    Ok(MatrixReport { rows })
}

/// The expected (rollback, cloning) cells of each vulnerable protocol.
/// Patched variants turn every `Succeeds` into `Fails`.
pub fn golden_vulnerable() -> [(ProtocolId, Expectation, Expectation); 9] {
    use Expectation::*;
    [
        (ProtocolId::PoUw, Fails, Succeeds),
        (ProtocolId::ProofOfLuck, Fails, Fails),
        (ProtocolId::Twilight, NotApplicable, Fails),
        (ProtocolId::FastKittenLottery, Fails, Succeeds),
        (ProtocolId::CcfKvs, Fails, Fails),
        (ProtocolId::PhalaWorker, Fails, Succeeds),
        (ProtocolId::SecretQuery, Succeeds, Succeeds),
        (ProtocolId::TenPobi, Fails, Succeeds),
        (ProtocolId::BiteFork, NotApplicable, Succeeds),
    ]
}

pub fn golden(protocol: ProtocolId, variant: Variant, attack: AttackKind) -> Option<Expectation> {
    let (_, rollback, cloning) = golden_vulnerable().into_iter().find(|g| g.0 == protocol)?;
    let cell = match attack {
        AttackKind::Rollback => rollback,
        AttackKind::Cloning => cloning,
        AttackKind::None => return None,
    };
    Some(match (variant, cell) {
        (Variant::Patched, Expectation::Succeeds) => Expectation::Fails,
        (_, c) => c,
    })
}

impl MatrixReport {
    /// Cells that differ from the golden matrix, as `protocol/variant/attack`.
    pub fn mismatches(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (row, p) in self.rows.iter().zip(ProtocolId::MATRIX.iter().flat_map(|p| [*p, *p])) {
            for (attack, cell) in [(AttackKind::Rollback, &row.rollback), (AttackKind::Cloning, &row.cloning)] {
                let want = golden(p, row.variant, attack).expect("matrix protocols have golden cells");
                if cell.outcome != want {
                    out.push(format!("{}/{}/{attack}: expected {want}, got {}", p.id(), row.variant, cell.outcome));
                }
            }
        }
        out
    }

    /// The Succeeds/Fails pattern alone, for comparing runs.
    pub fn pattern(&self) -> Vec<(String, Variant, Expectation, Expectation)> {
        self.rows.iter().map(|r| (r.protocol.clone(), r.variant, r.rollback.outcome, r.cloning.outcome)).collect()
    }
}
