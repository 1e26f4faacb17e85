use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::{AttackKind, AttackScript};
use crate::ledger::ConsensusMode;
use crate::protocols::{Connectivity, MitigationOverrides, Params, ProtocolId, RunContext, Variant};

pub const SEED_ENV: &str = "FORKLAB_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("{file}: at `{path}`: {message}")]
    Invalid { file: String, path: String, message: String },
}

/// The cell an outcome lands in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    Succeeds,
    Fails,
    NotApplicable,
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expectation::Succeeds => "Succeeds",
            Expectation::Fails => "Fails",
            Expectation::NotApplicable => "NotApplicable",
        })
    }
}

/// One scenario file. Everything a run depends on is in here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub protocol: ProtocolId,
    pub variant: Variant,
    pub attack: AttackKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusMode>,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default)]
    pub mitigations: MitigationOverrides,
    #[serde(default)]
    pub params: Params,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<AttackScript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectation>,
}

impl ScenarioConfig {
    pub fn new(protocol: ProtocolId, variant: Variant, attack: AttackKind, seed: u64) -> Self {
        ScenarioConfig {
            name: format!("{}-{variant}-{attack}", protocol.id()),
            protocol,
            variant,
            attack,
            seed,
            trials: None,
            consensus: None,
            connectivity: Connectivity::default(),
            mitigations: MitigationOverrides::default(),
            params: Params::default(),
            script: None,
            expect: None,
        }
    }

    /// Parses TOML, reporting the offending field path on failure.
    pub fn from_toml(text: &str, file: &str) -> Result<Self, ConfigError> {
        let invalid = |path: String, message: String| ConfigError::Invalid { file: file.to_string(), path, message };
        let de = toml::Deserializer::parse(text).map_err(|e| invalid(".".into(), e.to_string()))?;
        let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(path, e.into_inner().message().trim().to_string())
        })?;
        if cfg.name.is_empty() {
            cfg.name = Path::new(file).file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        }
        cfg.validate().map_err(|(path, message)| invalid(path, message))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let file = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { file: file.clone(), source })?;
        Self::from_toml(&text, &file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    fn validate(&self) -> Result<(), (String, String)> {
        if let Some(key) = self.params.0.keys().find(|k| !self.protocol.params().contains(&k.as_str())) {
            return Err((format!("params.{key}"), format!("unknown parameter for {}", self.protocol.id())));
        }
        if let Some(script) = &self.script {
            if self.protocol != ProtocolId::StateMachine {
                return Err(("script".into(), "scripts are only supported by the state-machine protocol".into()));
            }
            if script.kind != self.attack {
                return Err(("script.kind".into(), format!("script is a {} script but attack is {}", script.kind, self.attack)));
            }
        }
        if self.trials == Some(0) {
            return Err(("trials".into(), "must be positive".into()));
        }
        Ok(())
    }

    /// Applies `FORKLAB_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<(), ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v.trim().parse().map_err(|_| ConfigError::Invalid {
                    file: SEED_ENV.into(),
                    path: "seed".into(),
                    message: format!("not a 64-bit seed: {v:?}"),
                })?;
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }

    pub fn context(&self) -> RunContext {
        RunContext {
            seed: self.seed,
            variant: self.variant,
            attack: self.attack,
            consensus: self.consensus,
            connectivity: self.connectivity,
            params: self.params.clone(),
            mitigations: self.mitigations,
            script: self.script.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PHALA: &str = r#"
protocol = "phala-worker"
variant = "vulnerable"
attack = "cloning"
seed = 1

[params]
workers = 20
"#;

    #[test]
    fn parses_minimal_file() {
        let cfg = ScenarioConfig::from_toml(PHALA, "phala.toml").unwrap();
        assert_eq!(cfg.protocol, ProtocolId::PhalaWorker);
        assert_eq!(cfg.name, "phala");
        assert_eq!(cfg.connectivity, Connectivity::default());
    }

    #[test]
    fn unknown_fields_name_their_path() {
        let err = ScenarioConfig::from_toml(&format!("{PHALA}\n[connectivity]\nhonset = 1\n"), "x.toml").unwrap_err();
        let ConfigError::Invalid { path, message, .. } = err else { panic!() };
        assert_eq!(path, "connectivity.honset");
        assert!(message.contains("unknown field"), "{message}");

        let err = ScenarioConfig::from_toml(&PHALA.replace("workers", "wrokers"), "x.toml").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref path, .. } if path == "params.wrokers"), "{err}");

        let err = ScenarioConfig::from_toml(&PHALA.replace("seed = 1", "seed = \"x\""), "x.toml").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref path, .. } if path == "seed"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ScenarioConfig::new(ProtocolId::StateMachine, Variant::Vulnerable, AttackKind::Rollback, 9);
        cfg.script = Some(crate::protocols::state_machine::rollback_script(5, 7));
        cfg.consensus = Some(ConsensusMode::ethereum_like());
        cfg.expect = Some(Expectation::Succeeds);
        let back = ScenarioConfig::from_toml(&cfg.to_toml(), "x.toml").unwrap();
        assert_eq!(back, cfg);
    }
}
