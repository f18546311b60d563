//! Experiment configuration: a strict JSON document where every field has a
//! default and unknown keys are rejected with their path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandit::{BanditPolicy, DiscoveryGate, DiscoveryMetric, PolicyConfig};
use crate::engine::{EnvKind, Environment};
use crate::env::{CoverageConfig, CoverageEnv, LatentArmEnv, LatentConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Coverage(CoverageConfig),
    Latent(LatentConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Coverage(CoverageConfig::default())
    }
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Coverage(_) => EnvKind::Coverage,
            EnvConfig::Latent(_) => EnvKind::Latent,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Environment> {
        Ok(match self {
            EnvConfig::Coverage(c) => Environment::Coverage(CoverageEnv::new(c.clone(), seed)?),
            EnvConfig::Latent(c) => Environment::Latent(LatentArmEnv::new(c.clone(), seed)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Horizon T.
    pub horizon: u64,
    pub seeds: Vec<u64>,
    /// Smoothing window for success curves and the final success rate.
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            seeds: vec![0],
            window: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub metric: DiscoveryMetric,
    #[serde(default = "default_budget")]
    pub budget: f64,
}

fn default_budget() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output directory; the command line and environment can override it.
    pub dir: Option<String>,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub run: RunConfig,
    pub discovery: Option<DiscoveryConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { String::new() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |path: &str, e: Error| Error::Config {
            path: path.into(),
            msg: match e {
                Error::InvalidArgument(m) => m,
                other => other.to_string(),
            },
        };
        self.policy.validate().map_err(|e| cfg_err("policy", e))?;
        self.env.build(0).map_err(|e| cfg_err("env", e))?;
        if self.run.horizon == 0 {
            return Err(cfg_err(
                "run.horizon",
                Error::InvalidArgument("must be at least 1".into()),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(cfg_err(
                "run.seeds",
                Error::InvalidArgument("need at least one seed".into()),
            ));
        }
        if self.run.window == 0 {
            return Err(cfg_err(
                "run.window",
                Error::InvalidArgument("must be at least 1".into()),
            ));
        }
        if let Some(d) = &self.discovery {
            if !(0.0..=1.0).contains(&d.budget) {
                return Err(cfg_err(
                    "discovery.budget",
                    Error::InvalidArgument("must lie in [0, 1]".into()),
                ));
            }
            if matches!(self.env, EnvConfig::Latent(_)) {
                return Err(cfg_err(
                    "discovery",
                    Error::InvalidArgument(
                        "discovery needs a case bank; use the coverage env".into(),
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON: struct fields in declaration order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_env(&self, seed: u64) -> Result<Environment> {
        self.env.build(seed)
    }

    pub fn build_policy(&self, env: &Environment, seed: u64) -> Result<BanditPolicy> {
        BanditPolicy::new(
            self.policy.clone(),
            env.context_dim(),
            derive_seed(seed, Stream::Init, 0),
        )
    }

    pub fn build_gate(&self) -> Option<DiscoveryGate> {
        self.discovery
            .as_ref()
            .map(|d| DiscoveryGate::new(d.metric, d.budget))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::PolicyKind;

    #[test]
    fn empty_config_is_runnable() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = ExperimentConfig::from_json(r#"{"policy": {"alpha": [0.0, 0.1]}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "policy.alpha"),
            other => panic!("{other:?}"),
        }
        let err =
            ExperimentConfig::from_json(r#"{"run": {"horizon": 5, "bogus": 1}}"#).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref path, .. } if path.starts_with("run")),
            "{err:?}"
        );
        let err =
            ExperimentConfig::from_json(r#"{"env": {"kind": "coverage", "dq": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err:?}");
    }

    #[test]
    fn env_kinds_parse() {
        let cfg = ExperimentConfig::from_json(
            r#"{"env": {"kind": "latent", "arms": 4}, "policy": {"kind": "random"}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.env, EnvConfig::Latent(ref l) if l.arms == 4 && l.feature_dim == 8));
        assert_eq!(cfg.policy.kind, PolicyKind::Random);
    }

    #[test]
    fn semantic_errors_carry_paths() {
        let err = ExperimentConfig::from_json(r#"{"run": {"seeds": []}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "run.seeds"));
        let err = ExperimentConfig::from_json(
            r#"{"env": {"kind": "latent"}, "discovery": {"metric": "exploit"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "discovery"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.policy.alpha = 0.2;
        assert_ne!(a.hash(), b.hash());
        let back = ExperimentConfig::from_json(&a.canonical_json()).unwrap();
        assert_eq!(back, a);
    }
}
