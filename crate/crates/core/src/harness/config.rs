//! Declarative experiment configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{LossWeights, PriorNetSpec, PriorTrainConfig};
use crate::seg::{SegTrainConfig, VariantKind};

/// Environment variable overriding [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "JMPE_SEED";

/// Per-stage seed offsets from the global seed. Trainers add these to the
/// stage seed they receive.
pub const WEIGHTS_OFFSET: u64 = 1;
pub const SHUFFLE_OFFSET: u64 = 2;
pub const AUGMENT_OFFSET: u64 = 3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorStage {
    /// Architecture shared by every codec; heads are set per variant.
    pub spec: PriorNetSpec,
    pub train: PriorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    /// Number of λ trials per variant; 0 disables the search.
    pub trials: usize,
    pub lambda_range: [f64; 2],
    /// Epochs per trial; defaults to the segmentation epochs.
    pub epochs: Option<usize>,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            trials: 0,
            lambda_range: [0.1, 100.0],
            epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    #[serde(default = "all_variants")]
    pub variants: Vec<VariantKind>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prior: PriorStage,
    #[serde(default)]
    pub seg: SegTrainConfig,
    /// Per-variant weight overrides keyed by variant name; variants not
    /// listed use their tuned defaults.
    #[serde(default)]
    pub weights: BTreeMap<String, LossWeights>,
    #[serde(default)]
    pub search: SearchSpec,
    /// Binarisation threshold for evaluation.
    #[serde(default = "default_threshold")]
    pub threshold: f32,
}

fn all_variants() -> Vec<VariantKind> {
    VariantKind::ALL.to_vec()
}

fn default_folds() -> usize {
    5
}

fn default_threshold() -> f32 {
    0.5
}

impl ExperimentConfig {
    pub fn new(manifest: PathBuf) -> Self {
        Self {
            manifest,
            variants: all_variants(),
            folds: default_folds(),
            seed: 0,
            prior: PriorStage::default(),
            seg: SegTrainConfig::default(),
            weights: BTreeMap::new(),
            search: SearchSpec::default(),
            threshold: default_threshold(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths, applies the seed override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        cfg.apply_seed_override()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be >= 2, got {}",
                self.folds
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if !self.manifest.exists() {
            return Err(Error::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        for name in self.weights.keys() {
            name.parse::<VariantKind>()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        for w in self.weights.values() {
            w.validate()?;
        }
        let [lo, hi] = self.search.lambda_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "lambda_range must satisfy 0 < lo <= hi, got {lo}..{hi}"
            )));
        }
        self.prior.spec.validate()?;
        self.prior.train.validate()?;
        self.seg.validate()
    }

    pub fn weights_for(&self, v: VariantKind) -> LossWeights {
        self.weights
            .get(v.name())
            .copied()
            .unwrap_or_else(|| v.default_weights())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.json"), "[]").unwrap();
        let text = r#"
            manifest = "m.json"
            folds = 2
            seed = 9
            variants = ["baseline", "jmpe"]
            [seg]
            epochs = 3
            [weights.jmpe]
            lambda = 10.0
        "#;
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.manifest, dir.path().join("m.json"));
        assert_eq!(cfg.variants, vec![VariantKind::Baseline, VariantKind::Jmpe]);
        assert_eq!(cfg.seg.epochs, 3);
        assert_eq!(cfg.weights_for(VariantKind::Jmpe).lambda, 10.0);
        assert_eq!(cfg.weights_for(VariantKind::Shape).lambda_s, 26.21);
        let echo = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&echo).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let missing = ExperimentConfig::new(dir.path().join("nope.json"));
        assert!(missing.validate().is_err());
        std::fs::write(dir.path().join("m.json"), "[]").unwrap();
        let mut cfg = ExperimentConfig::new(dir.path().join("m.json"));
        cfg.validate().unwrap();
        cfg.folds = 1;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("manifest = 'x'\nbogus = 1").is_err());
    }
}
