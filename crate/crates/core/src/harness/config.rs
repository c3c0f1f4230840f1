//! Experiment configuration file and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{CohortSpec, TissueDistributions};
use crate::crlb::CrlbConfig;
use crate::drl::PpoConfig;
use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::signal::ScannerConfig;
use crate::task::{EvalConfig, TaskEnv, TaskKind};

pub const DEFAULT_SEED: u64 = 20240501;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_validation_snr() -> f64 {
    100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub total_steps: u64,
    /// Write a checkpoint every this many updates (0 = only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { total_steps: 100_000, checkpoint_every: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub snrs: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { snrs: vec![5.0, 15.0, 25.0, 35.0] }
    }
}

/// Per-parameter AUC target for a binary task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AucTarget {
    pub task: TaskKind,
    pub f: f64,
    pub d: f64,
    pub dstar: f64,
    #[serde(default)]
    pub tolerance: f64,
}

/// Accuracy target for one protocol on one task, at the scanner SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyTarget {
    pub task: TaskKind,
    pub protocol: String,
    pub target: f64,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

/// `better` must beat `worse` on `task` by at least `min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginTarget {
    pub task: TaskKind,
    pub better: String,
    pub worse: String,
    pub min: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSettings {
    pub max_evaluations: usize,
    pub n_repeats: usize,
    /// Initial simplex step in log-parameter space.
    pub initial_step: f64,
    /// Free parameters as `class.field`; `*.field` ties a field across classes.
    pub free: Vec<String>,
    pub auc: Vec<AucTarget>,
    pub accuracy: Vec<AccuracyTarget>,
    pub margin: Vec<MarginTarget>,
}

impl Default for CalibrateSettings {
    fn default() -> Self {
        Self {
            max_evaluations: 600,
            n_repeats: 50,
            initial_step: 0.25,
            free: Vec::new(),
            auc: Vec::new(),
            accuracy: Vec::new(),
            margin: Vec::new(),
        }
    }
}

/// Top-level experiment file. `distributions` is resolved relative to the
/// file it appears in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub distributions: PathBuf,
    /// SNR used for the per-parameter AUC validation.
    #[serde(default = "default_validation_snr")]
    pub validation_snr: f64,
    #[serde(default)]
    pub scanner: ScannerConfig,
    #[serde(default)]
    pub cohort: CohortSpec,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub crlb: CrlbConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub calibrate: CalibrateSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scanner.validate()?;
        self.cohort.validate()?;
        self.fit.validate()?;
        self.eval.validate()?;
        self.crlb.validate()?;
        self.ppo.validate()?;
        if !(self.validation_snr > 1.0) {
            return Err(Error::Config("validation_snr must be > 1".into()));
        }
        if self.sweep.snrs.iter().any(|s| !(*s > 1.0)) {
            return Err(Error::Config("sweep snrs must be > 1".into()));
        }
        if self.calibrate.n_repeats == 0 {
            return Err(Error::Config("calibrate.n_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// A loaded configuration with its distributions and hash.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub distributions: TissueDistributions,
    pub source: Option<PathBuf>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = toml::from_str(&text)?;
        let dist_path = path.parent().unwrap_or(Path::new(".")).join(&config.distributions);
        let distributions = TissueDistributions::load(&dist_path)?;
        let exp = Self { config, distributions, source: Some(path.to_path_buf()) };
        exp.config.validate()?;
        Ok(exp)
    }

    pub fn from_parts(config: ExperimentConfig, distributions: TissueDistributions) -> Result<Self> {
        config.validate()?;
        distributions.validate()?;
        Ok(Self { config, distributions, source: None })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// SHA-256 over the effective configuration with the distribution file
    /// inlined. The seed is excluded; artifacts record it separately.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(&self.config).expect("config serializes");
        let obj = value.as_object_mut().expect("config is a table");
        obj.remove("seed");
        obj.insert("distributions".into(), serde_json::to_value(&self.distributions).expect("serializes"));
        let canonical = serde_json::to_string(&value).expect("serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn task_env(&self) -> TaskEnv {
        TaskEnv {
            distributions: self.distributions.clone(),
            cohort: self.config.cohort,
            scanner: self.config.scanner,
            fit: self.config.fit,
        }
    }

    pub fn task_env_at(&self, snr: f64) -> TaskEnv {
        let mut env = self.task_env();
        env.scanner = env.scanner.with_snr(snr);
        env
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    pub fn with_snr(mut self, snr: f64) -> Result<Self> {
        self.config.scanner = self.config.scanner.with_snr(snr);
        self.config.scanner.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DISTS: &str = include_str!("../../../../configs/tissue_distributions.toml");

    fn experiment(extra: &str) -> Experiment {
        let cfg: ExperimentConfig = toml::from_str(&format!("distributions = \"x.toml\"\n{extra}")).unwrap();
        Experiment::from_parts(cfg, TissueDistributions::from_toml_str(DISTS).unwrap()).unwrap()
    }

    #[test]
    fn hash_ignores_seed_but_not_settings() {
        let a = experiment("");
        let b = experiment("seed = 7");
        let c = experiment("[scanner]\nsnr = 30.0");
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        assert_eq!(c.hash(), a.with_snr(30.0).unwrap().hash());
    }

    #[test]
    fn hash_covers_distributions() {
        let a = experiment("");
        let mut b = a.clone();
        b.distributions.classes[0].mean_f += 1e-9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("distributions = \"x\"\nbogus = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("distributions = \"x\"\n[ppo]\nlr = 1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg: ExperimentConfig = toml::from_str("distributions = \"x\"\n[scanner]\nsnr = 0.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shipped_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/experiment.toml");
        let exp = Experiment::load(&path).unwrap();
        assert_eq!(exp.config.scanner.snr, 25.0);
        assert!(!exp.config.calibrate.free.is_empty());
    }
}
