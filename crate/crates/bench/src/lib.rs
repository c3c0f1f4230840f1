//! Shared fixtures for the benchmarks.

use screener_core::cohort::{CohortSpec, TissueDistributions};
use screener_core::{FitConfig, ScannerConfig, TaskEnv};

pub const DISTRIBUTIONS: &str = include_str!("../../../configs/tissue_distributions.toml");

pub fn task_env() -> TaskEnv {
    TaskEnv {
        distributions: TissueDistributions::from_toml_str(DISTRIBUTIONS).expect("shipped distributions parse"),
        cohort: CohortSpec::default(),
        scanner: ScannerConfig::default(),
        fit: FitConfig::default(),
    }
}
