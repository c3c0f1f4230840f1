//! Task-driven experiment design for IVIM diffusion MRI.
//!
//! The crate simulates labelled cohorts, estimates IVIM parameters with a
//! segmented fit, scores a b-value protocol by the downstream
//! classification accuracy it supports, and searches for good protocols
//! either with a PPO agent ([`drl`]) or with a Cramér-Rao baseline
//! ([`crlb`]).

pub mod cohort;
pub mod crlb;
pub mod drl;
pub mod error;
pub mod fitting;
pub mod harness;
pub mod seed;
pub mod signal;
pub mod task;

pub use cohort::{CohortSpec, Dataset, TissueClass, TissueDistribution, TissueDistributions};
pub use crlb::CrlbConfig;
pub use error::{Error, Result};
pub use fitting::{FitConfig, FitResult};
pub use signal::{AcquisitionProtocol, IvimParams, ScannerConfig};
pub use task::{Accuracy, EvalConfig, TaskEnv, TaskKind};
