//! Tissue-class priors and labelled cohort sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::FitResult;
use crate::seed::{self, Rng};
use crate::signal::{simulate_acquisition, AcquisitionProtocol, IvimParams, ScannerConfig, PROTOCOL_LEN};

/// Schema version of the tissue-distribution file.
pub const DISTRIBUTION_FILE_VERSION: u32 = 1;

const F_RANGE: (f64, f64) = (0.001, 0.999);
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClass {
    Active,
    Chronic,
    Healthy,
}

impl TissueClass {
    pub const ALL: [TissueClass; 3] = [TissueClass::Active, TissueClass::Chronic, TissueClass::Healthy];

    pub fn as_str(self) -> &'static str {
        match self {
            TissueClass::Active => "active",
            TissueClass::Chronic => "chronic",
            TissueClass::Healthy => "healthy",
        }
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TissueClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "active" => Ok(TissueClass::Active),
            "chronic" => Ok(TissueClass::Chronic),
            "healthy" => Ok(TissueClass::Healthy),
            other => Err(Error::Config(format!("unknown tissue class {other:?}"))),
        }
    }
}

/// Independent Gaussian priors on (f, D, D*) for one tissue class.
/// Diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueDistribution {
    #[serde(rename = "label")]
    pub class_label: TissueClass,
    pub mean_f: f64,
    pub std_f: f64,
    pub mean_d: f64,
    pub std_d: f64,
    pub mean_dstar: f64,
    pub std_dstar: f64,
}

impl TissueDistribution {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidDistribution { class: self.class_label, reason: reason.to_string() })
        };
        if [self.std_f, self.std_d, self.std_dstar].iter().any(|s| !(*s >= 0.0)) {
            return bad("standard deviations must be >= 0");
        }
        if !(self.mean_f > 0.0 && self.mean_f < 1.0) {
            return bad("mean_f must lie in (0, 1)");
        }
        if !(self.mean_d > 0.0 && self.mean_dstar > 0.0) {
            return bad("mean_d and mean_dstar must be positive");
        }
        if self.mean_dstar < self.mean_d {
            return bad("mean_dstar must be >= mean_d");
        }
        Ok(())
    }

    /// Draw one parameter tuple. Out-of-range draws are rejected and redrawn.
    pub fn sample(&self, rng: &mut Rng) -> IvimParams {
        let f = truncated(self.mean_f, self.std_f, |v| (F_RANGE.0..=F_RANGE.1).contains(&v), rng)
            .clamp(F_RANGE.0, F_RANGE.1);
        let d = truncated(self.mean_d, self.std_d, |v| v > 0.0, rng);
        let d_star = truncated(self.mean_dstar, self.std_dstar, |v| v > 0.0 && v >= d, rng).max(d);
        IvimParams { s0: 1.0, f, d, d_star }
    }
}

fn truncated(mean: f64, std: f64, accept: impl Fn(f64) -> bool, rng: &mut Rng) -> f64 {
    if std == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, std).expect("validated std");
    for _ in 0..MAX_REDRAWS {
        let v = normal.sample(rng);
        if accept(v) {
            return v;
        }
    }
    log::warn!("truncated normal N({mean}, {std}) rejected {MAX_REDRAWS} draws; using mean");
    mean
}

/// The per-class priors loaded from a distribution file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueDistributions {
    pub version: u32,
    #[serde(rename = "class")]
    pub classes: Vec<TissueDistribution>,
}

impl TissueDistributions {
    pub fn new(classes: Vec<TissueDistribution>) -> Result<Self> {
        let d = Self { version: DISTRIBUTION_FILE_VERSION, classes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DISTRIBUTION_FILE_VERSION {
            return Err(Error::Config(format!(
                "tissue distribution file version {} unsupported (expected {DISTRIBUTION_FILE_VERSION})",
                self.version
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.validate()?;
            if self.classes[..i].iter().any(|o| o.class_label == c.class_label) {
                return Err(Error::Config(format!("duplicate distribution for class {}", c.class_label)));
            }
        }
        Ok(())
    }

    pub fn get(&self, class: TissueClass) -> Result<&TissueDistribution> {
        self.classes
            .iter()
            .find(|c| c.class_label == class)
            .ok_or(Error::MissingDistribution(class))
    }

    pub fn get_mut(&mut self, class: TissueClass) -> Result<&mut TissueDistribution> {
        self.classes
            .iter_mut()
            .find(|c| c.class_label == class)
            .ok_or(Error::MissingDistribution(class))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let d: Self = toml::from_str(s)?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// Subjects per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub active: usize,
    pub chronic: usize,
    pub healthy: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self { active: 20, chronic: 21, healthy: 21 }
    }
}

impl CohortSpec {
    pub fn uniform(n: usize) -> Self {
        Self { active: n, chronic: n, healthy: n }
    }

    pub fn count(&self, class: TissueClass) -> usize {
        match class {
            TissueClass::Active => self.active,
            TissueClass::Chronic => self.chronic,
            TissueClass::Healthy => self.healthy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if TissueClass::ALL.iter().any(|c| self.count(*c) == 0) {
            return Err(Error::Config("every class needs at least one subject".into()));
        }
        Ok(())
    }
}

/// Draw `spec.count(class)` parameter tuples for each of `classes`, in the
/// order given.
pub fn sample_cohort(
    dists: &TissueDistributions,
    spec: &CohortSpec,
    classes: &[TissueClass],
    rng: &mut Rng,
) -> Result<Vec<(TissueClass, IvimParams)>> {
    let resolved = classes.iter().map(|c| dists.get(*c)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(classes.iter().map(|c| spec.count(*c)).sum());
    for dist in resolved {
        for _ in 0..spec.count(dist.class_label) {
            out.push((dist.class_label, dist.sample(rng)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub label: TissueClass,
    pub truth: IvimParams,
    pub signal: [f64; PROTOCOL_LEN],
    pub fit: Option<FitResult>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<TissueClass> {
        self.subjects.iter().map(|s| s.label).collect()
    }
}

/// Acquire every subject of `cohort` with `protocol`. Each subject gets its
/// own noise stream derived from one draw of `rng`.
pub fn simulate_dataset(
    cohort: &[(TissueClass, IvimParams)],
    protocol: &AcquisitionProtocol,
    scanner: &ScannerConfig,
    rng: &mut Rng,
) -> Result<Dataset> {
    scanner.validate()?;
    let base = seed::fork(rng);
    let subjects = cohort
        .par_iter()
        .enumerate()
        .map(|(i, (label, truth))| {
            let mut r = seed::rng_from(seed::derive(base, i as u64));
            Subject {
                label: *label,
                truth: *truth,
                signal: simulate_acquisition(truth, protocol, scanner, &mut r),
                fit: None,
            }
        })
        .collect();
    Ok(Dataset { subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn dist(class: TissueClass, f: f64, d: f64, ds: f64, sf: f64, sd: f64, sds: f64) -> TissueDistribution {
        TissueDistribution {
            class_label: class,
            mean_f: f,
            std_f: sf,
            mean_d: d,
            std_d: sd,
            mean_dstar: ds,
            std_dstar: sds,
        }
    }

    fn three() -> TissueDistributions {
        TissueDistributions::new(vec![
            dist(TissueClass::Active, 0.15, 0.9e-3, 30e-3, 0.05, 0.2e-3, 10e-3),
            dist(TissueClass::Chronic, 0.15, 0.4e-3, 30e-3, 0.05, 0.1e-3, 10e-3),
            dist(TissueClass::Healthy, 0.08, 0.4e-3, 30e-3, 0.03, 0.1e-3, 10e-3),
        ])
        .unwrap()
    }

    #[test]
    fn degenerate_distribution_returns_means() {
        let d = TissueDistributions::new(vec![dist(TissueClass::Healthy, 0.1, 0.3e-3, 10e-3, 0.0, 0.0, 0.0)]).unwrap();
        let c = sample_cohort(&d, &CohortSpec::default(), &[TissueClass::Healthy], &mut rng_from(1)).unwrap();
        assert_eq!(c.len(), 21);
        for (_, p) in c {
            assert_eq!(p, IvimParams { s0: 1.0, f: 0.1, d: 0.3e-3, d_star: 10e-3 });
        }
    }

    #[test]
    fn default_spec_counts() {
        let c = sample_cohort(&three(), &CohortSpec::default(), &TissueClass::ALL, &mut rng_from(2)).unwrap();
        assert_eq!(c.len(), 62);
        let n = |cl| c.iter().filter(|(l, _)| *l == cl).count();
        assert_eq!((n(TissueClass::Active), n(TissueClass::Chronic), n(TissueClass::Healthy)), (20, 21, 21));
    }

    #[test]
    fn missing_distribution_names_class() {
        let d = TissueDistributions::new(vec![dist(TissueClass::Healthy, 0.1, 0.3e-3, 10e-3, 0.0, 0.0, 0.0)]).unwrap();
        let err = sample_cohort(&d, &CohortSpec::default(), &[TissueClass::Active], &mut rng_from(1)).unwrap_err();
        assert!(matches!(err, Error::MissingDistribution(TissueClass::Active)));
        assert!(err.to_string().contains("active"));
    }

    #[test]
    fn large_sample_moments() {
        let d = dist(TissueClass::Active, 0.15, 0.9e-3, 30e-3, 0.04, 0.15e-3, 6e-3);
        let mut rng = rng_from(4);
        let n = 100_000;
        let draws: Vec<IvimParams> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let check = |vals: Vec<f64>, mean: f64, std: f64| {
            let m = vals.iter().sum::<f64>() / n as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((m - mean).abs() / mean < 0.01, "mean {m} vs {mean}");
            assert!((s - std).abs() / std < 0.02, "std {s} vs {std}");
        };
        check(draws.iter().map(|p| p.f).collect(), 0.15, 0.04);
        check(draws.iter().map(|p| p.d).collect(), 0.9e-3, 0.15e-3);
        check(draws.iter().map(|p| p.d_star).collect(), 30e-3, 6e-3);
        assert!(draws.iter().all(|p| p.validate().is_ok()));
    }

    #[test]
    fn truncation_keeps_f_mean_at_defaults() {
        let dists = TissueDistributions::from_toml_str(include_str!("../../../configs/tissue_distributions.toml")).unwrap();
        for d in &dists.classes {
            let mut rng = rng_from(17);
            let n = 100_000;
            let m = (0..n).map(|_| d.sample(&mut rng).f).sum::<f64>() / n as f64;
            assert!((m - d.mean_f).abs() / d.mean_f < 0.01, "{}: {m} vs {}", d.class_label, d.mean_f);
        }
    }

    #[test]
    fn dataset_shape_and_ground_truth() {
        let s = ScannerConfig::default();
        let p = AcquisitionProtocol::ad_hoc();
        let mut rng = rng_from(5);
        let cohort = sample_cohort(&three(), &CohortSpec::default(), &TissueClass::ALL, &mut rng).unwrap();
        let ds = simulate_dataset(&cohort, &p, &s, &mut rng).unwrap();
        assert_eq!(ds.len(), 62);
        for (subj, (label, truth)) in ds.subjects.iter().zip(&cohort) {
            assert_eq!(subj.label, *label);
            assert_eq!(subj.truth, *truth);
            assert_eq!(subj.signal.len(), 10);
        }
        assert!(simulate_dataset(&[], &p, &s, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn dataset_deterministic() {
        let s = ScannerConfig::default();
        let p = AcquisitionProtocol::ad_hoc();
        let run = || {
            let mut rng = rng_from(33);
            let c = sample_cohort(&three(), &CohortSpec::default(), &TissueClass::ALL, &mut rng).unwrap();
            simulate_dataset(&c, &p, &s, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn toml_roundtrip() {
        let d = three();
        let text = d.to_toml_string().unwrap();
        assert_eq!(TissueDistributions::from_toml_str(&text).unwrap(), d);
    }

    #[test]
    fn invalid_distribution_rejected() {
        let bad = dist(TissueClass::Active, 1.5, 1e-3, 1e-2, 0.1, 0.1, 0.1);
        assert!(TissueDistributions::new(vec![bad]).is_err());
        let neg = dist(TissueClass::Active, 0.1, 1e-3, 1e-2, -0.1, 0.1, 0.1);
        assert!(TissueDistributions::new(vec![neg]).is_err());
    }
}
