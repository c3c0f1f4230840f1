//! Task-specific objective: simulate a cohort, fit every subject, and score
//! the fitted features with k-nearest-neighbour cross-validation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{sample_cohort, simulate_dataset, CohortSpec, Dataset, TissueClass, TissueDistributions};
use crate::error::{Error, Result};
use crate::fitting::{segmented_fit, FitConfig};
use crate::seed::{self, Rng};
use crate::signal::{AcquisitionProtocol, ScannerConfig};

pub const N_FEATURES: usize = 4;
pub type Feature = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "active-chronic")]
    BinaryActiveChronic,
    #[serde(rename = "active-healthy")]
    BinaryActiveHealthy,
    #[serde(rename = "chronic-healthy")]
    BinaryChronicHealthy,
    #[serde(rename = "multiclass")]
    MultiClass,
}

impl TaskKind {
    pub const BINARY: [TaskKind; 3] =
        [TaskKind::BinaryActiveChronic, TaskKind::BinaryActiveHealthy, TaskKind::BinaryChronicHealthy];

    pub fn classes(self) -> &'static [TissueClass] {
        use TissueClass::*;
        match self {
            TaskKind::BinaryActiveChronic => &[Active, Chronic],
            TaskKind::BinaryActiveHealthy => &[Active, Healthy],
            TaskKind::BinaryChronicHealthy => &[Chronic, Healthy],
            TaskKind::MultiClass => &[Active, Chronic, Healthy],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BinaryActiveChronic => "active-chronic",
            TaskKind::BinaryActiveHealthy => "active-healthy",
            TaskKind::BinaryChronicHealthy => "chronic-healthy",
            TaskKind::MultiClass => "multiclass",
        }
    }

    fn class_index(self, class: TissueClass) -> Option<usize> {
        self.classes().iter().position(|c| *c == class)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active-chronic" => Ok(TaskKind::BinaryActiveChronic),
            "active-healthy" => Ok(TaskKind::BinaryActiveHealthy),
            "chronic-healthy" => Ok(TaskKind::BinaryChronicHealthy),
            "multiclass" | "multi-class" => Ok(TaskKind::MultiClass),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_neighbors: usize,
    pub n_folds: usize,
    pub n_repeats_report: usize,
    pub n_repeats_reward: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_neighbors: 5, n_folds: 5, n_repeats_report: 50, n_repeats_reward: 3 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::InvalidEvalConfig("k_neighbors must be >= 1".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::InvalidEvalConfig("n_folds must be >= 2".into()));
        }
        if self.n_repeats_report < 1 || self.n_repeats_reward < 1 {
            return Err(Error::InvalidEvalConfig("repeat counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything the objective needs besides the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEnv {
    pub distributions: TissueDistributions,
    pub cohort: CohortSpec,
    pub scanner: ScannerConfig,
    pub fit: FitConfig,
}

/// Per-feature z-scoring fitted on a training set. Constant features get
/// unit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: Feature,
    pub scale: Feature,
}

impl Standardizer {
    pub fn fit(train: &[Feature]) -> Self {
        let n = train.len().max(1) as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut scale = [0.0; N_FEATURES];
        for x in train {
            for j in 0..N_FEATURES {
                mean[j] += x[j] / n;
            }
        }
        for x in train {
            for j in 0..N_FEATURES {
                scale[j] += (x[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Feature) -> Feature {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.scale[j])
    }
}

fn sq_dist(a: &Feature, b: &Feature) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Majority label of the `k` nearest training points (Euclidean).
///
/// Distance ties go to the lower training index. Vote ties go to the tied
/// label whose closest member is nearest to the query.
pub fn knn_predict(train: &[Feature], labels: &[usize], query: &Feature, k: usize) -> usize {
    assert!(!train.is_empty(), "empty training set");
    let mut order: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, x)| (sq_dist(x, query), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let neighbours = &order[..k.min(order.len())];
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; n_labels];
    for (_, i) in neighbours {
        votes[labels[*i]] += 1;
    }
    let top = *votes.iter().max().unwrap_or(&0);
    neighbours
        .iter()
        .map(|(_, i)| labels[*i])
        .find(|l| votes[*l] == top)
        .expect("at least one neighbour")
}

/// Stratified assignment of subjects to `n_folds` folds. Each class is
/// shuffled and dealt round-robin, continuing where the previous class
/// stopped so fold sizes stay balanced.
pub fn stratified_folds(labels: &[usize], n_folds: usize, rng: &mut Rng) -> Vec<usize> {
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0;
    for class in 0..n_labels {
        let mut members: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        members.shuffle(rng);
        for m in members {
            fold_of[m] = next % n_folds;
            next += 1;
        }
    }
    fold_of
}

fn check_counts(labels: &[usize], n_folds: usize) -> Result<()> {
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    for class in 0..n_labels {
        let count = labels.iter().filter(|l| **l == class).count();
        if count < n_folds {
            return Err(Error::InsufficientSubjects { class, count, needed: n_folds });
        }
    }
    Ok(())
}

/// Accuracy of each fold for one fold assignment. Standardisation is fitted
/// on the training folds only.
pub fn fold_accuracies(features: &[Feature], labels: &[usize], fold_of: &[usize], k: usize, n_folds: usize) -> Vec<f64> {
    (0..n_folds)
        .map(|fold| {
            let train_idx: Vec<usize> = (0..features.len()).filter(|i| fold_of[*i] != fold).collect();
            let test_idx: Vec<usize> = (0..features.len()).filter(|i| fold_of[*i] == fold).collect();
            let raw_train: Vec<Feature> = train_idx.iter().map(|i| features[*i]).collect();
            let z = Standardizer::fit(&raw_train);
            let train: Vec<Feature> = raw_train.iter().map(|x| z.apply(x)).collect();
            let train_labels: Vec<usize> = train_idx.iter().map(|i| labels[*i]).collect();
            let correct = test_idx
                .iter()
                .filter(|i| knn_predict(&train, &train_labels, &z.apply(&features[**i]), k) == labels[**i])
                .count();
            correct as f64 / test_idx.len().max(1) as f64
        })
        .collect()
}

/// Mean and (population) standard deviation of fold accuracies over
/// `n_repeats` independent stratified fold shuffles.
pub fn cross_val_accuracy(
    features: &[Feature],
    labels: &[usize],
    cfg: &EvalConfig,
    n_repeats: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    check_counts(labels, cfg.n_folds)?;
    let mut accs = Vec::with_capacity(n_repeats * cfg.n_folds);
    for _ in 0..n_repeats.max(1) {
        let folds = stratified_folds(labels, cfg.n_folds, rng);
        accs.extend(fold_accuracies(features, labels, &folds, cfg.k_neighbors, cfg.n_folds));
    }
    Ok(mean_std(&accs))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mann-Whitney AUC: P(a > b) + 0.5 P(a = b), computed from mid-ranks.
pub fn auc_oriented(values_a: &[f64], values_b: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> =
        values_a.iter().map(|v| (*v, true)).chain(values_b.iter().map(|v| (*v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_a = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_a += all[i..=j].iter().filter(|x| x.1).count() as f64 * mid_rank;
        i = j + 1;
    }
    let (na, nb) = (values_a.len() as f64, values_b.len() as f64);
    let u = rank_sum_a - na * (na + 1.0) / 2.0;
    u / (na * nb)
}

/// Direction-free AUC, `max(auc, 1 - auc)`.
pub fn parameter_auc(values_a: &[f64], values_b: &[f64]) -> f64 {
    let a = auc_oriented(values_a, values_b);
    a.max(1.0 - a)
}

/// Fit every subject in place.
pub fn fit_dataset(ds: &mut Dataset, protocol: &AcquisitionProtocol, cfg: &FitConfig) {
    ds.subjects
        .par_iter_mut()
        .for_each(|s| s.fit = Some(segmented_fit(&s.signal, protocol.b_values(), cfg)));
}

/// Simulated, fitted cohort for `task`, returned as features and class
/// indices into `task.classes()`.
pub fn simulate_features(
    protocol: &AcquisitionProtocol,
    task: TaskKind,
    env: &TaskEnv,
    rng: &mut Rng,
) -> Result<(Dataset, Vec<Feature>, Vec<usize>)> {
    let cohort = sample_cohort(&env.distributions, &env.cohort, task.classes(), rng)?;
    let mut ds = simulate_dataset(&cohort, protocol, &env.scanner, rng)?;
    fit_dataset(&mut ds, protocol, &env.fit);
    let features = ds.subjects.iter().map(|s| s.fit.expect("fitted").features()).collect();
    let labels = ds
        .subjects
        .iter()
        .map(|s| task.class_index(s.label).expect("cohort drawn from task classes"))
        .collect();
    Ok((ds, features, labels))
}

/// Reward-mode objective: one fresh cohort scored with `n_repeats` fold
/// shuffles. Deterministic in the state of `rng`.
pub fn task_objective(
    protocol: &AcquisitionProtocol,
    task: TaskKind,
    env: &TaskEnv,
    cfg: &EvalConfig,
    n_repeats: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let (_, features, labels) = simulate_features(protocol, task, env, rng)?;
    Ok(cross_val_accuracy(&features, &labels, cfg, n_repeats, rng)?.0)
}

/// Summary of a repeated evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    pub std: f64,
    pub n_repeats: usize,
}

/// Reporting-mode evaluation: `n_repeats` independent cohorts (repeat `r`
/// seeded by `derive(seed, r)`), each scored by one stratified
/// cross-validation. Mean and population std across repeats.
pub fn evaluate_protocol(
    protocol: &AcquisitionProtocol,
    task: TaskKind,
    env: &TaskEnv,
    cfg: &EvalConfig,
    n_repeats: usize,
    seed: u64,
) -> Result<Accuracy> {
    let accs = (0..n_repeats as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng_from(seed::derive(seed, r));
            task_objective(protocol, task, env, cfg, 1, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&accs);
    Ok(Accuracy { mean, std, n_repeats })
}

/// AUC of (f, D, D*) between the two classes of a binary task, oriented
/// as P(first class > second class).
pub fn dataset_aucs(ds: &Dataset, task: TaskKind) -> [f64; 3] {
    let classes = task.classes();
    assert_eq!(classes.len(), 2, "AUC needs a binary task");
    let values = |class: TissueClass, j: usize| -> Vec<f64> {
        ds.subjects
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.fit.expect("fitted").features()[j])
            .collect()
    };
    std::array::from_fn(|p| auc_oriented(&values(classes[0], p + 1), &values(classes[1], p + 1)))
}

/// Per-parameter AUC over `n_repeats` cohorts. Orientation is held fixed
/// across repeats; the mean is then reported direction-free
/// (`max(mean, 1 - mean)`) alongside the spread across repeats.
pub fn repeated_aucs(
    protocol: &AcquisitionProtocol,
    task: TaskKind,
    env: &TaskEnv,
    n_repeats: usize,
    seed: u64,
) -> Result<[(f64, f64); 3]> {
    let per_repeat = (0..n_repeats as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng_from(seed::derive(seed, r));
            let (ds, _, _) = simulate_features(protocol, task, env, &mut rng)?;
            Ok(dataset_aucs(&ds, task))
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    Ok(std::array::from_fn(|p| {
        let (m, s) = mean_std(&per_repeat.iter().map(|a| a[p]).collect::<Vec<_>>());
        (m.max(1.0 - m), s)
    }))
}
