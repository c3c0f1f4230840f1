//! Cramér-Rao lower-bound baseline: Fisher information of the IVIM model
//! under Gaussian noise, a normalised-variance objective, and a simulated
//! annealing search over b-values.

use nalgebra::{Matrix4, Vector4};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::{TissueClass, TissueDistributions};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::signal::{min_te, AcquisitionProtocol, IvimParams, ScannerConfig, AD_HOC_B_VALUES, B_MAX, PROTOCOL_LEN};

/// Cost assigned to a tissue sample whose Fisher matrix is singular.
pub const SINGULAR_PENALTY: f64 = 1e12;

/// Parameter order used throughout: (s0, f, d, d_star).
pub type FisherMatrix = Matrix4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrlbConfig {
    pub n_tissue_samples: usize,
    pub score_s0: bool,
    pub score_f: bool,
    pub score_d: bool,
    pub score_dstar: bool,
    pub iterations: usize,
    /// Initial Metropolis temperature, in units of ln(cost).
    pub initial_temperature: f64,
    /// Ratio of final to initial temperature (geometric cooling).
    pub final_temperature_ratio: f64,
    /// Half-width of the uniform integer perturbation of one slot, s/mm².
    pub step_width: u32,
    /// Probability that a move redraws the slot uniformly over the grid.
    pub jump_probability: f64,
    /// Relative ridge added to the normalised Fisher matrix before inversion.
    pub ridge: f64,
}

impl Default for CrlbConfig {
    fn default() -> Self {
        Self {
            n_tissue_samples: 100,
            score_s0: false,
            score_f: true,
            score_d: true,
            score_dstar: true,
            iterations: 20_000,
            initial_temperature: 0.5,
            final_temperature_ratio: 1e-3,
            step_width: 100,
            jump_probability: 0.1,
            ridge: 1e-12,
        }
    }
}

impl CrlbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.n_tissue_samples < 1 {
            return Err(Error::Config("crlb iterations and n_tissue_samples must be >= 1".into()));
        }
        if self.initial_temperature < 0.0 || !(0.0..=1.0).contains(&self.jump_probability) || self.ridge < 0.0 {
            return Err(Error::Config(format!("invalid crlb config {self:?}")));
        }
        if !self.scored().iter().any(|s| *s) {
            return Err(Error::Config("crlb config scores no parameter".into()));
        }
        Ok(())
    }

    fn scored(&self) -> [bool; 4] {
        [self.score_s0, self.score_f, self.score_d, self.score_dstar]
    }
}

/// Analytic ∂S/∂(s0, f, d, d_star) of the IVIM signal.
pub fn signal_jacobian(p: &IvimParams, b: f64, te: f64, t2: f64) -> [f64; 4] {
    let t2_decay = (-te / t2).exp();
    let e_star = (-b * p.d_star).exp();
    let e_d = (-b * p.d).exp();
    [
        t2_decay * (p.f * e_star + (1.0 - p.f) * e_d),
        p.s0 * t2_decay * (e_star - e_d),
        -b * p.s0 * t2_decay * (1.0 - p.f) * e_d,
        -b * p.s0 * t2_decay * p.f * e_star,
    ]
}

/// Fisher information (1/σ²) Σ J Jᵀ over the given acquisitions at a shared
/// echo time.
pub fn fisher_for_b_values(p: &IvimParams, b_values: &[f64], te: f64, scanner: &ScannerConfig) -> FisherMatrix {
    let inv_var = scanner.snr * scanner.snr;
    b_values.iter().fold(FisherMatrix::zeros(), |acc, b| {
        let j = Vector4::from(signal_jacobian(p, *b, te, scanner.t2));
        acc + j * j.transpose() * inv_var
    })
}

pub fn fisher_matrix(p: &IvimParams, protocol: &AcquisitionProtocol, scanner: &ScannerConfig) -> FisherMatrix {
    fisher_for_b_values(p, protocol.b_values(), protocol.te(scanner), scanner)
}

/// CRLB(θ)/θ² for every parameter, or `None` when the Fisher matrix is
/// singular. Inversion is done on the matrix normalised by the parameter
/// magnitudes, with a relative ridge.
pub fn normalized_crlb(f: &FisherMatrix, p: &IvimParams, ridge: f64) -> Option<[f64; 4]> {
    let theta = Vector4::new(p.s0, p.f, p.d, p.d_star);
    let scale = Matrix4::from_diagonal(&theta);
    let g = scale * f * scale;
    let max_diag = g.diagonal().max();
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return None;
    }
    let eig = g.symmetric_eigenvalues();
    if eig.min() <= 1e-12 * eig.max() {
        return None;
    }
    let reg = g + Matrix4::identity() * (ridge * max_diag);
    let inv = reg.cholesky()?.inverse();
    let d = inv.diagonal();
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return None;
    }
    Some([d[0], d[1], d[2], d[3]])
}

/// Mean over tissue samples of Σ CRLB(θ)/θ² for the scored parameters.
pub fn crlb_objective_b(b_values: &[f64], te: f64, samples: &[IvimParams], scanner: &ScannerConfig, cfg: &CrlbConfig) -> f64 {
    let scored = cfg.scored();
    let total: f64 = samples
        .iter()
        .map(|p| {
            let f = fisher_for_b_values(p, b_values, te, scanner);
            match normalized_crlb(&f, p, cfg.ridge) {
                Some(d) => d.iter().zip(scored).filter(|(_, s)| *s).map(|(v, _)| *v).sum::<f64>().min(SINGULAR_PENALTY),
                None => SINGULAR_PENALTY,
            }
        })
        .sum();
    total / samples.len().max(1) as f64
}

pub fn crlb_objective(protocol: &AcquisitionProtocol, samples: &[IvimParams], scanner: &ScannerConfig, cfg: &CrlbConfig) -> f64 {
    crlb_objective_b(protocol.b_values(), protocol.te(scanner), samples, scanner, cfg)
}

/// Tissue samples for the objective, dealt round-robin over `classes`.
pub fn draw_tissue_samples(
    dists: &TissueDistributions,
    classes: &[TissueClass],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<IvimParams>> {
    let resolved = classes.iter().map(|c| dists.get(*c)).collect::<Result<Vec<_>>>()?;
    if resolved.is_empty() {
        return Err(Error::Config("no classes to sample".into()));
    }
    Ok((0..n).map(|i| resolved[i % resolved.len()].sample(rng)).collect())
}

/// Outcome of an annealing run.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealResult {
    pub best: Vec<f64>,
    pub best_cost: f64,
    /// Best-seen cost after every iteration.
    pub trace: Vec<f64>,
}

/// Simulated annealing over integer b-values in [0, B_MAX]. Slots listed in
/// `pinned` never move. Acceptance uses the Metropolis rule on ln(cost)
/// with geometric cooling; temperature 0 gives pure hill-climbing.
pub fn anneal(
    initial: &[f64],
    pinned: &[usize],
    objective: impl Fn(&[f64]) -> f64,
    cfg: &CrlbConfig,
    rng: &mut Rng,
) -> AnnealResult {
    let free: Vec<usize> = (0..initial.len()).filter(|i| !pinned.contains(i)).collect();
    let mut current = initial.to_vec();
    let mut current_cost = objective(&current);
    let mut best = current.clone();
    let mut best_cost = current_cost;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let cooling = if cfg.iterations > 1 {
        cfg.final_temperature_ratio.max(1e-300).powf(1.0 / (cfg.iterations - 1) as f64)
    } else {
        1.0
    };
    let mut temperature = cfg.initial_temperature;
    for _ in 0..cfg.iterations {
        if free.is_empty() {
            trace.push(best_cost);
            continue;
        }
        let slot = free[rng.random_range(0..free.len())];
        let mut candidate = current.clone();
        candidate[slot] = if rng.random::<f64>() < cfg.jump_probability {
            rng.random_range(0..=B_MAX as i64) as f64
        } else {
            let w = i64::from(cfg.step_width.max(1));
            (candidate[slot] as i64 + rng.random_range(-w..=w)).clamp(0, B_MAX as i64) as f64
        };
        let cost = objective(&candidate);
        let delta = cost.ln() - current_cost.ln();
        let accept = delta <= 0.0 || (temperature > 0.0 && rng.random::<f64>() < (-delta / temperature).exp());
        if accept {
            current = candidate;
            current_cost = cost;
            if cost < best_cost {
                best_cost = cost;
                best = current.clone();
            }
        }
        trace.push(best_cost);
        temperature *= cooling;
    }
    polish(&mut best, &mut best_cost, &free, &objective);
    if let Some(last) = trace.last_mut() {
        *last = best_cost;
    }
    AnnealResult { best, best_cost, trace }
}

/// Greedy ±1 coordinate descent until no single-slot move improves.
fn polish(best: &mut Vec<f64>, best_cost: &mut f64, free: &[usize], objective: &impl Fn(&[f64]) -> f64) {
    loop {
        let mut improved = false;
        for &slot in free {
            for step in [-1.0, 1.0] {
                let v = best[slot] + step;
                if !(0.0..=B_MAX).contains(&v) {
                    continue;
                }
                let mut candidate = best.clone();
                candidate[slot] = v;
                let cost = objective(&candidate);
                if cost < *best_cost {
                    *best = candidate;
                    *best_cost = cost;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlbOutcome {
    pub protocol: AcquisitionProtocol,
    pub cost: f64,
    /// Best-seen cost per annealing iteration.
    pub trace: Vec<f64>,
}

/// Anneal a 10-value protocol (slot 0 pinned at b = 0, starting from the
/// ad hoc protocol) against a fixed tissue sample set.
pub fn optimize_crlb_with_samples(
    samples: &[IvimParams],
    scanner: &ScannerConfig,
    cfg: &CrlbConfig,
    rng: &mut Rng,
) -> Result<CrlbOutcome> {
    cfg.validate()?;
    let objective = |b: &[f64]| {
        let b_max = b.iter().copied().fold(0.0, f64::max);
        crlb_objective_b(b, min_te(b_max, scanner), samples, scanner, cfg)
    };
    let result = anneal(&AD_HOC_B_VALUES, &[0], objective, cfg, rng);
    debug_assert_eq!(result.best.len(), PROTOCOL_LEN);
    Ok(CrlbOutcome { protocol: AcquisitionProtocol::new(&result.best)?, cost: result.best_cost, trace: result.trace })
}

/// CRLB-optimal protocol for tissue drawn from `classes`. The sample set is
/// drawn once up front so the objective is deterministic during annealing.
pub fn optimize_crlb(
    classes: &[TissueClass],
    dists: &TissueDistributions,
    scanner: &ScannerConfig,
    cfg: &CrlbConfig,
    rng: &mut Rng,
) -> Result<CrlbOutcome> {
    let samples = draw_tissue_samples(dists, classes, cfg.n_tissue_samples, rng)?;
    optimize_crlb_with_samples(&samples, scanner, cfg, rng)
}
