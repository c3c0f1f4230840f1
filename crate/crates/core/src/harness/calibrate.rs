//! Fitting the tissue priors to reference results.

use std::collections::HashMap;

use crate::cohort::{TissueClass, TissueDistribution, TissueDistributions};
use crate::error::{Error, Result};
use crate::seed;
use crate::signal::AcquisitionProtocol;
use crate::task::{evaluate_protocol, repeated_aucs, TaskKind};

use super::config::{CalibrateSettings, Experiment};

/// One free coordinate: a field on one class, or on all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeParam {
    pub class: Option<TissueClass>,
    pub field: Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    MeanF,
    StdF,
    MeanD,
    StdD,
    MeanDstar,
    StdDstar,
}

impl Field {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mean_f" => Self::MeanF,
            "std_f" => Self::StdF,
            "mean_d" => Self::MeanD,
            "std_d" => Self::StdD,
            "mean_dstar" => Self::MeanDstar,
            "std_dstar" => Self::StdDstar,
            _ => return None,
        })
    }

    fn get_mut(self, d: &mut TissueDistribution) -> &mut f64 {
        match self {
            Self::MeanF => &mut d.mean_f,
            Self::StdF => &mut d.std_f,
            Self::MeanD => &mut d.mean_d,
            Self::StdD => &mut d.std_d,
            Self::MeanDstar => &mut d.mean_dstar,
            Self::StdDstar => &mut d.std_dstar,
        }
    }
}

impl FreeParam {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Config(format!("free parameter '{spec}': expected <class|*>.<field>"));
        let (class, field) = spec.split_once('.').ok_or_else(bad)?;
        let class = if class == "*" { None } else { Some(class.parse::<TissueClass>().map_err(|_| bad())?) };
        Ok(Self { class, field: Field::parse(field).ok_or_else(bad)? })
    }

    /// Current value; for tied parameters, the first class's.
    pub fn get(&self, d: &TissueDistributions) -> Result<f64> {
        let mut copy = match self.class {
            Some(c) => *d.get(c)?,
            None => *d.classes.first().ok_or_else(|| Error::Config("no classes".into()))?,
        };
        Ok(*self.field.get_mut(&mut copy))
    }

    pub fn set(&self, d: &mut TissueDistributions, v: f64) -> Result<()> {
        match self.class {
            Some(c) => *self.field.get_mut(d.get_mut(c)?) = v,
            None => d.classes.iter_mut().for_each(|c| *self.field.get_mut(c) = v),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    /// Best value after each evaluation.
    pub trace: Vec<f64>,
}

/// Nelder–Mead with standard coefficients, stopping after `max_evals`
/// objective calls.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: f64, max_evals: usize) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut trace = Vec::with_capacity(max_evals);
    let mut best = f64::INFINITY;
    let mut eval = |x: &[f64], trace: &mut Vec<f64>| {
        if trace.len() >= max_evals {
            return f64::INFINITY;
        }
        let v = f(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        best = best.min(v);
        trace.push(best);
        v
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut trace);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = eval(&x, &mut trace);
        simplex.push((x, v));
    }
    while trace.len() < max_evals && simplex.len() == n + 1 && n > 0 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|s| s.0[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut trace);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut trace);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = if fr < worst.1 { along(-0.5) } else { along(0.5) };
            let fc = eval(&xc, &mut trace);
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let b = simplex[0].0.clone();
                for k in 1..=n {
                    let x: Vec<f64> = b.iter().zip(&simplex[k].0).map(|(b, s)| b + 0.5 * (s - b)).collect();
                    let v = eval(&x, &mut trace);
                    simplex[k] = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    NelderMeadResult { x, fx, trace }
}

fn hinge_sq(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

/// Achieved values at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub loss: f64,
    /// (task, [f, D, D*] AUC means)
    pub aucs: Vec<(TaskKind, [f64; 3])>,
    /// (task, protocol literal, accuracy)
    pub accuracies: Vec<(TaskKind, String, f64)>,
}

/// Score one set of priors against every target. Seeds are fixed, so
/// the loss is a deterministic function of the priors.
pub fn calibration_loss(exp: &Experiment, dists: &TissueDistributions) -> Result<CalibrationPoint> {
    let cal: &CalibrateSettings = &exp.config.calibrate;
    let base = exp.seed();
    let mut env = exp.task_env();
    env.distributions = dists.clone();
    let mut auc_env = env.clone();
    auc_env.scanner = auc_env.scanner.with_snr(exp.config.validation_snr);

    let mut loss = 0.0;
    let mut aucs = Vec::new();
    for t in &cal.auc {
        let a = repeated_aucs(&AcquisitionProtocol::ad_hoc(), t.task, &auc_env, cal.n_repeats, seed::derive_named(base, "calibrate-auc"))?;
        for (got, want) in a.iter().zip([t.f, t.d, t.dstar]) {
            loss += hinge_sq((got.0 - want).abs() - t.tolerance);
        }
        aucs.push((t.task, [a[0].0, a[1].0, a[2].0]));
    }

    let mut cache: HashMap<(TaskKind, String), f64> = HashMap::new();
    let mut accuracy = |task: TaskKind, literal: &str| -> Result<f64> {
        let protocol = AcquisitionProtocol::parse(literal)?;
        let key = (task, protocol.to_string());
        if let Some(v) = cache.get(&key) {
            return Ok(*v);
        }
        let v = evaluate_protocol(&protocol, task, &env, &exp.config.eval, cal.n_repeats, seed::derive_named(base, "calibrate-accuracy"))?.mean;
        cache.insert(key, v);
        Ok(v)
    };
    for t in &cal.accuracy {
        let v = accuracy(t.task, &t.protocol)?;
        loss += t.weight * hinge_sq((v - t.target).abs() - t.tolerance);
    }
    for m in &cal.margin {
        let gap = accuracy(m.task, &m.better)? - accuracy(m.task, &m.worse)?;
        loss += m.weight * hinge_sq(m.min - gap);
    }
    let mut accuracies: Vec<(TaskKind, String, f64)> = cache.into_iter().map(|((t, p), v)| (t, p, v)).collect();
    accuracies.sort_by(|a, b| (a.0.as_str(), &a.1).cmp(&(b.0.as_str(), &b.1)));
    Ok(CalibrationPoint { loss, aucs, accuracies })
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub distributions: TissueDistributions,
    pub point: CalibrationPoint,
    pub trace: Vec<f64>,
}

/// Minimize [`calibration_loss`] over the configured free parameters in
/// log space, at most `max_evaluations` loss evaluations.
pub fn calibrate(exp: &Experiment, max_evaluations: usize) -> Result<CalibrationResult> {
    let cal = &exp.config.calibrate;
    let free = cal.free.iter().map(|s| FreeParam::parse(s)).collect::<Result<Vec<_>>>()?;
    if free.is_empty() {
        return Err(Error::Config("calibrate.free lists no parameters".into()));
    }
    let x0 = free
        .iter()
        .map(|p| {
            let v = p.get(&exp.distributions)?;
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::Config("free parameters must start positive".into()))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let decode = |x: &[f64]| -> Result<TissueDistributions> {
        let mut d = exp.distributions.clone();
        for (p, v) in free.iter().zip(x) {
            p.set(&mut d, v.exp())?;
        }
        d.validate()?;
        Ok(d)
    };
    let mut best = f64::INFINITY;
    let mut failure = None;
    let result = nelder_mead(
        |x| match decode(x).and_then(|d| calibration_loss(exp, &d)) {
            Ok(p) => {
                log::debug!("calibrate loss {:.5}", p.loss);
                if p.loss < best {
                    best = p.loss;
                    log::info!("calibrate: best loss {best:.5}");
                }
                p.loss
            }
            Err(Error::InvalidDistribution { .. }) => f64::INFINITY,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        &x0,
        cal.initial_step,
        max_evaluations,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let distributions = decode(&result.x)?;
    let point = calibration_loss(exp, &distributions)?;
    Ok(CalibrationResult { distributions, point, trace: result.trace })
}
