//! Segmented IVIM estimation.
//!
//! D and the perfusion-free intercept come from a log-linear fit to the
//! high-b acquisitions; S0 is the mean b = 0 signal, f follows from the
//! intercept, and D* is found by a bounded 1-D search on the residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Smallest b-value (s/mm²) used for the diffusion fit.
    pub high_b_threshold: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub dstar_max: f64,
    pub dstar_grid_points: usize,
    pub dstar_rel_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            high_b_threshold: 200.0,
            d_min: 1e-5,
            d_max: 5e-3,
            dstar_max: 0.5,
            dstar_grid_points: 200,
            dstar_rel_tol: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.high_b_threshold >= 0.0
            && self.d_min > 0.0
            && self.d_max > self.d_min
            && self.dstar_max > self.d_max
            && self.dstar_grid_points >= 3
            && self.dstar_rel_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid fit config {self:?}")))
        }
    }
}

/// Estimated parameters plus flags recording every clamp or fallback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub s0_est: f64,
    pub f_est: f64,
    pub d_est: f64,
    pub dstar_est: f64,
    pub high_b_deficient: bool,
    pub d_clamped: bool,
    pub f_clamped: bool,
    pub dstar_at_bound: bool,
}

impl FitResult {
    /// Feature vector in the order (S0, f, D, D*).
    pub fn features(&self) -> [f64; 4] {
        [self.s0_est, self.f_est, self.d_est, self.dstar_est]
    }

    /// Returned when the protocol cannot support a diffusion fit at all.
    pub fn sentinel(cfg: &FitConfig) -> Self {
        Self {
            s0_est: 0.0,
            f_est: 0.0,
            d_est: cfg.d_min,
            dstar_est: cfg.d_min,
            high_b_deficient: true,
            d_clamped: false,
            f_clamped: false,
            dstar_at_bound: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighBFit {
    pub d_est: f64,
    /// Fitted ln S at b = 0.
    pub intercept: f64,
    pub d_clamped: bool,
}

/// Ordinary least squares of ln S on b over acquisitions with
/// b >= `threshold` and S > 0.
pub fn fit_high_b(signals: &[f64], b_values: &[f64], threshold: f64, cfg: &FitConfig) -> Result<HighBFit> {
    let points: Vec<(f64, f64)> = b_values
        .iter()
        .zip(signals)
        .filter(|(b, s)| **b >= threshold && **s > 0.0)
        .map(|(b, s)| (*b, s.ln()))
        .collect();
    if distinct_count(points.iter().map(|p| p.0)) < 2 {
        return Err(Error::HighBDeficient { threshold });
    }
    Ok(log_linear(&points, cfg))
}

fn distinct_count(b: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = b.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn log_linear(points: &[(f64, f64)], cfg: &FitConfig) -> HighBFit {
    let n = points.len() as f64;
    let mean_b = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(b, y)| (b - mean_b) * (y - mean_y)).sum();
    let sxx: f64 = points.iter().map(|(b, _)| (b - mean_b).powi(2)).sum();
    let raw_d = -sxy / sxx;
    let d_est = raw_d.clamp(cfg.d_min, cfg.d_max);
    // with a clamped slope, refit only the intercept
    let intercept = mean_y + d_est * mean_b;
    HighBFit { d_est, intercept, d_clamped: d_est != raw_d }
}

/// S0 as the mean b = 0 signal and f from the diffusion intercept. The
/// boolean is set when f had to be clamped into [0, 1].
pub fn estimate_s0_f(signals: &[f64], b_values: &[f64], intercept: f64) -> Result<(f64, f64, bool)> {
    let b0: Vec<f64> = b_values.iter().zip(signals).filter(|(b, _)| **b == 0.0).map(|(_, s)| *s).collect();
    if b0.is_empty() {
        return Err(Error::NoB0);
    }
    let s0 = b0.iter().sum::<f64>() / b0.len() as f64;
    let raw_f = 1.0 - intercept.exp() / s0;
    let f = if raw_f.is_nan() { 0.0 } else { raw_f.clamp(0.0, 1.0) };
    Ok((s0, f, f != raw_f))
}

fn residual_sse(signals: &[f64], b_values: &[f64], s0: f64, f: f64, d: f64, dstar: f64) -> f64 {
    b_values
        .iter()
        .zip(signals)
        .map(|(b, s)| {
            let model = s0 * ((1.0 - f) * (-b * d).exp() + f * (-b * dstar).exp());
            (s - model).powi(2)
        })
        .sum()
}

/// D* minimising the full bi-exponential residual with S0, f and D held
/// fixed, over [d_est, dstar_max]. Returns the estimate and whether it sits
/// on a bound.
pub fn fit_dstar(signals: &[f64], b_values: &[f64], s0: f64, f: f64, d_est: f64, cfg: &FitConfig) -> (f64, bool) {
    let lo = d_est;
    let hi = cfg.dstar_max;
    if f <= 0.0 {
        return (lo, true);
    }
    let cost = |x: f64| residual_sse(signals, b_values, s0, f, d_est, x);

    let n = cfg.dstar_grid_points;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let grid_at = |i: usize| {
        if i == 0 {
            lo
        } else if i == n - 1 {
            hi
        } else {
            (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp()
        }
    };
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for i in 0..n {
        let c = cost(grid_at(i));
        if c < best_cost {
            best_cost = c;
            best = i;
        }
    }

    // golden-section search in log-space over the neighbouring grid cells
    let mut a = grid_at(best.saturating_sub(1)).ln();
    let mut b = grid_at((best + 1).min(n - 1)).ln();
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = cost(x1.exp());
    let mut f2 = cost(x2.exp());
    while b - a > cfg.dstar_rel_tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = cost(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = cost(x2.exp());
        }
    }
    let mut est = ((a + b) / 2.0).exp().clamp(lo, hi);
    let mut est_cost = cost(est);
    // golden-section never lands exactly on a bound; check them directly
    let touches = [(best <= 1, lo), (best + 2 >= n, hi)];
    for (touch, bound) in touches {
        if touch {
            let c = cost(bound);
            if c <= est_cost {
                est = bound;
                est_cost = c;
            }
        }
    }
    (est, est == lo || est == hi)
}

/// Full segmented fit of one subject. Never fails: protocols that cannot
/// support the diffusion fit produce [`FitResult::sentinel`].
///
/// When only one distinct b-value clears the threshold, the diffusion fit
/// falls back to the two largest distinct b-values and `high_b_deficient`
/// is set.
pub fn segmented_fit(signals: &[f64], b_values: &[f64], cfg: &FitConfig) -> FitResult {
    // canonical order makes the fit exactly permutation invariant
    let mut pairs: Vec<(f64, f64)> = b_values.iter().copied().zip(signals.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let b: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    let (high, deficient) = match fit_high_b(&s, &b, cfg.high_b_threshold, cfg) {
        Ok(h) => (h, false),
        Err(_) => match relaxed_high_b(&s, &b, cfg) {
            Some(h) => (h, true),
            None => return FitResult::sentinel(cfg),
        },
    };
    let Ok((s0, f, f_clamped)) = estimate_s0_f(&s, &b, high.intercept) else {
        return FitResult::sentinel(cfg);
    };
    let (dstar, at_bound) = fit_dstar(&s, &b, s0, f, high.d_est, cfg);
    FitResult {
        s0_est: s0,
        f_est: f,
        d_est: high.d_est,
        dstar_est: dstar,
        high_b_deficient: deficient,
        d_clamped: high.d_clamped,
        f_clamped,
        dstar_at_bound: at_bound,
    }
}

/// Diffusion fit on the two largest distinct b-values with positive signal,
/// available only when the largest one clears the threshold.
fn relaxed_high_b(s: &[f64], b: &[f64], cfg: &FitConfig) -> Option<HighBFit> {
    let mut distinct: Vec<f64> = b.iter().zip(s).filter(|(_, s)| **s > 0.0).map(|(b, _)| *b).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let top = *distinct.last()?;
    if top < cfg.high_b_threshold || distinct.len() < 2 {
        return None;
    }
    let second = distinct[distinct.len() - 2];
    fit_high_b(s, b, second, cfg).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::signal::{ivim_signal, simulate_acquisition, AcquisitionProtocol, IvimParams, ScannerConfig};
    use proptest::prelude::*;

    fn cfg() -> FitConfig {
        FitConfig::default()
    }

    fn noiseless(p: &IvimParams, b: &[f64], te: f64) -> Vec<f64> {
        b.iter().map(|b| ivim_signal(p, *b, te, 0.1)).collect()
    }

    #[test]
    fn mono_exponential_high_b() {
        let b = [200.0, 400.0, 800.0];
        let s: Vec<f64> = b.iter().map(|b: &f64| 0.8 * (-b * 1e-3f64).exp()).collect();
        let h = fit_high_b(&s, &b, 200.0, &cfg()).unwrap();
        assert!((h.d_est - 1e-3).abs() < 1e-9);
        assert!((h.intercept.exp() - 0.8).abs() < 1e-9);
        assert!(!h.d_clamped);
    }

    #[test]
    fn all_low_b_is_deficient() {
        let b = [0.0, 10.0, 20.0, 30.0, 50.0, 80.0, 100.0, 150.0, 180.0, 199.0];
        let s = vec![1.0; 10];
        assert!(matches!(fit_high_b(&s, &b, 200.0, &cfg()), Err(Error::HighBDeficient { .. })));
        let r = segmented_fit(&s, &b, &cfg());
        assert_eq!(r, FitResult::sentinel(&cfg()));
        assert!(r.high_b_deficient);
    }

    #[test]
    fn single_high_b_uses_relaxed_fit() {
        let p = IvimParams::new(1.0, 0.1, 0.5e-3, 20e-3).unwrap();
        let b = [0.0, 0.0, 7.0, 7.0, 7.0, 7.0, 52.0, 52.0, 52.0, 508.0];
        let s = noiseless(&p, &b, 0.0);
        assert!(fit_high_b(&s, &b, 200.0, &cfg()).is_err());
        let r = segmented_fit(&s, &b, &cfg());
        assert!(r.high_b_deficient);
        assert!(r.d_est > p.d && r.d_est < 2.0 * p.d, "{r:?}");
    }

    #[test]
    fn ad_hoc_noiseless_d() {
        let p = IvimParams::new(1.0, 0.1, 0.3e-3, 10e-3).unwrap();
        let prot = AcquisitionProtocol::ad_hoc();
        let s = noiseless(&p, prot.b_values(), 0.0);
        let h = fit_high_b(&s, prot.b_values(), 200.0, &cfg()).unwrap();
        // OLS on the three high-b points, computed independently; the residual
        // perfusion signal at b = 200 biases D upward by about 8%
        assert!((h.d_est - 3.233_638_863_350_52e-4).abs() < 1e-15, "{}", h.d_est);
    }

    #[test]
    fn s0_and_f_recovered_noiseless() {
        // perfusion fully decayed by b = 200
        let p = IvimParams::new(1.0, 0.12, 0.6e-3, 90e-3).unwrap();
        let te = 0.07;
        let b = [0.0, 0.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0, 900.0];
        let s = noiseless(&p, &b, te);
        let h = fit_high_b(&s, &b, 200.0, &cfg()).unwrap();
        let (s0, f, clamped) = estimate_s0_f(&s, &b, h.intercept).unwrap();
        assert!((s0 - (-te / 0.1f64).exp()).abs() < 1e-15);
        assert!((f - 0.12).abs() / 0.12 < 1e-4, "{f}");
        assert!(!clamped);
    }

    #[test]
    fn f_clamped_when_intercept_exceeds_s0() {
        let (s0, f, clamped) = estimate_s0_f(&[0.9, 0.5], &[0.0, 500.0], 0.0).unwrap();
        assert_eq!(s0, 0.9);
        assert_eq!(f, 0.0);
        assert!(clamped);
        assert!(matches!(estimate_s0_f(&[0.5], &[500.0], 0.0), Err(Error::NoB0)));
    }

    #[test]
    fn dstar_recovered_with_true_components() {
        let p = IvimParams::new(1.0, 0.15, 0.8e-3, 25e-3).unwrap();
        let prot = AcquisitionProtocol::ad_hoc();
        let s = noiseless(&p, prot.b_values(), 0.0);
        let (ds, at_bound) = fit_dstar(&s, prot.b_values(), 1.0, 0.15, 0.8e-3, &cfg());
        assert!((ds - 25e-3).abs() / 25e-3 < 1e-4, "{ds}");
        assert!(!at_bound);
    }

    #[test]
    fn dstar_degenerate_f() {
        let (ds, at_bound) = fit_dstar(&[1.0, 0.5], &[0.0, 500.0], 1.0, 0.0, 1e-3, &cfg());
        assert_eq!(ds, 1e-3);
        assert!(at_bound);
    }

    #[test]
    fn dstar_matches_brute_force_grid() {
        let s = ScannerConfig::default();
        let prot = AcquisitionProtocol::ad_hoc();
        let c = cfg();
        let mut rng = rng_from(21);
        for i in 0..100 {
            let p = IvimParams::new(1.0, 0.05 + 0.002 * i as f64, 0.6e-3, 15e-3 + 0.3e-3 * i as f64).unwrap();
            let sig = simulate_acquisition(&p, &prot, &s, &mut rng);
            let b = prot.b_values();
            let h = fit_high_b(&sig, b, 200.0, &c).unwrap();
            let (s0, f, _) = estimate_s0_f(&sig, b, h.intercept).unwrap();
            if f <= 0.0 {
                continue;
            }
            let (ds, _) = fit_dstar(&sig, b, s0, f, h.d_est, &c);
            // independent log-spaced brute force, 10^6 points
            let n = 1_000_000;
            let (l0, l1) = (h.d_est.ln(), c.dstar_max.ln());
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..n {
                let x = (l0 + (l1 - l0) * k as f64 / (n - 1) as f64).exp();
                let sse: f64 = b
                    .iter()
                    .zip(&sig)
                    .map(|(bb, ss)| (ss - s0 * ((1.0 - f) * (-bb * h.d_est).exp() + f * (-bb * x).exp())).powi(2))
                    .sum();
                if sse < best.0 {
                    best = (sse, x);
                }
            }
            assert!((ds - best.1).abs() / best.1 < 1e-4, "instance {i}: {ds} vs {}", best.1);
        }
    }

    #[test]
    fn low_dstar_round_trip_regression() {
        // With D* = 10e-3 the perfusion term has not decayed by b = 200, so the
        // segmented estimates of f and D* carry a known model bias.
        let s = ScannerConfig::default();
        let prot = AcquisitionProtocol::ad_hoc();
        let p = IvimParams::new(1.0, 0.1, 0.3e-3, 10e-3).unwrap();
        let te = prot.te(&s);
        let sig: Vec<f64> = prot.b_values().iter().map(|b| ivim_signal(&p, *b, te, s.t2)).collect();
        let r = segmented_fit(&sig, prot.b_values(), &cfg());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs();
        assert!(close(r.s0_est, 0.497_787_158_412_803_7), "{r:?}");
        assert!(close(r.f_est, 0.084_602_865_498_177_75), "{r:?}");
        assert!(close(r.d_est, 3.233_638_863_350_515e-4), "{r:?}");
        assert!((r.dstar_est - 0.012_464_476_430_806_12).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn class_means_round_trip() {
        let dists = crate::cohort::TissueDistributions::from_toml_str(include_str!(
            "../../../configs/tissue_distributions.toml"
        ))
        .unwrap();
        let s = ScannerConfig::default();
        let prot = AcquisitionProtocol::ad_hoc();
        let te = prot.te(&s);
        for d in &dists.classes {
            let p = IvimParams::new(1.0, d.mean_f, d.mean_d, d.mean_dstar).unwrap();
            let sig: Vec<f64> = prot.b_values().iter().map(|b| ivim_signal(&p, *b, te, s.t2)).collect();
            let r = segmented_fit(&sig, prot.b_values(), &cfg());
            let s0 = (-te / s.t2).exp();
            let rel = |a: f64, b: f64| (a - b).abs() / b;
            assert!(rel(r.s0_est, s0) < 0.05, "{}: {r:?}", d.class_label);
            assert!(rel(r.f_est, p.f) < 0.05, "{}: {r:?}", d.class_label);
            assert!(rel(r.d_est, p.d) < 0.05, "{}: {r:?}", d.class_label);
            assert!(rel(r.dstar_est, p.d_star) < 0.05, "{}: {r:?}", d.class_label);
        }
    }

    #[test]
    fn d_precision_at_snr_25() {
        let s = ScannerConfig::default();
        let prot = AcquisitionProtocol::ad_hoc();
        let p = IvimParams::new(1.0, 0.1, 0.3e-3, 10e-3).unwrap();
        let mut rng = rng_from(4);
        let d: Vec<f64> = (0..10_000)
            .map(|_| segmented_fit(&simulate_acquisition(&p, &prot, &s, &mut rng), prot.b_values(), &cfg()).d_est)
            .collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        // Three points at b >= 200 and TE decay leave an effective SNR near 12;
        // linearised log-OLS predicts cv 0.82 before the lower clamp on D.
        // Frozen Monte-Carlo value: 0.682.
        assert!((sd / m - 0.682).abs() < 0.03, "cv {}", sd / m);
    }

    #[test]
    fn f_bias_at_snr_25() {
        let s = ScannerConfig::default();
        let prot = AcquisitionProtocol::ad_hoc();
        let p = IvimParams::new(1.0, 0.15, 0.9e-3, 30e-3).unwrap();
        let mut rng = rng_from(5);
        let n = 10_000;
        let mean_f = (0..n)
            .map(|_| segmented_fit(&simulate_acquisition(&p, &prot, &s, &mut rng), prot.b_values(), &cfg()).f_est)
            .sum::<f64>()
            / n as f64;
        assert!((mean_f - 0.15).abs() < 0.03, "{mean_f}");
    }

    fn params() -> impl Strategy<Value = IvimParams> {
        (0.0f64..0.4, 1e-4f64..3e-3, 5e-3f64..0.1)
            .prop_map(|(f, d, ds)| IvimParams::new(1.0, f, d, ds.max(d * 5.0)).unwrap())
    }

    proptest! {
        #[test]
        fn bounds_and_flags_consistent(p in params(), seed in any::<u64>(), snr in 3.0f64..60.0) {
            let s = ScannerConfig::default().with_snr(snr);
            let prot = AcquisitionProtocol::ad_hoc();
            let sig = simulate_acquisition(&p, &prot, &s, &mut rng_from(seed));
            let c = cfg();
            let r = segmented_fit(&sig, prot.b_values(), &c);
            prop_assert!((0.0..=1.0).contains(&r.f_est));
            prop_assert!(r.d_est >= c.d_min && r.d_est <= c.d_max);
            prop_assert!(r.dstar_est >= r.d_est && r.dstar_est <= c.dstar_max);
            prop_assert_eq!(r.d_clamped, r.d_est == c.d_min || r.d_est == c.d_max);
            prop_assert_eq!(r.dstar_at_bound, r.dstar_est == r.d_est || r.dstar_est == c.dstar_max);
            prop_assert!(!r.high_b_deficient);
            if r.f_est > 0.0 && r.f_est < 1.0 {
                prop_assert!(!r.f_clamped);
            }
        }

        #[test]
        fn permutation_invariant(p in params(), seed in any::<u64>(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let s = ScannerConfig::default();
            let prot = AcquisitionProtocol::ad_hoc();
            let sig = simulate_acquisition(&p, &prot, &s, &mut rng_from(seed));
            let mut idx: Vec<usize> = (0..10).collect();
            idx.shuffle(&mut rng_from(perm_seed));
            let b2: Vec<f64> = idx.iter().map(|i| prot.b_values()[*i]).collect();
            let s2: Vec<f64> = idx.iter().map(|i| sig[*i]).collect();
            prop_assert_eq!(segmented_fit(&sig, prot.b_values(), &cfg()), segmented_fit(&s2, &b2, &cfg()));
        }
    }
}
