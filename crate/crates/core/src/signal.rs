//! IVIM forward model, echo-time coupling and Rician noise.

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Number of acquisitions in every protocol.
pub const PROTOCOL_LEN: usize = 10;
/// Upper end of the b-value grid, s/mm².
pub const B_MAX: f64 = 1000.0;
/// The clinical protocol used as the unoptimised baseline.
pub const AD_HOC_B_VALUES: [f64; PROTOCOL_LEN] =
    [0.0, 10.0, 20.0, 30.0, 50.0, 80.0, 100.0, 200.0, 400.0, 800.0];

/// Tissue parameter tuple. Diffusivities are in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvimParams {
    pub s0: f64,
    pub f: f64,
    pub d: f64,
    pub d_star: f64,
}

impl IvimParams {
    pub fn new(s0: f64, f: f64, d: f64, d_star: f64) -> Result<Self> {
        let p = Self { s0, f, d, d_star };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.s0 > 0.0
            && (0.0..=1.0).contains(&self.f)
            && self.d > 0.0
            && self.d_star > 0.0
            && [self.s0, self.f, self.d, self.d_star].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidParams(format!("{self:?} out of range")));
        }
        if self.d_star < self.d {
            return Err(Error::InvalidParams(format!(
                "d_star ({}) must be >= d ({})",
                self.d_star, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerConfig {
    /// T/m
    pub gradient_strength: f64,
    /// rad s⁻¹ T⁻¹
    pub gyromagnetic_ratio: f64,
    /// Non-diffusion part of the echo time, s.
    pub te_overhead: f64,
    /// s
    pub t2: f64,
    /// Ratio of the pre-T2 S0 (= 1) to the noise standard deviation.
    pub snr: f64,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        Self {
            gradient_strength: 0.033,
            gyromagnetic_ratio: 2.675e8,
            te_overhead: 0.020,
            t2: 0.100,
            snr: 25.0,
        }
    }
}

impl ScannerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gradient_strength", self.gradient_strength),
            ("gyromagnetic_ratio", self.gyromagnetic_ratio),
            ("te_overhead", self.te_overhead),
            ("t2", self.t2),
            ("snr", self.snr),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidScanner(format!("{name} must be positive, got {v}")));
            }
        }
        if self.snr <= 1.0 {
            return Err(Error::InvalidScanner(format!("snr must exceed 1, got {}", self.snr)));
        }
        Ok(())
    }

    pub fn with_snr(mut self, snr: f64) -> Self {
        self.snr = snr;
        self
    }

    /// Noise standard deviation in units of the reference S0.
    pub fn sigma(&self) -> f64 {
        1.0 / self.snr
    }
}

/// Minimum echo time (s) that accommodates a diffusion weighting of
/// `b_max` s/mm².
///
/// Uses the Stejskal-Tanner relation with Δ = δ, i.e. b = (2/3)γ²G²δ³, and
/// TE = 2δ + overhead.
pub fn min_te(b_max: f64, scanner: &ScannerConfig) -> f64 {
    let b_si = b_max.max(0.0) * 1e6;
    let gg = scanner.gyromagnetic_ratio * scanner.gradient_strength;
    let delta = (3.0 * b_si / (2.0 * gg * gg)).cbrt();
    scanner.te_overhead + 2.0 * delta
}

/// Noiseless IVIM signal with T2 decay at echo time `te`.
pub fn ivim_signal(p: &IvimParams, b: f64, te: f64, t2: f64) -> f64 {
    p.s0 * (-te / t2).exp() * (p.f * (-b * p.d_star).exp() + (1.0 - p.f) * (-b * p.d).exp())
}

/// Magnitude of the signal after adding complex Gaussian noise of std `sigma`
/// to each channel.
pub fn add_rician_noise(signal: f64, sigma: f64, rng: &mut Rng) -> f64 {
    if sigma <= 0.0 {
        return signal.abs();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    let re = signal + normal.sample(rng);
    let im = normal.sample(rng);
    re.hypot(im)
}

/// An ordered set of [`PROTOCOL_LEN`] b-values, kept sorted ascending.
///
/// The echo time is not stored: it is a function of the maximum b-value and
/// the scanner, see [`AcquisitionProtocol::te`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AcquisitionProtocol {
    b_values: [f64; PROTOCOL_LEN],
}

impl AcquisitionProtocol {
    pub fn new(b_values: &[f64]) -> Result<Self> {
        if b_values.len() != PROTOCOL_LEN {
            return Err(Error::InvalidProtocol(format!(
                "expected {PROTOCOL_LEN} b-values, got {}",
                b_values.len()
            )));
        }
        let mut b = [0.0; PROTOCOL_LEN];
        for (dst, &v) in b.iter_mut().zip(b_values) {
            if !(0.0..=B_MAX).contains(&v) {
                return Err(Error::InvalidProtocol(format!("b-value {v} outside [0, {B_MAX}]")));
            }
            *dst = v;
        }
        if !b.contains(&0.0) {
            return Err(Error::InvalidProtocol("no b = 0 acquisition".into()));
        }
        b.sort_by(f64::total_cmp);
        Ok(Self { b_values: b })
    }

    pub fn ad_hoc() -> Self {
        Self::new(&AD_HOC_B_VALUES).expect("ad hoc protocol is valid")
    }

    /// Parse a comma separated list such as `0,10,20,...`.
    pub fn parse(literal: &str) -> Result<Self> {
        let values = literal
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidProtocol(format!("bad b-value {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&values)
    }

    pub fn b_values(&self) -> &[f64; PROTOCOL_LEN] {
        &self.b_values
    }

    pub fn b_max(&self) -> f64 {
        self.b_values[PROTOCOL_LEN - 1]
    }

    pub fn te(&self, scanner: &ScannerConfig) -> f64 {
        min_te(self.b_max(), scanner)
    }

    /// Short identifier, e.g. `b0-10-20-30-50-80-100-200-400-800`.
    pub fn id(&self) -> String {
        let parts: Vec<String> = self.b_values.iter().map(|b| format_b(*b)).collect();
        format!("b{}", parts.join("-"))
    }
}

fn format_b(b: f64) -> String {
    if b.fract() == 0.0 {
        format!("{}", b as i64)
    } else {
        format!("{b}")
    }
}

impl fmt::Display for AcquisitionProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.b_values.iter().map(|b| format_b(*b)).collect();
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<Vec<f64>> for AcquisitionProtocol {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<AcquisitionProtocol> for Vec<f64> {
    fn from(p: AcquisitionProtocol) -> Self {
        p.b_values.to_vec()
    }
}

/// One noisy acquisition of every b-value in `protocol`.
///
/// All acquisitions share the protocol's echo time, and each draws its own
/// noise.
pub fn simulate_acquisition(
    params: &IvimParams,
    protocol: &AcquisitionProtocol,
    scanner: &ScannerConfig,
    rng: &mut Rng,
) -> [f64; PROTOCOL_LEN] {
    simulate_with_sigma(params, protocol, scanner, scanner.sigma(), rng)
}

pub(crate) fn simulate_with_sigma(
    params: &IvimParams,
    protocol: &AcquisitionProtocol,
    scanner: &ScannerConfig,
    sigma: f64,
    rng: &mut Rng,
) -> [f64; PROTOCOL_LEN] {
    let te = protocol.te(scanner);
    let mut out = [0.0; PROTOCOL_LEN];
    for (o, &b) in out.iter_mut().zip(protocol.b_values()) {
        *o = add_rician_noise(ivim_signal(params, b, te, scanner.t2), sigma, rng);
    }
    out
}
