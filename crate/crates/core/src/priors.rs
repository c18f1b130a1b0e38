//! Hyperparameter priors calibrated from the reduced basis.
//!
//! Noise priors come from the spread between full-window and half-window
//! projections of a calibration set, smoothed by a power law in the mode
//! index. Signal variance gets a Gaussian prior around one (whitened
//! coefficients), source-position length-scales shrink as `1/l` and the
//! wind length-scales stay at one.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RomError};
use crate::gpr::{Hyperparameters, N_THETA};
use crate::plume::FieldSnapshot;
use crate::pod::ReducedBasis;
use crate::sampling::PARAM_DIM;

/// Mean of the noise-variance prior.
pub const NOISE_PRIOR_MEAN: f64 = 0.5;
/// Upper limit on the noise-variance prior mode.
pub const NOISE_MODE_CAP: f64 = 0.45;
pub const SIGNAL_PRIOR_MEAN: f64 = 1.0;
pub const SIGNAL_PRIOR_VARIANCE: f64 = 0.03;
pub const LENGTHSCALE_PRIOR_VARIANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gamma {
    pub shape: f64,
    pub rate: f64,
    pub mode: f64,
    pub mean: f64,
    pub variance: f64,
}

impl Gamma {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 1.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(invalid(format!(
                "Gamma(shape {shape}, rate {rate}) has no positive mode"
            )));
        }
        Ok(Self {
            shape,
            rate,
            mode: (shape - 1.0) / rate,
            mean: shape / rate,
            variance: shape / (rate * rate),
        })
    }

    /// Solves `(α−1)/β = mode`, `α/β = mean`.
    pub fn from_mode_mean(mode: f64, mean: f64) -> Result<Self> {
        if !(mode > 0.0 && mean > mode) {
            return Err(invalid(format!(
                "no Gamma with mode {mode} and mean {mean}"
            )));
        }
        let rate = 1.0 / (mean - mode);
        Self::new(mean * rate, rate)
    }

    /// Solves `(α−1)/β = mode`, `α/β² = variance`.
    pub fn from_mode_variance(mode: f64, variance: f64) -> Result<Self> {
        if !(mode > 0.0 && variance > 0.0) {
            return Err(invalid(format!(
                "no Gamma with mode {mode} and variance {variance}"
            )));
        }
        let rate = (mode + (mode * mode + 4.0 * variance).sqrt()) / (2.0 * variance);
        Self::new(mode * rate + 1.0, rate)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - libm::lgamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    /// Derivative of [`Gamma::ln_pdf`] with respect to `ln x`.
    pub fn d_ln_pdf_d_log(&self, x: f64) -> f64 {
        (self.shape - 1.0) - self.rate * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && mean.is_finite()) {
            return Err(invalid(format!("invalid Gaussian({mean}, {variance})")));
        }
        Ok(Self { mean, variance })
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * self.variance).ln()
            - (x - self.mean).powi(2) / (2.0 * self.variance)
    }

    pub fn d_ln_pdf_d_log(&self, x: f64) -> f64 {
        -x * (x - self.mean) / self.variance
    }
}

/// Prior on a single hyperparameter. `Flat` is the infinite-variance limit
/// and contributes nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Gamma(Gamma),
    Gaussian(Gaussian),
    Flat,
}

impl Prior {
    fn ln_pdf(&self, x: f64) -> (f64, f64) {
        match self {
            Prior::Gamma(g) => (g.ln_pdf(x), g.d_ln_pdf_d_log(x)),
            Prior::Gaussian(g) => (g.ln_pdf(x), g.d_ln_pdf_d_log(x)),
            Prior::Flat => (0.0, 0.0),
        }
    }

    /// Most probable value; `None` for a flat prior.
    pub fn center(&self) -> Option<f64> {
        match self {
            Prior::Gamma(g) => Some(g.mode),
            Prior::Gaussian(g) => Some(g.mean),
            Prior::Flat => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub noise: Prior,
    pub signal: Prior,
    /// Order (u_zc, z0, x_src, z_src).
    pub lengthscales: [Prior; PARAM_DIM],
    /// True when the noise mode was limited by [`NOISE_MODE_CAP`].
    pub noise_mode_capped: bool,
}

impl PriorSet {
    pub fn flat() -> Self {
        Self {
            noise: Prior::Flat,
            signal: Prior::Flat,
            lengthscales: [Prior::Flat; PARAM_DIM],
            noise_mode_capped: false,
        }
    }

    /// Optimizer start: every hyperparameter at its prior center (flat
    /// priors fall back to `s² = 0.01`, `ϱ = 1`, `λ = 1`).
    pub fn start_point(&self) -> Hyperparameters {
        let mut lengthscales = [1.0; PARAM_DIM];
        for (l, p) in lengthscales.iter_mut().zip(&self.lengthscales) {
            *l = p.center().unwrap_or(1.0);
        }
        Hyperparameters {
            noise_var: self.noise.center().unwrap_or(0.01),
            signal_var: self.signal.center().unwrap_or(1.0),
            lengthscales,
        }
    }

    /// Sum of log prior densities and its gradient over `log θ`.
    pub fn log_density(&self, theta: &Hyperparameters) -> (f64, [f64; N_THETA]) {
        let mut value = 0.0;
        let mut grad = [0.0; N_THETA];
        let terms = [
            (&self.noise, theta.noise_var),
            (&self.signal, theta.signal_var),
        ];
        for (i, (p, x)) in terms.into_iter().enumerate() {
            let (v, g) = p.ln_pdf(x);
            value += v;
            grad[i] = g;
        }
        for (i, (p, x)) in self.lengthscales.iter().zip(theta.lengthscales).enumerate() {
            let (v, g) = p.ln_pdf(x);
            value += v;
            grad[2 + i] = g;
        }
        (value, grad)
    }
}

/// Priors for mode `l` (1-based) given the noise power law `ŝ² ≈ a·l^b`.
pub fn build_priors(l: usize, noise_fit: (f64, f64)) -> Result<PriorSet> {
    let (a, b) = noise_fit;
    if l == 0 {
        return Err(invalid("mode index starts at 1"));
    }
    if !(a > 0.0 && b.is_finite()) {
        return Err(invalid(format!("invalid noise law ({a}, {b})")));
    }
    let raw = a * (l as f64).powf(b);
    let noise_mode_capped = raw > NOISE_MODE_CAP;
    let noise = Gamma::from_mode_mean(raw.min(NOISE_MODE_CAP), NOISE_PRIOR_MEAN)?;
    let constant = Prior::Gamma(Gamma::from_mode_variance(1.0, LENGTHSCALE_PRIOR_VARIANCE)?);
    let shrinking = Prior::Gamma(Gamma::from_mode_variance(
        1.0 / l as f64,
        LENGTHSCALE_PRIOR_VARIANCE,
    )?);
    Ok(PriorSet {
        noise: Prior::Gamma(noise),
        signal: Prior::Gaussian(Gaussian::new(SIGNAL_PRIOR_MEAN, SIGNAL_PRIOR_VARIANCE)?),
        lengthscales: [constant, constant, shrinking, shrinking],
        noise_mode_capped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// `ŝ_l²` for `l = 1..=L`.
    pub per_mode: Vec<f64>,
    pub fit_prefactor: f64,
    pub fit_exponent: f64,
    /// Set when fewer than three positive estimates were available and the
    /// flat law `a = mean(ŝ²), b = 0` was used instead of the fit.
    pub flat_fallback: bool,
}

/// `ŝ_l² = 1/(2N) Σ_n (k_l − k_{l,half})²` over paired full/half snapshots.
pub fn coefficient_noise(
    basis: &ReducedBasis,
    full: &[FieldSnapshot],
    half: &[FieldSnapshot],
) -> Result<Vec<f64>> {
    if full.len() != half.len() {
        return Err(RomError::Data(format!(
            "{} full-window snapshots but {} half-window companions",
            full.len(),
            half.len()
        )));
    }
    if full.len() < 2 {
        return Err(RomError::Data("noise estimation needs at least 2 pairs".into()));
    }
    if let Some(i) = (0..full.len()).find(|&i| full[i].mu.physical != half[i].mu.physical) {
        return Err(RomError::Data(format!("snapshot pair {i} is not at the same parameters")));
    }
    let kf = basis.project_many(&full.iter().map(|s| s.values.as_slice()).collect::<Vec<_>>())?;
    let kh = basis.project_many(&half.iter().map(|s| s.values.as_slice()).collect::<Vec<_>>())?;
    let n = full.len();
    Ok((0..basis.n_modes())
        .map(|l| {
            (0..n).map(|j| (kf[(l, j)] - kh[(l, j)]).powi(2)).sum::<f64>() / (2.0 * n as f64)
        })
        .collect())
}

pub fn estimate_noise(
    basis: &ReducedBasis,
    full: &[FieldSnapshot],
    half: &[FieldSnapshot],
) -> Result<NoiseEstimate> {
    let per_mode = coefficient_noise(basis, full, half)?;
    let positive: Vec<f64> = per_mode.iter().copied().filter(|s| *s > 0.0).collect();
    let (fit_prefactor, fit_exponent, flat_fallback) = if positive.len() >= 3 {
        let (a, b) = fit_noise_power_law(&per_mode)?;
        (a, b, false)
    } else if !positive.is_empty() {
        (positive.iter().sum::<f64>() / positive.len() as f64, 0.0, true)
    } else {
        return Err(RomError::Data(
            "full- and half-window projections coincide; noise level is zero".into(),
        ));
    };
    Ok(NoiseEstimate {
        per_mode,
        fit_prefactor,
        fit_exponent,
        flat_fallback,
    })
}

/// Least-squares fit of `log ŝ² = log a + b log l` over positive entries.
pub fn fit_noise_power_law(per_mode: &[f64]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = per_mode
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > 0.0)
        .map(|(i, s)| (((i + 1) as f64).ln(), s.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(RomError::Data(format!(
            "power-law fit needs at least 3 positive noise estimates, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let b = sxy / sxx;
    Ok(((my - b * mx).exp(), b))
}

/// Per-mode (mean, unbiased variance) of whitened coefficients.
pub fn coefficient_moments(basis: &ReducedBasis, fields: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
    if fields.len() < 2 {
        return Err(RomError::Data("moments need at least 2 snapshots".into()));
    }
    let k = basis.project_many(fields)?;
    let n = fields.len() as f64;
    Ok((0..basis.n_modes())
        .map(|l| {
            let m = (0..fields.len()).map(|j| k[(l, j)]).sum::<f64>() / n;
            let v = (0..fields.len()).map(|j| (k[(l, j)] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, v)
        })
        .collect())
}
