//! Matérn-5/2 ARD kernel and the hyperparameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sampling::PARAM_DIM;

pub const SQRT5: f64 = 2.236_067_977_499_79;

/// Number of hyperparameters: noise, signal and one length-scale per input.
pub const N_THETA: usize = 2 + PARAM_DIM;

/// A point of the unit parameter cube.
pub type Point = [f64; PARAM_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Observation noise variance `s²`.
    pub noise_var: f64,
    /// Signal variance `ϱ`.
    pub signal_var: f64,
    /// Length-scales for (u_zc, z0, x_src, z_src).
    pub lengthscales: [f64; PARAM_DIM],
}

impl Hyperparameters {
    pub fn isotropic(noise_var: f64, signal_var: f64, lengthscale: f64) -> Self {
        Self {
            noise_var,
            signal_var,
            lengthscales: [lengthscale; PARAM_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_var >= 0.0
            && self.noise_var.is_finite()
            && self.signal_var > 0.0
            && self.signal_var.is_finite()
            && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite());
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid hyperparameters {self:?}")))
        }
    }

    /// `[log s², log ϱ, log λ_1..4]`.
    pub fn to_log(&self) -> [f64; N_THETA] {
        let mut v = [0.0; N_THETA];
        v[0] = self.noise_var.ln();
        v[1] = self.signal_var.ln();
        for (i, l) in self.lengthscales.iter().enumerate() {
            v[2 + i] = l.ln();
        }
        v
    }

    pub fn from_log(v: &[f64; N_THETA]) -> Self {
        let mut lengthscales = [0.0; PARAM_DIM];
        for (i, l) in lengthscales.iter_mut().enumerate() {
            *l = v[2 + i].exp();
        }
        Self {
            noise_var: v[0].exp(),
            signal_var: v[1].exp(),
            lengthscales,
        }
    }
}

pub fn ard_distance(a: &Point, b: &Point, lengthscales: &[f64; PARAM_DIM]) -> f64 {
    a.iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn matern52(d: f64, signal_var: f64) -> f64 {
    let r = SQRT5 * d;
    signal_var * (1.0 + r + r * r / 3.0) * (-r).exp()
}

/// `r(a, b)` for the given hyperparameters (noise excluded).
pub fn covariance(a: &Point, b: &Point, theta: &Hyperparameters) -> f64 {
    matern52(ard_distance(a, b, &theta.lengthscales), theta.signal_var)
}
