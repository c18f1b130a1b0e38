//! Uncertain parameter space, Halton designs and log-law wind quantities.
//!
//! A parameter point is `(u_zc, z0, x_src, z_src)`: reference wind speed at
//! height `z_c`, aerodynamic roughness length, and source position/height.
//! Designs are drawn in the unit cube and mapped onto physical values; the
//! regression stage works on the unit-cube coordinates directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RomError};

/// Number of uncertain parameters.
pub const PARAM_DIM: usize = 4;

const PRIMES: [u64; PARAM_DIM] = [2, 3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(invalid(format!(
                "{name} interval [{}, {}] is degenerate",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Rectangle in the `(x_src, z_src)` plane removed from the admissible region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExclusionBox {
    pub x: Interval,
    pub z: Interval,
}

impl ExclusionBox {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        self.x.contains(x) && self.z.contains(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    /// Reference wind speed [m/s], uniform.
    pub u_zc: Interval,
    /// Roughness length [m], log-uniform.
    pub z0: Interval,
    /// Source streamwise position [m], uniform.
    pub x_src: Interval,
    /// Source height [m], uniform.
    pub z_src: Interval,
    pub exclusion: ExclusionBox,
    /// Height at which `u_zc` is prescribed [m].
    pub z_c: f64,
    /// von Kármán constant.
    pub kappa: f64,
}

impl Default for ParameterSpace {
    fn default() -> Self {
        Self {
            u_zc: Interval::new(3.0, 9.0),
            z0: Interval::new(1e-3, 1e-1),
            x_src: Interval::new(-3.5, 3.5),
            z_src: Interval::new(0.2, 2.0),
            exclusion: ExclusionBox {
                x: Interval::new(0.0, 1.2),
                z: Interval::new(-0.2, 1.2),
            },
            z_c: 10.0,
            kappa: 0.41,
        }
    }
}

/// Physical parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub u_zc: f64,
    pub z0: f64,
    pub x_src: f64,
    pub z_src: f64,
}

impl PhysicalParams {
    pub fn as_array(&self) -> [f64; PARAM_DIM] {
        [self.u_zc, self.z0, self.x_src, self.z_src]
    }

    pub fn from_array(a: [f64; PARAM_DIM]) -> Self {
        Self {
            u_zc: a[0],
            z0: a[1],
            x_src: a[2],
            z_src: a[3],
        }
    }
}

/// One point of the uncertain space, kept in both coordinate systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSample {
    /// Halton index the point was generated from, if any.
    pub index: Option<u64>,
    pub unit: [f64; PARAM_DIM],
    pub physical: PhysicalParams,
}

/// Result of mapping a unit-cube point; `rejected` is set when the source
/// falls inside the exclusion box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mapped {
    pub sample: ParameterSample,
    pub rejected: bool,
}

impl ParameterSpace {
    pub fn validate(&self) -> Result<()> {
        self.u_zc.check("u_zc")?;
        self.z0.check("z0")?;
        self.x_src.check("x_src")?;
        self.z_src.check("z_src")?;
        self.exclusion.x.check("exclusion x")?;
        self.exclusion.z.check("exclusion z")?;
        if self.z0.lower <= 0.0 {
            return Err(invalid("z0 bounds must be strictly positive"));
        }
        if !(self.z_c > 0.0 && self.kappa > 0.0) {
            return Err(invalid("z_c and kappa must be positive"));
        }
        Ok(())
    }

    /// Maps a unit-cube point onto physical values: affine for `u_zc`,
    /// `x_src`, `z_src`; exponential for the log-uniform `z0`.
    pub fn to_physical(&self, unit: [f64; PARAM_DIM]) -> Result<Mapped> {
        if let Some(bad) = unit.iter().find(|u| !(0.0..=1.0).contains(*u)) {
            return Err(RomError::Domain(format!(
                "unit coordinate {bad} outside [0, 1]"
            )));
        }
        let affine = |iv: &Interval, u: f64| iv.lower + u * iv.width();
        let (la, lb) = (self.z0.lower.ln(), self.z0.upper.ln());
        let physical = PhysicalParams {
            u_zc: affine(&self.u_zc, unit[0]),
            z0: (la + unit[1] * (lb - la)).exp(),
            x_src: affine(&self.x_src, unit[2]),
            z_src: affine(&self.z_src, unit[3]),
        };
        let rejected = self.exclusion.contains(physical.x_src, physical.z_src);
        Ok(Mapped {
            sample: ParameterSample {
                index: None,
                unit,
                physical,
            },
            rejected,
        })
    }

    /// Inverse of [`Self::to_physical`].
    pub fn to_unit(&self, p: &PhysicalParams) -> [f64; PARAM_DIM] {
        let affine = |iv: &Interval, v: f64| (v - iv.lower) / iv.width();
        let (la, lb) = (self.z0.lower.ln(), self.z0.upper.ln());
        [
            affine(&self.u_zc, p.u_zc),
            (p.z0.ln() - la) / (lb - la),
            affine(&self.x_src, p.x_src),
            affine(&self.z_src, p.z_src),
        ]
    }

    /// Builds a sample from physical values, refusing points outside the
    /// bounds or inside the exclusion box.
    pub fn sample_from_physical(&self, p: PhysicalParams) -> Result<ParameterSample> {
        self.check_admissible(&p)?;
        let mut unit = self.to_unit(&p);
        for u in unit.iter_mut() {
            *u = u.clamp(0.0, 1.0);
        }
        Ok(ParameterSample {
            index: None,
            unit,
            physical: p,
        })
    }

    pub fn check_admissible(&self, p: &PhysicalParams) -> Result<()> {
        let checks = [
            ("u_zc", &self.u_zc, p.u_zc),
            ("z0", &self.z0, p.z0),
            ("x_src", &self.x_src, p.x_src),
            ("z_src", &self.z_src, p.z_src),
        ];
        for (name, iv, v) in checks {
            if !iv.contains(v) {
                return Err(RomError::Domain(format!(
                    "{name} = {v} outside [{}, {}]",
                    iv.lower, iv.upper
                )));
            }
        }
        if self.exclusion.contains(p.x_src, p.z_src) {
            return Err(RomError::Domain(format!(
                "source ({}, {}) lies inside the exclusion box",
                p.x_src, p.z_src
            )));
        }
        Ok(())
    }
}

/// Radical inverse of `index` in the given base.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut factor = inv_base;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * factor;
        index /= base;
        factor *= inv_base;
    }
    value
}

/// Unscrambled Halton point with prime bases 2, 3, 5, 7.
pub fn halton_point(index: u64, dim: usize) -> Result<Vec<f64>> {
    if index == 0 {
        return Err(invalid("Halton index 0 yields the degenerate all-zero point"));
    }
    if !(1..=PARAM_DIM).contains(&dim) {
        return Err(invalid(format!("Halton dimension {dim} outside [1, 4]")));
    }
    Ok(PRIMES[..dim]
        .iter()
        .map(|&b| radical_inverse(index, b))
        .collect())
}

/// Friction velocity from the log-law: `κ·u_zc / ln(1 + z_c/z0)`.
pub fn friction_velocity(u_zc: f64, z0: f64, z_c: f64, kappa: f64) -> Result<f64> {
    if !(z0 > 0.0 && z_c > 0.0) {
        return Err(RomError::Domain(format!(
            "friction velocity needs z0 > 0 and z_c > 0 (got {z0}, {z_c})"
        )));
    }
    Ok(kappa * u_zc / (1.0 + z_c / z0).ln())
}

/// Mean inlet wind `(u_tau/κ)·ln(1 + z/z0)`.
pub fn inlet_profile(z: f64, u_tau: f64, z0: f64, kappa: f64) -> Result<f64> {
    if z < 0.0 {
        return Err(RomError::Domain(format!("negative height {z}")));
    }
    if z0 <= 0.0 {
        return Err(RomError::Domain(format!("non-positive roughness {z0}")));
    }
    Ok(u_tau / kappa * (z / z0).ln_1p())
}

/// Independent draws of `(u_zc, z0)` from their marginals.
pub fn sample_wind_marginals(space: &ParameterSpace, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (la, lb) = (space.z0.lower.ln(), space.z0.upper.ln());
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            (
                space.u_zc.lower + u * space.u_zc.width(),
                (la + v * (lb - la)).exp(),
            )
        })
        .collect()
}

/// Monte Carlo estimate of `E[u_tau]`, the normalization velocity.
pub fn reference_velocity(space: &ParameterSpace, n_mc: usize, seed: u64) -> Result<f64> {
    if n_mc == 0 {
        return Err(invalid("reference velocity needs at least one draw"));
    }
    let mut sum = 0.0;
    for (u, z0) in sample_wind_marginals(space, n_mc, seed) {
        sum += friction_velocity(u, z0, space.z_c, space.kappa)?;
    }
    Ok(sum / n_mc as f64)
}

/// A reproducible Halton design with exclusion-box rejects skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub space: ParameterSpace,
    pub start_index: u64,
    /// Halton indices consumed but rejected by the exclusion box.
    pub skipped: Vec<u64>,
    /// First index not yet consumed; continuing from here extends the design.
    pub next_index: u64,
    pub samples: Vec<ParameterSample>,
}

pub fn design(space: &ParameterSpace, n: usize, start_index: u64) -> Result<Design> {
    space.validate()?;
    if n == 0 {
        return Err(invalid("design size must be at least 1"));
    }
    let start_index = start_index.max(1);
    let mut samples = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut index = start_index;
    while samples.len() < n {
        let p = halton_point(index, PARAM_DIM)?;
        let mapped = space.to_physical([p[0], p[1], p[2], p[3]])?;
        if mapped.rejected {
            skipped.push(index);
        } else {
            samples.push(ParameterSample {
                index: Some(index),
                ..mapped.sample
            });
        }
        index += 1;
    }
    Ok(Design {
        space: *space,
        start_index,
        skipped,
        next_index: index,
        samples,
    })
}

/// One-dimensional star discrepancy of a point set in `[0, 1]`.
pub fn star_discrepancy_1d(points: &[f64]) -> f64 {
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let i = i as f64;
            ((i + 1.0) / n - x).max(x - i / n)
        })
        .fold(0.0, f64::max)
}
