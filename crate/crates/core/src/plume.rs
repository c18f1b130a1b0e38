//! Analytic plume surrogate for the full-order simulator.
//!
//! Fields are 2-D (streamwise `x`, vertical `z`) time-averaged statistics of
//! a passive tracer released from a point source upstream, above or
//! downstream of a unit-square obstacle occupying `[0, 1] × [0, 1]`. The
//! base kernel is a ground-reflected Gaussian plume advected by the log-law
//! wind at the source height, with three obstacle effects layered on top:
//!
//! * a wake that lifts the centerline and inflates the spread behind the
//!   obstacle, relaxing over roughly five obstacle heights;
//! * tracer accumulation against the windward face for low upstream sources;
//! * broad recirculation-zone mixing for sources just behind the obstacle.
//!
//! Finite averaging time is emulated by a smooth multiplicative noise field
//! whose variance scales as `1/(window_fraction · T_avg)`. The full and
//! half window realizations are nested (the full-window noise is the mean of
//! the two half-window noises), mirroring averaging over sub-windows.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RomError};
use crate::sampling::{self, Design, ParameterSample, ParameterSpace};
use crate::smx::SmxMatrix;

pub const GENERATOR_VERSION: &str = "plume-surrogate/1";

/// Obstacle height [m].
pub const OBSTACLE_HEIGHT: f64 = 1.0;
/// Tracer release rate [m³/s].
pub const SOURCE_RATE: f64 = 1.0;
/// Averaging periods of a full window.
pub const DEFAULT_AVG_PERIODS: f64 = 40.0;
/// Monte Carlo draws used for the reference friction velocity.
pub const REFERENCE_MC_DRAWS: usize = 100_000;

const SOURCE_SIZE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub nx: usize,
    pub nz: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self::with_resolution(171, 51)
    }
}

impl Grid {
    pub fn with_resolution(nx: usize, nz: usize) -> Self {
        Self {
            x_min: -3.5,
            x_max: 13.5,
            z_min: 0.0,
            z_max: 5.0,
            nx,
            nz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.nz < 2 {
            return Err(invalid(format!(
                "grid needs at least 2x2 nodes (got {}x{})",
                self.nx, self.nz
            )));
        }
        if !(self.x_min < self.x_max && self.z_min < self.z_max) {
            return Err(invalid("grid extents are degenerate"));
        }
        Ok(())
    }

    /// Number of nodes `N_h`.
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / (self.nz - 1) as f64
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.x_min + ix as f64 * self.dx()
    }

    pub fn z(&self, iz: usize) -> f64 {
        self.z_min + iz as f64 * self.dz()
    }

    /// Row-major node index: rows are constant-`z` lines.
    pub fn index(&self, ix: usize, iz: usize) -> usize {
        iz * self.nx + ix
    }

    /// Node coordinates `(x, z)` in storage order.
    pub fn coordinates(&self) -> Vec<(f64, f64)> {
        (0..self.nz)
            .flat_map(|iz| (0..self.nx).map(move |ix| (ix, iz)))
            .map(|(ix, iz)| (self.x(ix), self.z(iz)))
            .collect()
    }

    pub fn nearest_node(&self, x: f64, z: f64) -> usize {
        let ix = ((x - self.x_min) / self.dx()).round().clamp(0.0, (self.nx - 1) as f64);
        let iz = ((z - self.z_min) / self.dz()).round().clamp(0.0, (self.nz - 1) as f64);
        self.index(ix as usize, iz as usize)
    }

    /// Composite trapezoid rule over the grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let w = |i: usize, n: usize| if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        let mut sum = 0.0;
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                sum += w(ix, self.nx) * w(iz, self.nz) * values[self.index(ix, iz)];
            }
        }
        sum * self.dx() * self.dz()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    MeanConcentration,
    VerticalFlux,
}

impl Channel {
    pub fn name(&self) -> &'static str {
        match self {
            Channel::MeanConcentration => "mean_concentration",
            Channel::VerticalFlux => "vertical_flux",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = RomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_concentration" | "concentration" => Ok(Channel::MeanConcentration),
            "vertical_flux" | "flux" => Ok(Channel::VerticalFlux),
            other => Err(invalid(format!("unknown channel '{other}'"))),
        }
    }
}

/// Averaging-noise emulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Noise standard deviation relative to the local field magnitude for a
    /// single averaging period.
    pub relative_amplitude: f64,
    /// Averaging periods in a full window.
    pub t_avg_periods: f64,
    /// Correlation length of the smooth noise, in grid cells.
    pub correlation_cells: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            relative_amplitude: 0.25,
            t_avg_periods: DEFAULT_AVG_PERIODS,
            correlation_cells: 3.0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            relative_amplitude: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    pub values: Vec<f64>,
    pub mu: ParameterSample,
    pub channel: Channel,
    pub window_fraction: f64,
}

/// Surrogate generator bound to a parameter space, grid and normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub space: ParameterSpace,
    pub grid: Grid,
    pub noise: NoiseConfig,
    /// Reference friction velocity used to normalize concentrations.
    pub u_tau_ref: f64,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Source-dependent plume geometry, evaluated once per snapshot.
struct PlumeShape {
    xs: f64,
    h: f64,
    u_adv: f64,
    u_tau: f64,
    z0: f64,
    kappa: f64,
    spread_rate: f64,
    sigma_src: f64,
    upstream_len: f64,
    pass: f64,
    lift: f64,
    accumulation: f64,
}

impl PlumeShape {
    fn new(space: &ParameterSpace, mu: &ParameterSample) -> Result<Self> {
        let p = mu.physical;
        let (xs, h) = (p.x_src, p.z_src);
        let u_tau = sampling::friction_velocity(p.u_zc, p.z0, space.z_c, space.kappa)?;
        let u_adv = sampling::inlet_profile(h, u_tau, p.z0, space.kappa)?;
        // Recirculation zone behind the obstacle: broad, partly upstream mixing.
        let rec = sigmoid((1.5 - h) / 0.2) * sigmoid((xs - 1.0) / 0.1) * (-(xs - 1.2).max(0.0) / 1.5).exp();
        let intensity = u_tau / u_adv;
        Ok(Self {
            xs,
            h,
            u_adv,
            u_tau,
            z0: p.z0,
            kappa: space.kappa,
            spread_rate: 1.6 * intensity * (1.0 + rec),
            sigma_src: SOURCE_SIZE * (1.0 + 2.5 * rec),
            upstream_len: 0.12 + 0.6 * rec,
            pass: sigmoid((0.3 - xs) / 0.25) * (-(h - 1.0).max(0.0).powi(2) / 0.72).exp(),
            lift: 0.9 * (-h).exp(),
            accumulation: sigmoid(-xs / 0.2) * sigmoid((1.0 - h) / 0.1) * (xs / 3.0).min(0.0).exp(),
        })
    }

    fn sigma(&self, dx: f64) -> f64 {
        let d = dx.max(0.0);
        (self.sigma_src.powi(2) + (self.spread_rate * d).powi(2) / (1.0 + d / 6.0)).sqrt()
    }

    /// Wake strength at streamwise position `x`.
    fn wake(&self, x: f64) -> f64 {
        sigmoid((x - 0.5) / 0.15) * (-(x - OBSTACLE_HEIGHT).max(0.0) / 5.0).exp() * self.pass
    }

    /// Plume kernel terms at `(x, z)`: amplitude, centerline, spread, wake.
    fn kernel(&self, x: f64) -> (f64, f64, f64, f64) {
        let dx = x - self.xs;
        let w = self.wake(x);
        let sigma = self.sigma(dx) * (1.0 + 1.2 * w);
        let center = self.h + self.lift * w;
        let upstream = if dx < 0.0 {
            (-dx * dx / (2.0 * self.upstream_len.powi(2))).exp()
        } else {
            1.0
        };
        let amp = SOURCE_RATE * upstream / (self.u_adv * (2.0 * std::f64::consts::PI).sqrt() * sigma);
        (amp, center, sigma, w)
    }

    fn concentration(&self, x: f64, z: f64) -> f64 {
        let (amp, c, s, _) = self.kernel(x);
        let g = |t: f64| (-t * t / (2.0 * s * s)).exp();
        let mut value = amp * (g(z - c) + g(z + c));
        if self.accumulation > 0.0 {
            let face_sigma = self.sigma(-self.xs);
            let face = SOURCE_RATE / (self.u_adv * (2.0 * std::f64::consts::PI).sqrt() * face_sigma);
            let bump = (-(x + 0.35).powi(2) / (2.0 * 0.25f64.powi(2))
                - (z - 0.45).powi(2) / (2.0 * 0.35f64.powi(2)))
            .exp()
                * sigmoid(-x / 0.05);
            value += 0.35 * self.accumulation * face * bump;
        }
        value
    }

    /// Gradient-diffusion flux `-ν_t ∂C/∂z`, sign-flipped in the strong wake.
    fn vertical_flux(&self, x: f64, z: f64) -> f64 {
        let (amp, c, s, w) = self.kernel(x);
        let g = |t: f64| (-t * t / (2.0 * s * s)).exp();
        let neg_dcdz = amp * ((z - c) * g(z - c) + (z + c) * g(z + c)) / (s * s);
        let eddy = self.kappa * self.u_tau * (z + self.z0);
        eddy * neg_dcdz * (1.0 - 1.8 * w)
    }
}

fn inside_obstacle(x: f64, z: f64) -> bool {
    (0.0..=OBSTACLE_HEIGHT).contains(&x) && (0.0..=OBSTACLE_HEIGHT).contains(&z)
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn noise_key(seed: u64, mu: &ParameterSample) -> u64 {
    mu.physical
        .as_array()
        .iter()
        .fold(mix64(seed), |acc, v| mix64(acc ^ v.to_bits()))
}

/// Unit-variance smooth Gaussian field: padded white noise filtered by a
/// separable Gaussian kernel.
fn smooth_field(rng: &mut ChaCha8Rng, grid: &Grid, correlation_cells: f64) -> Vec<f64> {
    let std = (correlation_cells / 2.0).max(0.25);
    let radius = (3.0 * std).ceil() as usize;
    let mut weights: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    weights.iter_mut().for_each(|w| *w /= norm);

    let (px, pz) = (grid.nx + 2 * radius, grid.nz + 2 * radius);
    let white: Vec<f64> = (0..px * pz).map(|_| StandardNormal.sample(rng)).collect();
    // filter along x: pz rows, nx outputs each
    let mut along_x = vec![0.0; grid.nx * pz];
    for r in 0..pz {
        let row = &white[r * px..(r + 1) * px];
        for ix in 0..grid.nx {
            along_x[r * grid.nx + ix] = weights.iter().zip(&row[ix..]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; grid.len()];
    for iz in 0..grid.nz {
        for ix in 0..grid.nx {
            out[grid.index(ix, iz)] = weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * along_x[(iz + k) * grid.nx + ix])
                .sum();
        }
    }
    out
}

impl Surrogate {
    pub fn new(space: ParameterSpace, grid: Grid, noise: NoiseConfig, u_tau_ref: f64) -> Result<Self> {
        space.validate()?;
        grid.validate()?;
        if !(u_tau_ref > 0.0) {
            return Err(invalid("reference velocity must be positive"));
        }
        Ok(Self {
            space,
            grid,
            noise,
            u_tau_ref,
        })
    }

    /// Noiseless field for `mu`, already normalized.
    pub fn clean_field(&self, mu: &ParameterSample, channel: Channel) -> Result<Vec<f64>> {
        let p = mu.physical;
        if self.space.exclusion.contains(p.x_src, p.z_src) {
            return Err(RomError::Domain(format!(
                "source ({}, {}) lies inside the exclusion box",
                p.x_src, p.z_src
            )));
        }
        let shape = PlumeShape::new(&self.space, mu)?;
        let h2_over_q = OBSTACLE_HEIGHT * OBSTACLE_HEIGHT / SOURCE_RATE;
        let scale = match channel {
            Channel::MeanConcentration => self.u_tau_ref * h2_over_q,
            Channel::VerticalFlux => h2_over_q,
        };
        Ok(self
            .grid
            .coordinates()
            .into_iter()
            .map(|(x, z)| {
                if inside_obstacle(x, z) {
                    0.0
                } else {
                    scale
                        * match channel {
                            Channel::MeanConcentration => shape.concentration(x, z),
                            Channel::VerticalFlux => shape.vertical_flux(x, z),
                        }
                }
            })
            .collect())
    }

    /// Field averaged over `window_fraction` of the full window.
    pub fn generate_field(
        &self,
        mu: &ParameterSample,
        channel: Channel,
        window_fraction: f64,
        seed: u64,
    ) -> Result<FieldSnapshot> {
        if !(window_fraction > 0.0 && window_fraction <= 1.0) {
            return Err(invalid(format!(
                "window fraction {window_fraction} outside (0, 1]"
            )));
        }
        let mut values = self.clean_field(mu, channel)?;
        if self.noise.relative_amplitude > 0.0 {
            let noise = self.window_noise(mu, window_fraction, seed);
            for (v, n) in values.iter_mut().zip(noise) {
                *v += self.noise.relative_amplitude * v.abs() * n;
            }
        }
        Ok(FieldSnapshot {
            values,
            mu: *mu,
            channel,
            window_fraction,
        })
    }

    /// Normalized averaging noise with variance `1/P`, `P = fraction·T_avg`.
    ///
    /// The running sum over periods is built from two independent smooth
    /// fields, one per half window, so that shorter windows are prefixes of
    /// longer ones.
    fn window_noise(&self, mu: &ParameterSample, window_fraction: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_key(seed, mu));
        let cells = self.noise.correlation_cells;
        let first = smooth_field(&mut rng, &self.grid, cells);
        let total = self.noise.t_avg_periods;
        let periods = (window_fraction * total).max(f64::MIN_POSITIVE);
        let half = total / 2.0;
        if periods <= half {
            let scale = periods.sqrt() / periods;
            first.into_iter().map(|a| a * scale).collect()
        } else {
            let second = smooth_field(&mut rng, &self.grid, cells);
            let (ca, cb) = (half.sqrt() / periods, (periods - half).sqrt() / periods);
            first.iter().zip(&second).map(|(a, b)| ca * a + cb * b).collect()
        }
    }
}

/// Provenance of a generated dataset: enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub generator_version: String,
    pub channel: Channel,
    pub seed: u64,
    pub n_snapshots: usize,
    pub surrogate: Surrogate,
    pub reference_mc_draws: usize,
    pub design: Design,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub grid: Grid,
    pub channel: Channel,
    pub snapshots: Vec<FieldSnapshot>,
    pub half_window: Option<Vec<FieldSnapshot>>,
    pub manifest: DatasetManifest,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn samples(&self) -> Vec<ParameterSample> {
        self.snapshots.iter().map(|s| s.mu).collect()
    }

    pub fn fields(&self) -> Vec<&[f64]> {
        self.snapshots.iter().map(|s| s.values.as_slice()).collect()
    }

    pub fn half_fields(&self) -> Option<Vec<&[f64]>> {
        self.half_window
            .as_ref()
            .map(|h| h.iter().map(|s| s.values.as_slice()).collect())
    }

    /// Snapshots at `range`, with their half-window companions.
    pub fn subset(&self, range: std::ops::Range<usize>) -> SnapshotSet {
        SnapshotSet {
            grid: self.grid,
            channel: self.channel,
            snapshots: self.snapshots[range.clone()].to_vec(),
            half_window: self.half_window.as_ref().map(|h| h[range].to_vec()),
            manifest: self.manifest.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_h = self.grid.len();
        for s in &self.snapshots {
            if s.values.len() != n_h || s.channel != self.channel {
                return Err(RomError::Data("snapshot does not match set grid/channel".into()));
            }
        }
        if let Some(half) = &self.half_window {
            if half.len() != self.snapshots.len()
                || half.iter().zip(&self.snapshots).any(|(h, f)| h.mu != f.mu)
            {
                return Err(RomError::Data(
                    "half-window companions are not paired with the snapshots".into(),
                ));
            }
        }
        Ok(())
    }

    fn matrix_file(&self, dir: &Path, half: bool) -> std::path::PathBuf {
        dir.join(format!(
            "{}_{}.smx",
            self.channel.name(),
            if half { "half" } else { "full" }
        ))
    }

    /// Writes `manifest.json` and one SMX file per window.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (nx, nz) = (self.grid.nx as u32, self.grid.nz as u32);
        let full = SmxMatrix::new(nx, nz, self.snapshots.iter().map(|s| s.values.clone()).collect())?;
        full.save(&self.matrix_file(dir, false))?;
        if let Some(half) = &self.half_window {
            SmxMatrix::new(nx, nz, half.iter().map(|s| s.values.clone()).collect())?
                .save(&self.matrix_file(dir, true))?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let grid = manifest.surrogate.grid;
        let channel = manifest.channel;
        let samples = &manifest.design.samples;
        let read = |half: bool, fraction: f64| -> Result<Vec<FieldSnapshot>> {
            let path = dir.join(format!(
                "{}_{}.smx",
                channel.name(),
                if half { "half" } else { "full" }
            ));
            let m = SmxMatrix::load(&path)?;
            if m.nx as usize != grid.nx || m.nz as usize != grid.nz || m.columns.len() != samples.len() {
                return Err(RomError::Format {
                    path: path.display().to_string(),
                    reason: "matrix shape disagrees with manifest".into(),
                });
            }
            Ok(m.columns
                .into_iter()
                .zip(samples)
                .map(|(values, mu)| FieldSnapshot {
                    values,
                    mu: *mu,
                    channel,
                    window_fraction: fraction,
                })
                .collect())
        };
        let snapshots = read(false, 1.0)?;
        let half_window = if dir.join(format!("{}_half.smx", channel.name())).exists() {
            Some(read(true, 0.5)?)
        } else {
            None
        };
        let set = SnapshotSet {
            grid,
            channel,
            snapshots,
            half_window,
            manifest,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Dataset generation settings beyond the basic `(space, n, grid, channel, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub noise: NoiseConfig,
    pub reference_mc_draws: usize,
    pub start_index: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            reference_mc_draws: REFERENCE_MC_DRAWS,
            start_index: 1,
        }
    }
}

pub fn generate_dataset(
    space: &ParameterSpace,
    n: usize,
    grid: &Grid,
    channel: Channel,
    seed: u64,
) -> Result<SnapshotSet> {
    generate_dataset_with(space, n, grid, channel, seed, &DatasetOptions::default())
}

/// Full-window snapshots plus half-window companions over a Halton design.
/// Snapshots are evaluated in parallel and assembled in design order.
pub fn generate_dataset_with(
    space: &ParameterSpace,
    n: usize,
    grid: &Grid,
    channel: Channel,
    seed: u64,
    options: &DatasetOptions,
) -> Result<SnapshotSet> {
    if n < 2 {
        return Err(invalid("a dataset needs at least two snapshots"));
    }
    let design = sampling::design(space, n, options.start_index)?;
    let u_tau_ref = sampling::reference_velocity(space, options.reference_mc_draws, seed)?;
    let surrogate = Surrogate::new(*space, *grid, options.noise, u_tau_ref)?;
    let pairs: Vec<(FieldSnapshot, FieldSnapshot)> = design
        .samples
        .par_iter()
        .map(|mu| {
            Ok((
                surrogate.generate_field(mu, channel, 1.0, seed)?,
                surrogate.generate_field(mu, channel, 0.5, seed)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (snapshots, half): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(SnapshotSet {
        grid: *grid,
        channel,
        snapshots,
        half_window: Some(half),
        manifest: DatasetManifest {
            tool_version: crate::TOOL_VERSION.to_string(),
            generator_version: GENERATOR_VERSION.to_string(),
            channel,
            seed,
            n_snapshots: n,
            surrogate,
            reference_mc_draws: options.reference_mc_draws,
            design,
        },
    })
}

/// Regenerates a dataset from its manifest.
pub fn regenerate(manifest: &DatasetManifest) -> Result<SnapshotSet> {
    let s = &manifest.surrogate;
    generate_dataset_with(
        &s.space,
        manifest.n_snapshots,
        &s.grid,
        manifest.channel,
        manifest.seed,
        &DatasetOptions {
            noise: s.noise,
            reference_mc_draws: manifest.reference_mc_draws,
            start_index: manifest.design.start_index,
        },
    )
}
