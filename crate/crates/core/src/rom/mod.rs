//! End-to-end reduced-order model: split, per-mode GP training, prediction,
//! Q² evaluation, robustness sweeps and persistence.

mod metrics;
mod robustness;
mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use metrics::{
    evaluate, q2_global, q2_local, q2_per_mode, DatasetTag, EvaluationReport,
};
pub use robustness::{
    crossing_index, curves_csv, robustness_sweep, summary_csv, truncation_csv, RobustnessConfig,
    RobustnessRow, CROSSING_WINDOW,
};

use crate::error::{invalid, Result, RomError};
use crate::gpr::{
    self, Diagnostics, GpModel, Hyperparameters, OptimizerOptions, Point, TrainingInputs,
};
use crate::plume::{Channel, FieldSnapshot, Grid, SnapshotSet, OBSTACLE_HEIGHT, SOURCE_RATE};
use crate::pod::{self, ReducedBasis, SvdBackend};
use crate::priors::{self, NoiseEstimate, PriorSet};
use crate::sampling::{ParameterSample, ParameterSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Multi-start marginal-likelihood maximization.
    Mll,
    /// Single-start posterior maximization under calibrated priors.
    Map,
    /// Hyperparameters frozen at the calibrated prior modes.
    PriorOnly,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mll => "mll",
            Method::Map => "map",
            Method::PriorOnly => "prior",
        }
    }

    fn needs_priors(&self) -> bool {
        !matches!(self, Method::Mll)
    }
}

impl std::str::FromStr for Method {
    type Err = RomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mll" => Ok(Method::Mll),
            "map" => Ok(Method::Map),
            "prior" | "prior_only" => Ok(Method::PriorOnly),
            other => Err(invalid(format!("unknown method '{other}' (mll|map|prior)"))),
        }
    }
}

/// Train / calibration / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.63,
            calibration: 0.07,
            test: 0.30,
        }
    }
}

/// SHA-256 of the parameters and field values of a snapshot sequence.
pub fn snapshot_hash(snapshots: &[FieldSnapshot]) -> String {
    let mut h = Sha256::new();
    for s in snapshots {
        for u in s.mu.unit.iter().chain(s.mu.physical.as_array().iter()) {
            h.update(u.to_le_bytes());
        }
        for v in &s.values {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitHashes {
    pub train: String,
    pub calibration: String,
    pub test: String,
}

/// Positions (half-open ranges into the dataset) and content hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub fractions: SplitFractions,
    pub n_total: usize,
    pub train: [usize; 2],
    pub calibration: [usize; 2],
    pub test: [usize; 2],
    pub hashes: SplitHashes,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: SnapshotSet,
    pub calibration: SnapshotSet,
    pub test: SnapshotSet,
    pub manifest: SplitManifest,
}

/// Subset sizes from floored cumulative boundaries `⌊f_train·n⌋` and
/// `⌊(f_train + f_calib)·n⌋`; the test set takes the remainder.
pub fn split_sizes(n: usize, fractions: &SplitFractions) -> Result<(usize, usize, usize)> {
    let f = [fractions.train, fractions.calibration, fractions.test];
    if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {f:?} must be nonnegative and sum to 1")));
    }
    let train = (fractions.train * n as f64).floor() as usize;
    let boundary = (((fractions.train + fractions.calibration) * n as f64).floor() as usize).min(n);
    let calibration = boundary.saturating_sub(train);
    let test = n - boundary;
    for (name, size) in [("train", train), ("calibration", calibration), ("test", test)] {
        if size == 0 {
            return Err(RomError::Data(format!(
                "{name} subset is empty for {n} snapshots and fractions {f:?}"
            )));
        }
    }
    Ok((train, calibration, test))
}

/// Contiguous split in design order.
pub fn split(dataset: &SnapshotSet, fractions: &SplitFractions) -> Result<Split> {
    let (a, b, _) = split_sizes(dataset.len(), fractions)?;
    let n = dataset.len();
    let train = dataset.subset(0..a);
    let calibration = dataset.subset(a..a + b);
    let test = dataset.subset(a + b..n);
    let manifest = SplitManifest {
        fractions: *fractions,
        n_total: n,
        train: [0, a],
        calibration: [a, a + b],
        test: [a + b, n],
        hashes: SplitHashes {
            train: snapshot_hash(&train.snapshots),
            calibration: snapshot_hash(&calibration.snapshots),
            test: snapshot_hash(&test.snapshots),
        },
    };
    Ok(Split {
        train,
        calibration,
        test,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_modes: usize,
    pub method: Method,
    pub seed: u64,
    pub n_restarts: usize,
    pub optimizer: OptimizerOptions,
    pub svd: SvdBackend,
}

impl TrainConfig {
    pub fn new(n_modes: usize, method: Method, seed: u64) -> Self {
        Self {
            n_modes,
            method,
            seed,
            n_restarts: gpr::DEFAULT_RESTARTS,
            optimizer: OptimizerOptions::default(),
            svd: SvdBackend::Auto,
        }
    }
}

/// Scales used to make the fields dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub u_tau_ref: f64,
    pub obstacle_height: f64,
    pub source_rate: f64,
}

/// Everything recorded about one mode's GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    /// 1-based mode index.
    pub mode: usize,
    pub theta: Hyperparameters,
    /// Hex SHA-256 of the little-endian bytes of the six hyperparameters.
    pub theta_checksum: String,
    pub jitter: f64,
    /// `s² / ϱ`, an alternative truncation diagnostic.
    pub noise_to_signal: f64,
    pub diagnostics: Diagnostics,
    pub priors: Option<PriorSet>,
}

/// Calibration evidence behind the priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorsAudit {
    pub noise: NoiseEstimate,
    /// Per-mode (mean, variance) of calibration-set whitened coefficients.
    pub calibration_moments: Vec<(f64, f64)>,
    /// Modes whose noise-prior mode hit the cap.
    pub capped_modes: Vec<usize>,
}

/// Hashes and design indices of the data a model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub pod_hash: String,
    pub gp_hash: String,
    pub calibration_hash: String,
    pub n_pod: usize,
    pub n_gp: usize,
    pub n_calibration: usize,
}

/// Scores on the training split, recomputed by [`evaluate`] on the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingScores {
    pub q2_per_mode: Vec<Option<f64>>,
    pub q2_global: f64,
}

/// Serializable part of a [`RomModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub tool_version: String,
    pub channel: Channel,
    pub grid: Grid,
    pub space: ParameterSpace,
    pub normalization: Normalization,
    pub config: TrainConfig,
    pub split: Option<SplitManifest>,
    pub training: TrainingData,
    pub eigenvalues: Vec<f64>,
    pub spectrum: Vec<f64>,
    pub total_variance: f64,
    pub modes: Vec<ModeRecord>,
    pub priors_audit: Option<PriorsAudit>,
    pub training_scores: TrainingScores,
}

#[derive(Debug, Clone)]
pub struct RomModel {
    pub meta: ModelMeta,
    pub basis: ReducedBasis,
    gps: Vec<GpModel>,
}

/// Field prediction at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Inverse-POD field, unclamped.
    pub field: Vec<f64>,
    /// Concentrations clamped at zero for display; equal to `field` for
    /// signed channels.
    pub presentation: Vec<f64>,
    pub coeff_mean: Vec<f64>,
    pub coeff_var: Vec<f64>,
}

pub(crate) fn theta_checksum(theta: &Hyperparameters) -> String {
    let mut h = Sha256::new();
    for v in [theta.noise_var, theta.signal_var]
        .iter()
        .chain(theta.lengthscales.iter())
    {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn mode_seed(seed: u64, mode: usize) -> u64 {
    seed ^ (mode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) fn unit_points(snapshots: &[FieldSnapshot]) -> Vec<Point> {
    snapshots.iter().map(|s| s.mu.unit).collect()
}

fn fields_of(snapshots: &[FieldSnapshot]) -> Vec<&[f64]> {
    snapshots.iter().map(|s| s.values.as_slice()).collect()
}

/// Priors for modes `1..=n_modes` calibrated on a held-out set.
pub(crate) fn calibrate_priors(
    basis: &ReducedBasis,
    calibration: &SnapshotSet,
) -> Result<(Vec<PriorSet>, PriorsAudit)> {
    let half = calibration.half_window.as_ref().ok_or_else(|| {
        RomError::Data("calibration set has no half-window companions".into())
    })?;
    let noise = priors::estimate_noise(basis, &calibration.snapshots, half)?;
    let sets: Vec<PriorSet> = (1..=basis.n_modes())
        .map(|l| priors::build_priors(l, (noise.fit_prefactor, noise.fit_exponent)))
        .collect::<Result<_>>()?;
    let capped_modes = sets
        .iter()
        .enumerate()
        .filter(|(_, p)| p.noise_mode_capped)
        .map(|(i, _)| i + 1)
        .collect();
    let calibration_moments = priors::coefficient_moments(basis, &fields_of(&calibration.snapshots))?;
    Ok((
        sets,
        PriorsAudit {
            noise,
            calibration_moments,
            capped_modes,
        },
    ))
}

/// One GP per mode, trained on `targets` (an `L × N` matrix, row per mode).
pub(crate) fn train_modes(
    inputs: &TrainingInputs,
    targets: &faer::Mat<f64>,
    priors: Option<&[PriorSet]>,
    config: &TrainConfig,
) -> Result<Vec<(GpModel, ModeRecord)>> {
    let n_modes = targets.nrows();
    (0..n_modes)
        .into_par_iter()
        .map(|l| {
            let y: Vec<f64> = (0..targets.ncols()).map(|j| targets[(l, j)]).collect();
            let prior = priors.map(|p| &p[l]);
            let (theta, diagnostics) = match (config.method, prior) {
                (Method::Mll, _) => gpr::optimize_mll(
                    inputs,
                    &y,
                    config.n_restarts,
                    mode_seed(config.seed, l + 1),
                    &config.optimizer,
                )?,
                (Method::Map, Some(p)) => gpr::optimize_map(inputs, &y, p, &config.optimizer)?,
                (Method::PriorOnly, Some(p)) => {
                    let theta = p.start_point();
                    let value = gpr::log_posterior(inputs, &y, &theta, p)?.value;
                    (theta, Diagnostics::fixed(theta, value))
                }
                _ => return Err(invalid("priors are required for this method")),
            };
            let gp = GpModel::fit(inputs, &y, theta)?;
            let record = ModeRecord {
                mode: l + 1,
                theta,
                theta_checksum: theta_checksum(&theta),
                jitter: gp.jitter(),
                noise_to_signal: theta.noise_var / theta.signal_var,
                diagnostics,
                priors: prior.cloned(),
            };
            Ok((gp, record))
        })
        .collect()
}

/// Fits POD on `train`, calibrates priors on `calibration` when the method
/// needs them, and trains one GP per retained mode on the training inputs.
pub fn train(train: &SnapshotSet, calibration: &SnapshotSet, config: &TrainConfig) -> Result<RomModel> {
    train_general(&train.snapshots, &[], calibration, config)
}

/// Trains on a split and records its manifest in the model.
pub fn train_split(split: &Split, config: &TrainConfig) -> Result<RomModel> {
    let mut model = train(&split.train, &split.calibration, config)?;
    model.meta.split = Some(split.manifest.clone());
    Ok(model)
}

/// POD on `pod_set`; GPs on `pod_set` followed by `extra_gp`; priors from
/// `calibration`.
pub(crate) fn train_general(
    pod_set: &[FieldSnapshot],
    extra_gp: &[FieldSnapshot],
    calibration: &SnapshotSet,
    config: &TrainConfig,
) -> Result<RomModel> {
    faer::set_global_parallelism(faer::Par::Seq);
    if config.n_modes + 1 > pod_set.len() {
        return Err(invalid(format!(
            "L = {} exceeds the POD training size minus one ({})",
            config.n_modes,
            pod_set.len().saturating_sub(1)
        )));
    }
    let first = pod_set
        .first()
        .ok_or_else(|| RomError::Data("empty training set".into()))?;
    let channel = first.channel;
    if pod_set.iter().chain(extra_gp).chain(&calibration.snapshots).any(|s| s.channel != channel) {
        return Err(RomError::Data("snapshots from different channels".into()));
    }
    let basis = pod::fit_with(&fields_of(pod_set), config.n_modes, config.svd)?;
    let gp_set: Vec<FieldSnapshot> = pod_set.iter().chain(extra_gp).cloned().collect();
    let inputs = TrainingInputs::new(unit_points(&gp_set));
    let targets = basis.project_many(&fields_of(&gp_set))?;
    let (prior_sets, audit) = if config.method.needs_priors() {
        let (p, a) = calibrate_priors(&basis, calibration)?;
        (Some(p), Some(a))
    } else {
        (None, None)
    };
    let trained = train_modes(&inputs, &targets, prior_sets.as_deref(), config)?;
    let (gps, modes): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let surrogate = calibration.manifest.surrogate;
    let mut model = RomModel {
        meta: ModelMeta {
            tool_version: crate::TOOL_VERSION.to_string(),
            channel,
            grid: calibration.grid,
            space: surrogate.space,
            normalization: Normalization {
                u_tau_ref: surrogate.u_tau_ref,
                obstacle_height: OBSTACLE_HEIGHT,
                source_rate: SOURCE_RATE,
            },
            config: config.clone(),
            split: None,
            training: TrainingData {
                pod_hash: snapshot_hash(pod_set),
                gp_hash: snapshot_hash(&gp_set),
                calibration_hash: snapshot_hash(&calibration.snapshots),
                n_pod: pod_set.len(),
                n_gp: gp_set.len(),
                n_calibration: calibration.len(),
            },
            eigenvalues: basis.eigenvalues.clone(),
            spectrum: basis.spectrum.clone(),
            total_variance: basis.total_variance,
            modes,
            priors_audit: audit,
            training_scores: TrainingScores {
                q2_per_mode: Vec::new(),
                q2_global: 0.0,
            },
        },
        basis,
        gps,
    };
    let scores = metrics::evaluate_snapshots(&model, pod_set)?;
    model.meta.training_scores = TrainingScores {
        q2_per_mode: scores.q2_per_mode,
        q2_global: scores.q2_global,
    };
    Ok(model)
}

impl RomModel {
    pub fn n_modes(&self) -> usize {
        self.gps.len()
    }

    pub fn gps(&self) -> &[GpModel] {
        &self.gps
    }

    pub fn method(&self) -> Method {
        self.meta.config.method
    }

    pub fn total_iterations(&self) -> usize {
        self.meta.modes.iter().map(|m| m.diagnostics.total_iterations()).sum()
    }

    /// Posterior mean and variance of the first `n_modes` coefficients.
    pub fn predict_coefficients(&self, unit: &Point, n_modes: usize) -> (Vec<f64>, Vec<f64>) {
        self.gps[..n_modes].iter().map(|gp| gp.predict(unit)).unzip()
    }

    /// Field prediction; refuses points outside the parameter space.
    pub fn predict(&self, mu: &ParameterSample) -> Result<Prediction> {
        self.meta.space.check_admissible(&mu.physical)?;
        if mu.unit.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(RomError::Domain(format!(
                "unit coordinates {:?} outside the cube",
                mu.unit
            )));
        }
        let (coeff_mean, coeff_var) = self.predict_coefficients(&mu.unit, self.n_modes());
        let field = self.basis.reconstruct(&coeff_mean)?;
        let presentation = match self.meta.channel {
            Channel::MeanConcentration => field.iter().map(|v| v.max(0.0)).collect(),
            Channel::VerticalFlux => field.clone(),
        };
        Ok(Prediction {
            field,
            presentation,
            coeff_mean,
            coeff_var,
        })
    }
}

pub use store::{load_model, save_model};
