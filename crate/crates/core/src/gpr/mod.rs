//! Exact Gaussian-process regression on the unit parameter cube.
//!
//! One zero-mean GP per reduced coefficient, Matérn-5/2 ARD covariance plus
//! observation noise. Hyperparameters are estimated either by maximizing the
//! marginal log-likelihood from several random starts, or by maximizing the
//! log-posterior under calibrated priors from a single start.

mod kernel;
mod optimize;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kernel::{ard_distance, covariance, matern52, Hyperparameters, Point, N_THETA, SQRT5};
pub use optimize::{maximize, OptimizerOptions, Termination, Trajectory};

use crate::error::{invalid, Result, RomError};
use crate::priors::PriorSet;
use crate::sampling::PARAM_DIM;

/// Diagonal jitter tried once when the Cholesky factorization fails.
pub const JITTER: f64 = 1e-8;

/// Restart box for multi-start likelihood maximization.
pub const RESTART_LENGTHSCALE: (f64, f64) = (1e-2, 1e1);
pub const RESTART_SIGNAL: (f64, f64) = (0.1, 2.0);
pub const RESTART_NOISE: (f64, f64) = (1e-6, 1.0);
pub const DEFAULT_RESTARTS: usize = 15;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Training inputs with cached per-dimension squared differences, shared by
/// every GP trained on the same design.
#[derive(Debug, Clone)]
pub struct TrainingInputs {
    points: Vec<Point>,
    /// Strict lower triangle packed column by column: pairs `(i, j)`, `i > j`,
    /// ordered by `j` then `i`.
    sq_diff: Vec<Point>,
}

impl TrainingInputs {
    pub fn new(points: Vec<Point>) -> Self {
        let n = points.len();
        let mut sq_diff = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for j in 0..n {
            for i in j + 1..n {
                let mut q = [0.0; PARAM_DIM];
                for (k, v) in q.iter_mut().enumerate() {
                    *v = (points[i][k] - points[j][k]).powi(2);
                }
                sq_diff.push(q);
            }
        }
        Self { points, sq_diff }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Lower triangle of `K + shift·I` (the upper triangle is left at zero),
    /// the packed off-diagonal covariances and, per pair, the common factor
    /// of the length-scale derivatives `(5/3)ϱ(1 + √5 d)e^{−√5 d}`.
    fn kernel(&self, theta: &Hyperparameters, shift: f64, want_grad: bool) -> KernelParts {
        let n = self.len();
        let inv_l2: [f64; PARAM_DIM] = std::array::from_fn(|m| 1.0 / theta.lengthscales[m].powi(2));
        let rho = theta.signal_var;
        let mut packed = Vec::with_capacity(self.sq_diff.len());
        let mut dfac = Vec::with_capacity(if want_grad { self.sq_diff.len() } else { 0 });
        for q in &self.sq_diff {
            let d2 = q[0] * inv_l2[0] + q[1] * inv_l2[1] + q[2] * inv_l2[2] + q[3] * inv_l2[3];
            let r = SQRT5 * d2.sqrt();
            let e = (-r).exp();
            packed.push(rho * (1.0 + r + r * r / 3.0) * e);
            if want_grad {
                dfac.push(5.0 / 3.0 * rho * (1.0 + r) * e);
            }
        }
        let mut lower = Mat::zeros(n, n);
        let mut p = 0;
        for j in 0..n {
            let col = lower.col_mut(j).try_as_col_major_mut().expect("contiguous column").as_slice_mut();
            col[j] = rho + shift;
            let len = n - j - 1;
            col[j + 1..].copy_from_slice(&packed[p..p + len]);
            p += len;
        }
        KernelParts { lower, packed, dfac }
    }
}

struct KernelParts {
    lower: Mat<f64>,
    packed: Vec<f64>,
    dfac: Vec<f64>,
}

/// Cholesky factorization of `K + (s² + jitter)I`.
struct Factor {
    jitter: f64,
    llt: faer::linalg::solvers::Llt<f64>,
}

fn factorize(inputs: &TrainingInputs, theta: &Hyperparameters, want_grad: bool) -> Result<(Factor, KernelParts)> {
    let parts = inputs.kernel(theta, theta.noise_var, want_grad);
    if let Ok(llt) = parts.lower.llt(Side::Lower) {
        return Ok((Factor { jitter: 0.0, llt }, parts));
    }
    let mut jittered = parts.lower.clone();
    for i in 0..inputs.len() {
        jittered[(i, i)] += JITTER;
    }
    match jittered.llt(Side::Lower) {
        Ok(llt) => Ok((Factor { jitter: JITTER, llt }, parts)),
        Err(e) => Err(RomError::Numerical(format!(
            "kernel matrix not positive definite after jitter {JITTER}: {e:?}"
        ))),
    }
}

impl Factor {
    fn solve(&self, y: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(y.len(), 1, |i, _| y[i]);
        let x = self.llt.solve(&rhs);
        (0..y.len()).map(|i| x[(i, 0)]).collect()
    }

    fn half_log_det(&self) -> f64 {
        let l = self.llt.L();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum()
    }
}

/// Solves `L v = b` in place.
fn forward_substitute(l: &Mat<f64>, b: &mut [f64]) {
    for i in 0..b.len() {
        let mut s = b[i];
        for (j, bj) in b.iter().enumerate().take(i) {
            s -= l[(i, j)] * bj;
        }
        b[i] = s / l[(i, i)];
    }
}

/// Objective value with its gradient over the log-hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: [f64; N_THETA],
    pub jitter: f64,
}

fn check_problem(inputs: &TrainingInputs, targets: &[f64]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(invalid(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() {
        return Err(invalid("empty training set"));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(RomError::Data("non-finite training target".into()));
    }
    Ok(())
}

/// Marginal log-likelihood `−½yᵀα − Σ log L_ii − (N/2) log 2π` and its
/// analytic gradient `½ tr((ααᵀ − K⁻¹) ∂K)` over `log θ`.
pub fn log_marginal_likelihood(
    inputs: &TrainingInputs,
    targets: &[f64],
    theta: &Hyperparameters,
) -> Result<Evaluation> {
    evaluate_mll(inputs, targets, theta, true)
}

/// As [`log_marginal_likelihood`]; with `want_grad = false` the gradient is
/// left at zero and the `O(N³)` inverse is skipped.
pub fn evaluate_mll(
    inputs: &TrainingInputs,
    targets: &[f64],
    theta: &Hyperparameters,
    want_grad: bool,
) -> Result<Evaluation> {
    check_problem(inputs, targets)?;
    theta.validate()?;
    let n = inputs.len();
    let (factor, parts) = factorize(inputs, theta, want_grad)?;
    let alpha = factor.solve(targets);
    let fit: f64 = targets.iter().zip(&alpha).map(|(y, a)| y * a).sum();
    let value = -0.5 * fit - factor.half_log_det() - 0.5 * n as f64 * LN_2PI;
    if !want_grad {
        return Ok(Evaluation {
            value,
            gradient: [0.0; N_THETA],
            jitter: factor.jitter,
        });
    }

    let k_inv = factor.llt.inverse();
    let mut gradient = [0.0; N_THETA];
    let mut diag = 0.0;
    for i in 0..n {
        diag += alpha[i] * alpha[i] - k_inv[(i, i)];
    }
    gradient[0] = 0.5 * theta.noise_var * diag;
    let mut signal = diag * theta.signal_var;
    let mut p = 0;
    for j in 0..n {
        let inv_col = k_inv.col(j).try_as_col_major().expect("contiguous column").as_slice();
        for i in j + 1..n {
            let w = alpha[i] * alpha[j] - inv_col[i];
            signal += 2.0 * w * parts.packed[p];
            let wd = w * parts.dfac[p];
            let q = &inputs.sq_diff[p];
            for m in 0..PARAM_DIM {
                gradient[2 + m] += wd * q[m];
            }
            p += 1;
        }
    }
    gradient[1] = 0.5 * signal;
    let inv_l2: Vec<f64> = theta.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    for m in 0..PARAM_DIM {
        gradient[2 + m] *= inv_l2[m];
    }
    Ok(Evaluation {
        value,
        gradient,
        jitter: factor.jitter,
    })
}

/// Marginal log-likelihood plus the log prior density of `θ`.
pub fn log_posterior(
    inputs: &TrainingInputs,
    targets: &[f64],
    theta: &Hyperparameters,
    priors: &PriorSet,
) -> Result<Evaluation> {
    evaluate_posterior(inputs, targets, theta, priors, true)
}

pub fn evaluate_posterior(
    inputs: &TrainingInputs,
    targets: &[f64],
    theta: &Hyperparameters,
    priors: &PriorSet,
    want_grad: bool,
) -> Result<Evaluation> {
    let mut e = evaluate_mll(inputs, targets, theta, want_grad)?;
    let (value, gradient) = priors.log_density(theta);
    e.value += value;
    for (g, p) in e.gradient.iter_mut().zip(gradient) {
        *g += p;
    }
    Ok(e)
}

/// Record of one hyperparameter estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub objective: Objective,
    pub trajectories: Vec<Trajectory>,
    /// Index of the retained trajectory.
    pub best: usize,
    /// Starts whose initial factorization failed.
    pub failed_starts: usize,
}

impl Diagnostics {
    pub fn total_iterations(&self) -> usize {
        self.trajectories.iter().map(|t| t.iterations).sum()
    }

    pub fn total_evaluations(&self) -> usize {
        self.trajectories.iter().map(|t| t.evaluations).sum()
    }

    pub fn best_value(&self) -> f64 {
        self.trajectories[self.best].value
    }

    /// Frozen hyperparameters, no optimization performed.
    pub fn fixed(theta: Hyperparameters, value: f64) -> Self {
        Self {
            objective: Objective::Fixed,
            trajectories: vec![Trajectory {
                start: theta,
                end: theta,
                value,
                iterations: 0,
                evaluations: 1,
                termination: Termination::Converged,
                projected_gradient: 0.0,
            }],
            best: 0,
            failed_starts: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MarginalLikelihood,
    Posterior,
    Fixed,
}

fn check_size(inputs: &TrainingInputs) -> Result<()> {
    if inputs.len() < 4 {
        return Err(invalid(format!(
            "hyperparameter optimization needs at least 4 training points, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

/// Log-uniform draw of a restart point inside the restart box.
pub fn restart_point(rng: &mut ChaCha8Rng) -> Hyperparameters {
    let mut draw = |(lo, hi): (f64, f64)| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let noise_var = draw(RESTART_NOISE);
    let signal_var = draw(RESTART_SIGNAL);
    let mut lengthscales = [0.0; PARAM_DIM];
    for l in lengthscales.iter_mut() {
        *l = draw(RESTART_LENGTHSCALE);
    }
    Hyperparameters {
        noise_var,
        signal_var,
        lengthscales,
    }
}

/// Multi-start maximization of the marginal log-likelihood.
pub fn optimize_mll(
    inputs: &TrainingInputs,
    targets: &[f64],
    n_restarts: usize,
    seed: u64,
    options: &OptimizerOptions,
) -> Result<(Hyperparameters, Diagnostics)> {
    check_problem(inputs, targets)?;
    check_size(inputs)?;
    if n_restarts == 0 {
        return Err(invalid("at least one restart is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Hyperparameters> = (0..n_restarts).map(|_| restart_point(&mut rng)).collect();
    let mut trajectories = Vec::with_capacity(n_restarts);
    let mut failed_starts = 0;
    let mut last_err = None;
    for start in starts {
        match maximize(|t, g| evaluate_mll(inputs, targets, t, g), start, options) {
            Ok(t) => trajectories.push(t),
            Err(e) => {
                failed_starts += 1;
                last_err = Some(e);
            }
        }
    }
    finish(Objective::MarginalLikelihood, trajectories, failed_starts, last_err)
}

/// Single-start maximization of the log-posterior from the prior modes.
pub fn optimize_map(
    inputs: &TrainingInputs,
    targets: &[f64],
    priors: &PriorSet,
    options: &OptimizerOptions,
) -> Result<(Hyperparameters, Diagnostics)> {
    check_problem(inputs, targets)?;
    check_size(inputs)?;
    let start = priors.start_point();
    let trajectory = maximize(|t, g| evaluate_posterior(inputs, targets, t, priors, g), start, options)?;
    finish(Objective::Posterior, vec![trajectory], 0, None)
}

fn finish(
    objective: Objective,
    trajectories: Vec<Trajectory>,
    failed_starts: usize,
    last_err: Option<RomError>,
) -> Result<(Hyperparameters, Diagnostics)> {
    let best = trajectories
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .map(|(i, _)| i);
    let Some(best) = best else {
        return Err(last_err.unwrap_or_else(|| RomError::Numerical("no trajectory succeeded".into())));
    };
    let theta = trajectories[best].end;
    Ok((
        theta,
        Diagnostics {
            objective,
            trajectories,
            best,
            failed_starts,
        },
    ))
}

/// A fitted GP: factorized covariance and weights `α = (K + s²I)⁻¹y`.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Point>,
    targets: Vec<f64>,
    theta: Hyperparameters,
    jitter: f64,
    l: Mat<f64>,
    alpha: Vec<f64>,
}

/// Joint posterior at a set of test inputs.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub cov: Mat<f64>,
}

impl GpModel {
    pub fn fit(inputs: &TrainingInputs, targets: &[f64], theta: Hyperparameters) -> Result<Self> {
        check_problem(inputs, targets)?;
        theta.validate()?;
        let (factor, _) = factorize(inputs, &theta, false)?;
        let alpha = factor.solve(targets);
        Ok(Self {
            inputs: inputs.points.clone(),
            targets: targets.to_vec(),
            theta,
            jitter: factor.jitter,
            l: factor.llt.L().to_owned(),
            alpha,
        })
    }

    pub fn theta(&self) -> &Hyperparameters {
        &self.theta
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inputs(&self) -> &[Point] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    fn cross(&self, x: &Point) -> Vec<f64> {
        self.inputs.iter().map(|u| covariance(x, u, &self.theta)).collect()
    }

    /// Posterior mean at one point.
    pub fn mean(&self, x: &Point) -> f64 {
        self.cross(x).iter().zip(&self.alpha).map(|(k, a)| k * a).sum()
    }

    /// Posterior mean and variance at one point.
    pub fn predict(&self, x: &Point) -> (f64, f64) {
        let mut v = self.cross(x);
        let mean = v.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        forward_substitute(&self.l, &mut v);
        let var = self.theta.signal_var - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }

    pub fn posterior(&self, test: &[Point]) -> Posterior {
        let vs: Vec<Vec<f64>> = test
            .iter()
            .map(|x| {
                let mut v = self.cross(x);
                forward_substitute(&self.l, &mut v);
                v
            })
            .collect();
        let mean = test.iter().map(|x| self.mean(x)).collect();
        let m = test.len();
        let mut cov = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let mut c = covariance(&test[i], &test[j], &self.theta) - dot;
                if i == j && c < 0.0 {
                    c = 0.0;
                }
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        Posterior { mean, cov }
    }
}
