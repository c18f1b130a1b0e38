//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so its report is always
//! printed by `cargo test`. Pass criterion numbers to run a subset:
//! `cargo test -p plumerom --test acceptance -- 3 4`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use plumerom::gpr::{
    self, log_marginal_likelihood, matern52, Hyperparameters, OptimizerOptions, Point,
    TrainingInputs,
};
use plumerom::plume::{generate_dataset, regenerate, Channel, DatasetManifest, Grid, SnapshotSet};
use plumerom::pod;
use plumerom::priors::{estimate_noise, fit_noise_power_law};
use plumerom::rom::{
    self, evaluate, q2_global, q2_local, robustness_sweep, split, train_split, DatasetTag, Method,
    RobustnessConfig, RobustnessRow, RomModel, Split, SplitFractions, TrainConfig,
};
use plumerom::sampling::{reference_velocity, sample_wind_marginals, ParameterSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion 1
const MEAN_Z0: (f64, f64) = (0.0215, 0.001);
const SD_U_ZC: (f64, f64) = (1.732, 0.02);
const U_TAU_REF: (f64, f64) = (0.370, 0.005);
const MC_DRAWS: usize = 100_000;
// Criterion 2
const POD_ORACLE_TOL: f64 = 1e-8;
// Criterion 3
const WHITE_MEAN_TOL: f64 = 1e-8;
const WHITE_VAR_TOL: f64 = 1e-6;
// Criterion 4
const BESSEL_TOL: f64 = 1e-10;
const FD_REL_TOL: f64 = 1e-5;
// Criterion 5
const RECOVERY_FACTOR: f64 = 1.5;
const INTERPOLATION_TOL: f64 = 1e-8;
// Criterion 6
const MAP_MLL_Q2_GAP: f64 = 0.05;
const MAP_MLL_Q2_FLOOR: f64 = 0.5;
const MAP_ITERATION_RATIO: f64 = 0.1;
// Criterion 7
const NOISE_LAW: (f64, f64) = (2.16e-4, 0.93);
const NOISE_FIT_TOL: f64 = 1e-10;
// Criterion 8
const SPEARMAN_MAX: f64 = -0.5;
const PRIOR_WORSE_SHARE: f64 = 0.8;
const ROBUSTNESS_SIZES: [usize; 3] = [50, 100, 472];
// Criterion 10
const FLUX_Q2_MIN: f64 = 0.5;

const N_SNAPSHOTS: usize = 750;
const N_MODES: usize = 60;
const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Lazily built datasets and models shared by criteria 6 and 8.
#[derive(Default)]
struct Shared {
    concentration: Option<Split>,
    map: Option<RomModel>,
}

impl Shared {
    fn split(&mut self) -> &Split {
        self.concentration.get_or_insert_with(|| {
            let data = generate_dataset(&ParameterSpace::default(), N_SNAPSHOTS, &Grid::default(), Channel::MeanConcentration, SEED)
                .expect("concentration dataset");
            split(&data, &SplitFractions::default()).expect("split")
        })
    }

    fn map(&mut self) -> &RomModel {
        if self.map.is_none() {
            let s = self.split().clone();
            self.map = Some(train_split(&s, &TrainConfig::new(N_MODES, Method::Map, SEED)).expect("MAP model"));
        }
        self.map.as_ref().unwrap()
    }
}

fn check_interval(v: f64, (target, tol): (f64, f64)) -> bool {
    (v - target).abs() <= tol
}

fn criterion_1() -> Outcome {
    let space = ParameterSpace::default();
    let draws = sample_wind_marginals(&space, MC_DRAWS, SEED);
    let n = draws.len() as f64;
    let mean_z0 = draws.iter().map(|d| d.1).sum::<f64>() / n;
    let mean_u = draws.iter().map(|d| d.0).sum::<f64>() / n;
    let sd_u = (draws.iter().map(|d| (d.0 - mean_u).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let u_tau = reference_velocity(&space, MC_DRAWS, SEED).unwrap();
    outcome(
        check_interval(mean_z0, MEAN_Z0) && check_interval(sd_u, SD_U_ZC) && check_interval(u_tau, U_TAU_REF),
        format!("E[z0] = {mean_z0:.5}, sd(u_zc) = {sd_u:.4}, u_tau_ref = {u_tau:.4}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fields: Vec<Vec<f64>> = (0..8).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect();
    let refs: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
    let basis = pod::fit(&refs, 7).unwrap();

    let mean: Vec<f64> = (0..30).map(|i| fields.iter().map(|f| f[i]).sum::<f64>() / 8.0).collect();
    let cov = DMatrix::from_fn(30, 30, |i, j| {
        fields.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).sum::<f64>() / 7.0
    });
    let mut oracle: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    oracle.sort_by(|a, b| b.total_cmp(a));
    let eig_err = basis
        .eigenvalues
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs() / oracle[0])
        .fold(0.0, f64::max);

    let cumulative = pod::cumulative_variance(&basis.spectrum);
    let mut identity_err: f64 = 0.0;
    for l in 1..=7 {
        let b = pod::fit(&refs, l).unwrap();
        let rec: Vec<Vec<f64>> = fields.iter().map(|f| b.reconstruct(&b.project(f).unwrap()).unwrap()).collect();
        let q = q2_global(&q2_local(&refs, &rec), &b.node_variance);
        identity_err = identity_err.max((q - cumulative[l - 1]).abs());
    }
    outcome(
        eig_err <= POD_ORACLE_TOL && identity_err <= POD_ORACLE_TOL,
        format!("max eigenvalue error {eig_err:.1e}, variance identity error {identity_err:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let data = generate_dataset(&ParameterSpace::default(), 200, &Grid::default(), Channel::MeanConcentration, SEED).unwrap();
    let fields = data.fields();
    let basis = pod::fit(&fields, N_MODES).unwrap();
    let k = basis.project_many(&fields).unwrap();
    let n = k.ncols() as f64;
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for l in 0..k.nrows() {
        let mean = (0..k.ncols()).map(|j| k[(l, j)]).sum::<f64>() / n;
        let var = (0..k.ncols()).map(|j| (k[(l, j)] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    outcome(
        worst_mean <= WHITE_MEAN_TOL && worst_var <= WHITE_VAR_TOL,
        format!("{} modes: max |mean| {worst_mean:.1e}, max |var - 1| {worst_var:.1e}", k.nrows()),
    )
}

/// `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt` by the trapezoidal rule,
/// which converges geometrically for this analytic, decaying integrand.
fn bessel_k(nu: f64, x: f64) -> f64 {
    let h: f64 = 2e-3;
    let mut sum = 0.5 * (-x).exp();
    let mut t = h;
    loop {
        let term = (-x * t.cosh()).exp() * (nu * t).cosh();
        sum += term;
        if term < 1e-300 || t > 50.0 {
            break;
        }
        t += h;
    }
    sum * h
}

fn matern_bessel(d: f64, signal_var: f64) -> f64 {
    let nu: f64 = 2.5;
    let gamma_nu = 0.75 * std::f64::consts::PI.sqrt();
    let x = (2.0 * nu).sqrt() * d;
    signal_var * 2f64.powf(1.0 - nu) / gamma_nu * x.powf(nu) * bessel_k(nu, x)
}

fn criterion_4() -> Outcome {
    let mut bessel_err: f64 = 0.0;
    for d in [0.05, 0.3, 1.0, 2.0, 4.0] {
        bessel_err = bessel_err.max((matern52(d, 1.3) - matern_bessel(d, 1.3)).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fd_err: f64 = 0.0;
    for _ in 0..20 {
        let pts: Vec<Point> = (0..10).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let inputs = TrainingInputs::new(pts);
        let theta = gpr::restart_point(&mut rng);
        let e = log_marginal_likelihood(&inputs, &y, &theta).unwrap();
        let x = theta.to_log();
        for k in 0..x.len() {
            let h = 1e-5;
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let f = |v| log_marginal_likelihood(&inputs, &y, &Hyperparameters::from_log(v)).unwrap().value;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            fd_err = fd_err.max((fd - e.gradient[k]).abs() / e.gradient[k].abs().max(1e-3));
        }
    }
    outcome(
        bessel_err <= BESSEL_TOL && fd_err <= FD_REL_TOL,
        format!("Bessel-form max error {bessel_err:.1e}, gradient max relative error {fd_err:.1e}"),
    )
}

fn criterion_5() -> Outcome {
    let truth = Hyperparameters {
        noise_var: 1e-4,
        signal_var: 1.0,
        lengthscales: [0.3; 4],
    };
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect();
    let k = DMatrix::from_fn(n, n, |i, j| {
        gpr::covariance(&pts[i], &pts[j], &truth) + if i == j { truth.noise_var } else { 0.0 }
    });
    let chol = k.cholesky().expect("SPD covariance");
    let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let y: Vec<f64> = (chol.l() * z).iter().copied().collect();
    let inputs = TrainingInputs::new(pts);
    let (theta, _) = gpr::optimize_mll(&inputs, &y, 5, 5, &OptimizerOptions::default()).unwrap();
    let ratios: Vec<f64> = theta.lengthscales.iter().map(|l| l / 0.3).collect();
    let recovered = ratios.iter().all(|r| *r <= RECOVERY_FACTOR && *r >= 1.0 / RECOVERY_FACTOR);

    let small = TrainingInputs::new(inputs.points()[..40].to_vec());
    let noiseless = Hyperparameters { noise_var: 0.0, ..truth };
    let gp = gpr::GpModel::fit(&small, &y[..40], noiseless).unwrap();
    let interp_err = small
        .points()
        .iter()
        .zip(&y[..40])
        .map(|(p, t)| (gp.mean(p) - t).abs())
        .fold(0.0, f64::max);
    outcome(
        recovered && interp_err <= INTERPOLATION_TOL,
        format!(
            "length-scale ratios [{}], interpolation error {interp_err:.1e}",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn test_q2(model: &RomModel, s: &Split) -> Vec<Option<f64>> {
    evaluate(model, &s.test, DatasetTag::Test).unwrap().q2_per_mode
}

fn criterion_6(shared: &mut Shared) -> Outcome {
    let s = shared.split().clone();
    let map = shared.map().clone();
    let mll = train_split(&s, &TrainConfig::new(N_MODES, Method::Mll, SEED)).unwrap();
    let (q_map, q_mll) = (test_q2(&map, &s), test_q2(&mll, &s));
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for (a, b) in q_map.iter().zip(&q_mll) {
        if let (Some(a), Some(b)) = (a, b) {
            if a.max(*b) > MAP_MLL_Q2_FLOOR {
                compared += 1;
                worst = worst.max((a - b).abs());
            }
        }
    }
    let (it_map, it_mll) = (map.total_iterations(), mll.total_iterations());
    outcome(
        worst <= MAP_MLL_Q2_GAP && (it_map as f64) <= MAP_ITERATION_RATIO * it_mll as f64,
        format!(
            "{compared} modes with Q2 > {MAP_MLL_Q2_FLOOR}: max |dQ2| {worst:.3}; iterations MAP {it_map} vs MLL {it_mll} (ratio {:.3})",
            it_map as f64 / it_mll as f64
        ),
    )
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let (a, b) = NOISE_LAW;
    let synthetic: Vec<f64> = (1..=N_MODES).map(|l| a * (l as f64).powf(b)).collect();
    let (fa, fb) = fit_noise_power_law(&synthetic).unwrap();
    let exact = (fa / a - 1.0).abs() <= NOISE_FIT_TOL && (fb - b).abs() <= NOISE_FIT_TOL;

    let s = shared.split();
    let basis = pod::fit(&s.train.fields(), N_MODES).unwrap();
    let half = s.calibration.half_window.as_ref().unwrap();
    let est = estimate_noise(&basis, &s.calibration.snapshots, half).unwrap();
    let nonneg = est.per_mode.iter().all(|v| *v >= 0.0);
    outcome(
        exact && nonneg && est.fit_exponent > 0.0,
        format!(
            "synthetic fit ({fa:.4e}, {fb:.6}); surrogate s^2 in [{:.1e}, {:.1e}], fit a = {:.2e}, b = {:.3}",
            est.per_mode.iter().cloned().fold(f64::INFINITY, f64::min),
            est.per_mode.iter().cloned().fold(0.0, f64::max),
            est.fit_prefactor,
            est.fit_exponent
        ),
    )
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Crossing index with "never" ranked past the last scored mode.
fn crossing_rank(r: &RobustnessRow) -> usize {
    r.crossing_index.unwrap_or(r.l_max + 1)
}

fn criterion_8(shared: &mut Shared) -> Outcome {
    let s = shared.split().clone();
    let map = shared.map().clone();
    let prior = train_split(&s, &TrainConfig::new(N_MODES, Method::PriorOnly, SEED)).unwrap();
    let map_report = evaluate(&map, &s.test, DatasetTag::Test).unwrap();
    let q_prior = test_q2(&prior, &s);

    let defined: Vec<(f64, f64)> = map_report
        .q2_per_mode
        .iter()
        .enumerate()
        .filter_map(|(l, q)| q.map(|q| ((l + 1) as f64, q)))
        .collect();
    let (modes, q2): (Vec<f64>, Vec<f64>) = defined.into_iter().unzip();
    let rho = spearman(&modes, &q2);
    let pass_a = rho < SPEARMAN_MAX;

    let pairs: Vec<(f64, f64)> = q_prior
        .iter()
        .zip(&map_report.q2_per_mode)
        .filter_map(|(p, m)| Some(((*p)?, (*m)?)))
        .collect();
    let share = pairs.iter().filter(|(p, m)| p <= m).count() as f64 / pairs.len() as f64;
    let pass_b = share >= PRIOR_WORSE_SHARE;

    let config = RobustnessConfig::new(ROBUSTNESS_SIZES.to_vec(), Method::Map, SEED);
    let rows = robustness_sweep(&s.train, &s.calibration, &s.test, &config).unwrap();
    let ordered = |f: &dyn Fn(&RobustnessRow) -> usize| {
        rows.windows(2).all(|w| f(&w[0]) <= f(&w[1])) && f(&rows[0]) < f(&rows[rows.len() - 1])
    };
    let pass_c = ordered(&crossing_rank) && ordered(&|r| r.l_opt);

    let train_q2 = map.meta.training_scores.q2_global;
    let pass_d = map_report.q2_global < train_q2;

    let sweep: Vec<String> = rows
        .iter()
        .map(|r| {
            let c = r.crossing_index.map_or_else(|| "none".to_string(), |c| c.to_string());
            format!("{}: cross {c}, L_opt {}", r.size, r.l_opt)
        })
        .collect();
    outcome(
        pass_a && pass_b && pass_c && pass_d,
        format!(
            "(a) rho {rho:.3} [{}] (b) prior <= MAP on {:.0}% [{}] (c) {} [{}] (d) test {:.4} < train {:.4} [{}]",
            tag(pass_a),
            share * 100.0,
            tag(pass_b),
            sweep.join("; "),
            tag(pass_c),
            map_report.q2_global,
            train_q2,
            tag(pass_d)
        ),
    )
}

fn tag(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "fail"
    }
}

fn run_pipeline(data: &SnapshotSet, dir: &Path) {
    data.save(&dir.join("dataset")).unwrap();
    let s = split(data, &SplitFractions::default()).unwrap();
    let model = train_split(&s, &TrainConfig::new(20, Method::Map, SEED)).unwrap();
    rom::save_model(&model, &dir.join("model")).unwrap();
    let report = evaluate(&model, &s.test, DatasetTag::Test).unwrap();
    report.write(&dir.join("report"), data.grid.nx, data.grid.nz).unwrap();
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (first, second) = (tmp.path().join("first"), tmp.path().join("second"));
    let data = generate_dataset(&ParameterSpace::default(), 120, &Grid::default(), Channel::MeanConcentration, 9).unwrap();
    run_pipeline(&data, &first);
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(first.join("dataset/manifest.json")).unwrap()).unwrap();
    run_pipeline(&regenerate(&manifest).unwrap(), &second);
    let files = [
        "dataset/manifest.json",
        "dataset/mean_concentration_full.smx",
        "dataset/mean_concentration_half.smx",
        "model/model.json",
        "model/basis.smx",
        "model/gps.bin",
        "report/q2_per_mode.csv",
        "report/q2_local.smx",
        "report/summary.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(first.join(f)).unwrap() != fs::read(second.join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {:?}", files.len(), differing),
    )
}

fn criterion_10() -> Outcome {
    let data = generate_dataset(&ParameterSpace::default(), N_SNAPSHOTS, &Grid::default(), Channel::VerticalFlux, SEED).unwrap();
    let s = split(&data, &SplitFractions::default()).unwrap();
    let model = train_split(&s, &TrainConfig::new(N_MODES, Method::Map, SEED)).unwrap();
    let report = evaluate(&model, &s.test, DatasetTag::Test).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    report.write(tmp.path(), data.grid.nx, data.grid.nz).unwrap();
    let well_formed = report.dataset_tag == DatasetTag::Test
        && report.q2_per_mode.len() == N_MODES
        && report.q2_local.len() == data.grid.len()
        && report.q2_global.is_finite()
        && report.per_mode_csv().lines().count() == N_MODES + 1;
    outcome(
        well_formed && report.q2_global > FLUX_Q2_MIN,
        format!("well-formed {well_formed}, global test Q2 {:.4}", report.q2_global),
    )
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget_seconds: f64,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "analytic constants", budget_seconds: 5.0 },
    Criterion { id: 2, name: "POD oracle equivalence", budget_seconds: 1.0 },
    Criterion { id: 3, name: "whitening moments", budget_seconds: 30.0 },
    Criterion { id: 4, name: "kernel and likelihood", budget_seconds: 10.0 },
    Criterion { id: 5, name: "GP self-consistency", budget_seconds: 60.0 },
    Criterion { id: 6, name: "MAP vs MLL equivalence", budget_seconds: 1800.0 },
    Criterion { id: 7, name: "noise-prior pipeline", budget_seconds: 60.0 },
    Criterion { id: 8, name: "trend reproduction", budget_seconds: 2700.0 },
    Criterion { id: 9, name: "pipeline determinism", budget_seconds: 600.0 },
    Criterion { id: 10, name: "flux-channel generality", budget_seconds: 900.0 },
];

/// Criterion 6's budget is stated for four workers; its per-mode work is
/// independent, so the budget scales with the available parallelism.
fn budget(c: &Criterion) -> f64 {
    if c.id == 6 {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
        c.budget_seconds * 4.0 / cores as f64
    } else {
        c.budget_seconds
    }
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failures = 0;
    println!("acceptance criteria");
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let o = match c.id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut shared),
            7 => criterion_7(&mut shared),
            8 => criterion_8(&mut shared),
            9 => criterion_9(),
            _ => criterion_10(),
        };
        let secs = start.elapsed().as_secs_f64();
        let in_budget = secs <= budget(c);
        let pass = o.pass && in_budget;
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] {:>2}. {:<26} {} ({secs:.1} s, budget {:.0} s)",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            o.detail,
            budget(c)
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
