//! Sensitivity of the model to the training-set size.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_snapshots, q2_global, q2_local};
use super::{train_general, Method, TrainConfig};
use crate::error::{invalid, Result};
use crate::gpr::OptimizerOptions;
use crate::plume::SnapshotSet;
use crate::pod::SvdBackend;

/// Width of the forward window used to locate where per-mode Q² reaches 0.
pub const CROSSING_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub sizes: Vec<usize>,
    pub method: Method,
    pub seed: u64,
    pub n_restarts: usize,
    pub optimizer: OptimizerOptions,
    /// Fraction of each reduced set used for the POD basis; the rest is its
    /// local calibration part, still used for GP fitting.
    pub pod_fraction: f64,
    /// Truncation levels to score; `None` scores every `L ≤ L_max`.
    pub l_grid: Option<Vec<usize>>,
}

impl RobustnessConfig {
    pub fn new(sizes: Vec<usize>, method: Method, seed: u64) -> Self {
        Self {
            sizes,
            method,
            seed,
            n_restarts: crate::gpr::DEFAULT_RESTARTS,
            optimizer: OptimizerOptions::default(),
            pod_fraction: 0.9,
            l_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub size: usize,
    pub n_pod: usize,
    pub l_max: usize,
    /// `(L, global test Q²)` for every scored truncation.
    pub q2_by_l: Vec<(usize, f64)>,
    pub l_opt: usize,
    pub q2_opt: f64,
    /// Per-mode test Q² for modes `1..=l_max`.
    pub q2_per_mode: Vec<Option<f64>>,
    /// First mode whose forward-window mean of per-mode Q² is ≤ 0.
    pub crossing_index: Option<usize>,
    pub runtime_seconds: f64,
}

/// First `l` (1-based) at which the mean of `Q²_l .. Q²_{l+w−1}` is ≤ 0;
/// undefined entries count as 0.
pub fn crossing_index(q2: &[Option<f64>], window: usize) -> Option<usize> {
    let v: Vec<f64> = q2.iter().map(|q| q.unwrap_or(0.0)).collect();
    let w = window.max(1);
    (0..v.len()).find(|&l| {
        let end = (l + w).min(v.len());
        v[l..end].iter().sum::<f64>() / (end - l) as f64 <= 0.0
    })
    .map(|l| l + 1)
}

/// For each size `s`, trains on the first `s` snapshots of `pool` (POD on
/// the first `⌊pod_fraction·s⌋`, GPs on all `s`), with priors calibrated on
/// `calibration`, and scores every truncation on `test`.
pub fn robustness_sweep(
    pool: &SnapshotSet,
    calibration: &SnapshotSet,
    test: &SnapshotSet,
    config: &RobustnessConfig,
) -> Result<Vec<RobustnessRow>> {
    config
        .sizes
        .iter()
        .map(|&size| sweep_one(pool, calibration, test, config, size))
        .collect()
}

fn sweep_one(
    pool: &SnapshotSet,
    calibration: &SnapshotSet,
    test: &SnapshotSet,
    config: &RobustnessConfig,
    size: usize,
) -> Result<RobustnessRow> {
    if size < 10 || size > pool.len() {
        return Err(invalid(format!(
            "training size {size} outside [10, {}]",
            pool.len()
        )));
    }
    let start = Instant::now();
    let n_pod = (config.pod_fraction * size as f64).floor() as usize;
    let l_max = n_pod - 1;
    let train_config = TrainConfig {
        n_modes: l_max,
        method: config.method,
        seed: config.seed,
        n_restarts: config.n_restarts,
        optimizer: config.optimizer.clone(),
        svd: SvdBackend::Auto,
    };
    let model = train_general(
        &pool.snapshots[..n_pod],
        &pool.snapshots[n_pod..size],
        calibration,
        &train_config,
    )?;
    let scores = evaluate_snapshots(&model, &test.snapshots)?;

    let grid: Vec<usize> = match &config.l_grid {
        Some(g) => g.iter().copied().filter(|l| (1..=l_max).contains(l)).collect(),
        None => (1..=l_max).collect(),
    };
    let truth: Vec<&[f64]> = test.snapshots.iter().map(|s| s.values.as_slice()).collect();
    let coeffs: Vec<Vec<f64>> = test
        .snapshots
        .iter()
        .map(|s| model.predict_coefficients(&s.mu.unit, l_max).0)
        .collect();
    let basis = &model.basis;
    let mut fields: Vec<Vec<f64>> = vec![basis.mean_field.clone(); test.len()];
    let mut q2_by_l = Vec::with_capacity(grid.len());
    let mut added = 0;
    for &l in &grid {
        while added < l {
            let w = basis.eigenvalues[added].sqrt();
            let col = basis.modes.col(added);
            for (f, k) in fields.iter_mut().zip(&coeffs) {
                let a = w * k[added];
                for (i, v) in f.iter_mut().enumerate() {
                    *v += a * col[i];
                }
            }
            added += 1;
        }
        let mut local = q2_local(&truth, &fields);
        for (q, keep) in local.iter_mut().zip(&basis.mask) {
            if !keep {
                *q = None;
            }
        }
        q2_by_l.push((l, q2_global(&local, &basis.node_variance)));
    }
    let (l_opt, q2_opt) = q2_by_l
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(RobustnessRow {
        size,
        n_pod,
        l_max,
        q2_by_l,
        l_opt,
        q2_opt,
        crossing_index: crossing_index(&scores.q2_per_mode, CROSSING_WINDOW),
        q2_per_mode: scores.q2_per_mode,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// `size,L_opt,q2_global,runtime` table.
pub fn summary_csv(rows: &[RobustnessRow]) -> String {
    let mut s = String::from("size,L_opt,q2_global,runtime\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.17e},{:.3}", r.size, r.l_opt, r.q2_opt, r.runtime_seconds);
    }
    s
}

/// Long-format per-mode Q² curves: `size,mode,q2`.
pub fn curves_csv(rows: &[RobustnessRow]) -> String {
    let mut s = String::from("size,mode,q2\n");
    for r in rows {
        for (l, q) in r.q2_per_mode.iter().enumerate() {
            let v = q.map_or_else(|| "NA".to_string(), |x| format!("{x:.17e}"));
            let _ = writeln!(s, "{},{},{}", r.size, l + 1, v);
        }
    }
    s
}

/// Long-format global Q² against truncation: `size,L,q2_global`.
pub fn truncation_csv(rows: &[RobustnessRow]) -> String {
    let mut s = String::from("size,L,q2_global\n");
    for r in rows {
        for (l, q) in &r.q2_by_l {
            let _ = writeln!(s, "{},{},{:.17e}", r.size, l, q);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_examples() {
        let q = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
        assert_eq!(crossing_index(&q(&[0.9, 0.8, 0.5, 0.1, -0.2, -0.3]), 3), Some(4));
        assert_eq!(crossing_index(&q(&[0.9, -0.1, 0.8, 0.7, 0.6]), 3), None);
        assert_eq!(crossing_index(&q(&[0.9, -0.1, 0.8, 0.7, 0.6]), 1), Some(2));
        assert_eq!(crossing_index(&[Some(0.5), None, None, None], 3), Some(2));
    }

    #[test]
    fn csv_shapes() {
        let row = RobustnessRow {
            size: 50,
            n_pod: 45,
            l_max: 44,
            q2_by_l: vec![(1, 0.5), (2, 0.6)],
            l_opt: 2,
            q2_opt: 0.6,
            q2_per_mode: vec![Some(0.9), None],
            crossing_index: None,
            runtime_seconds: 1.25,
        };
        let s = summary_csv(std::slice::from_ref(&row));
        assert!(s.starts_with("size,L_opt,q2_global,runtime\n50,2,") && s.ends_with('\n'));
        assert_eq!(curves_csv(&[row.clone()]).lines().count(), 3);
        assert!(curves_csv(&[row.clone()]).contains("50,2,NA"));
        assert_eq!(truncation_csv(&[row]).lines().count(), 3);
    }
}
