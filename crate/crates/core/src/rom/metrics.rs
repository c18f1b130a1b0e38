//! Explained-variance scores: per mode, per node and variance-weighted.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use super::{snapshot_hash, RomModel};
use crate::error::{Result, RomError};
use crate::plume::{FieldSnapshot, SnapshotSet};
use crate::pod::MASK_RELATIVE;
use crate::smx::SmxMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    Train,
    Test,
}

impl DatasetTag {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetTag::Train => "train",
            DatasetTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset_tag: DatasetTag,
    pub n_snapshots: usize,
    /// `None` where the test coefficients have zero variance.
    pub q2_per_mode: Vec<Option<f64>>,
    /// `None` on masked nodes.
    pub q2_local: Vec<Option<f64>>,
    pub q2_global: f64,
    pub dataset_hash: String,
    pub train_hash: String,
    pub calibration_hash: String,
}

/// `Q²_l = 1 − Σ(k − m)² / Σ(k − mean k)²` per row of `L × M` matrices.
pub fn q2_per_mode(truth: &Mat<f64>, predicted: &Mat<f64>) -> Vec<Option<f64>> {
    let m = truth.ncols();
    (0..truth.nrows())
        .map(|l| {
            let mean = (0..m).map(|j| truth[(l, j)]).sum::<f64>() / m as f64;
            let ss: f64 = (0..m).map(|j| (truth[(l, j)] - mean).powi(2)).sum();
            let sse: f64 = (0..m).map(|j| (truth[(l, j)] - predicted[(l, j)]).powi(2)).sum();
            (ss > 0.0).then(|| 1.0 - sse / ss)
        })
        .collect()
}

/// Node-wise `Q²_i`; nodes whose variance over `truth` is below
/// `1e-14 · max` are masked. Values are not clamped.
pub fn q2_local(truth: &[&[f64]], predicted: &[Vec<f64>]) -> Vec<Option<f64>> {
    let n_h = truth.first().map_or(0, |f| f.len());
    let m = truth.len() as f64;
    let mut ss = vec![0.0; n_h];
    let mut sse = vec![0.0; n_h];
    for i in 0..n_h {
        let mean = truth.iter().map(|f| f[i]).sum::<f64>() / m;
        ss[i] = truth.iter().map(|f| (f[i] - mean).powi(2)).sum();
        sse[i] = truth.iter().zip(predicted).map(|(f, p)| (f[i] - p[i]).powi(2)).sum();
    }
    let max = ss.iter().cloned().fold(0.0, f64::max);
    (0..n_h)
        .map(|i| (max > 0.0 && ss[i] >= MASK_RELATIVE * max).then(|| 1.0 - sse[i] / ss[i]))
        .collect()
}

/// `Σ ω_i Q²_i` with `ω_i = V_i / Σ V_j` over the defined nodes.
pub fn q2_global(q2_local: &[Option<f64>], node_variance: &[f64]) -> f64 {
    let total: f64 = q2_local
        .iter()
        .zip(node_variance)
        .filter(|(q, _)| q.is_some())
        .map(|(_, v)| v)
        .sum();
    q2_local
        .iter()
        .zip(node_variance)
        .filter_map(|(q, v)| q.map(|q| q * v / total))
        .sum()
}

pub(crate) struct Scores {
    pub q2_per_mode: Vec<Option<f64>>,
    pub q2_local: Vec<Option<f64>>,
    pub q2_global: f64,
}

pub(crate) fn evaluate_snapshots(model: &RomModel, snapshots: &[FieldSnapshot]) -> Result<Scores> {
    if snapshots.len() < 2 {
        return Err(RomError::Data("evaluation needs at least 2 snapshots".into()));
    }
    let fields: Vec<&[f64]> = snapshots.iter().map(|s| s.values.as_slice()).collect();
    let truth = model.basis.project_many(&fields)?;
    let l = model.n_modes();
    let mut means = Mat::zeros(l, snapshots.len());
    let mut predicted = Vec::with_capacity(snapshots.len());
    for (j, s) in snapshots.iter().enumerate() {
        let (m, _) = model.predict_coefficients(&s.mu.unit, l);
        for (i, v) in m.iter().enumerate() {
            means[(i, j)] = *v;
        }
        predicted.push(model.basis.reconstruct(&m)?);
    }
    let mut local = q2_local(&fields, &predicted);
    for (q, keep) in local.iter_mut().zip(&model.basis.mask) {
        if !keep {
            *q = None;
        }
    }
    Ok(Scores {
        q2_per_mode: q2_per_mode(&truth, &means),
        q2_global: q2_global(&local, &model.basis.node_variance),
        q2_local: local,
    })
}

/// Scores a model on a dataset. Evaluating the training data under the
/// `test` tag is refused.
pub fn evaluate(model: &RomModel, set: &SnapshotSet, tag: DatasetTag) -> Result<EvaluationReport> {
    if set.channel != model.meta.channel || set.grid.len() != model.basis.n_nodes() {
        return Err(RomError::Data("dataset does not match the model's channel or grid".into()));
    }
    let hash = snapshot_hash(&set.snapshots);
    let t = &model.meta.training;
    if tag == DatasetTag::Test && (hash == t.pod_hash || hash == t.gp_hash) {
        return Err(RomError::Data(
            "test set is identical to the training set (split hash collision)".into(),
        ));
    }
    let scores = evaluate_snapshots(model, &set.snapshots)?;
    Ok(EvaluationReport {
        dataset_tag: tag,
        n_snapshots: set.len(),
        q2_per_mode: scores.q2_per_mode,
        q2_local: scores.q2_local,
        q2_global: scores.q2_global,
        dataset_hash: hash,
        train_hash: t.pod_hash.clone(),
        calibration_hash: t.calibration_hash.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.17e}"))
}

#[derive(Serialize)]
struct Summary<'a> {
    dataset_tag: DatasetTag,
    n_snapshots: usize,
    n_modes: usize,
    q2_global: f64,
    q2_per_mode: &'a [Option<f64>],
    dataset_hash: &'a str,
    train_hash: &'a str,
    calibration_hash: &'a str,
}

impl EvaluationReport {
    /// `mode,q2` rows, undefined values written as `NA`.
    pub fn per_mode_csv(&self) -> String {
        let mut s = String::from("mode,q2\n");
        for (l, q) in self.q2_per_mode.iter().enumerate() {
            let _ = writeln!(s, "{},{}", l + 1, fmt_opt(*q));
        }
        s
    }

    /// Writes `q2_per_mode.csv`, `q2_local.smx` (masked nodes as NaN) and
    /// `summary.json`.
    pub fn write(&self, dir: &Path, nx: usize, nz: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("q2_per_mode.csv"), self.per_mode_csv())?;
        let local: Vec<f64> = self.q2_local.iter().map(|q| q.unwrap_or(f64::NAN)).collect();
        SmxMatrix::new(nx as u32, nz as u32, vec![local])?.save(&dir.join("q2_local.smx"))?;
        let summary = Summary {
            dataset_tag: self.dataset_tag,
            n_snapshots: self.n_snapshots,
            n_modes: self.q2_per_mode.len(),
            q2_global: self.q2_global,
            q2_per_mode: &self.q2_per_mode,
            dataset_hash: &self.dataset_hash,
            train_hash: &self.train_hash,
            calibration_hash: &self.calibration_hash,
        };
        let mut json = serde_json::to_string_pretty(&summary)?;
        json.push('\n');
        fs::write(dir.join("summary.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pod;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fields(n_h: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..n_h).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn per_mode_extremes() {
        let truth = Mat::from_fn(2, 5, |i, j| (i + 1) as f64 * j as f64);
        assert!(q2_per_mode(&truth, &truth).iter().all(|q| *q == Some(1.0)));
        let mean = Mat::from_fn(2, 5, |i, _| (i + 1) as f64 * 2.0);
        assert!(q2_per_mode(&truth, &mean).iter().all(|q| q.unwrap().abs() < 1e-15));
        let flat = Mat::from_fn(1, 4, |_, _| 3.0);
        assert_eq!(q2_per_mode(&flat, &flat), vec![None]);
    }

    #[test]
    fn per_mode_is_one_minus_normalized_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = Mat::from_fn(3, 40, |_, _| rng.random::<f64>());
        let pred = Mat::from_fn(3, 40, |i, j| truth[(i, j)] + 0.1 * rng.random::<f64>());
        let q = q2_per_mode(&truth, &pred);
        for l in 0..3 {
            let row: Vec<f64> = (0..40).map(|j| truth[(l, j)]).collect();
            let m = row.iter().sum::<f64>() / 40.0;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 40.0;
            let mse = (0..40).map(|j| (truth[(l, j)] - pred[(l, j)]).powi(2)).sum::<f64>() / 40.0;
            assert!((q[l].unwrap() - (1.0 - mse / var)).abs() <= 1e-12);
        }
    }

    #[test]
    fn local_and_global() {
        let fields = random_fields(10, 6, 2);
        let refs: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
        assert!(q2_local(&refs, &fields).iter().all(|q| *q == Some(1.0)));
        let bad: Vec<Vec<f64>> = fields.iter().map(|f| f.iter().map(|v| v + 5.0).collect()).collect();
        assert!(q2_local(&refs, &bad).iter().all(|q| q.unwrap() < 0.0));
        let c = vec![Some(0.37); 10];
        let w: Vec<f64> = (0..10).map(|i| i as f64 + 1.0).collect();
        assert!((q2_global(&c, &w) - 0.37).abs() < 1e-15);
        let total: f64 = w.iter().sum();
        assert!((w.iter().map(|v| v / total).sum::<f64>() - 1.0).abs() < 1e-12);
        let mut masked = c.clone();
        masked[3] = None;
        assert!((q2_global(&masked, &w) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn pod_self_reconstruction_matches_cumulative_variance() {
        let fields = random_fields(30, 8, 3);
        let refs: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
        let full = pod::fit(&refs, 7).unwrap();
        let cumulative = pod::cumulative_variance(&full.spectrum);
        for l in 1..=7 {
            let basis = pod::fit(&refs, l).unwrap();
            let rec: Vec<Vec<f64>> = fields
                .iter()
                .map(|f| basis.reconstruct(&basis.project(f).unwrap()).unwrap())
                .collect();
            let q = q2_global(&q2_local(&refs, &rec), &basis.node_variance);
            assert!((q - cumulative[l - 1]).abs() < 1e-8, "{l}: {q} vs {}", cumulative[l - 1]);
        }
    }
}
