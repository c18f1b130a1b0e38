//! Snapshot POD with whitening.
//!
//! Snapshots `K_n` (columns) are centered on the ensemble mean and scaled by
//! `1/sqrt(N-1)`, giving `S` with `S·Sᵀ` equal to the unbiased snapshot
//! covariance. Modes and eigenvalues come from a thin SVD of `S` (the
//! `N_h × N_h` covariance is never formed): `ψ_l = u_l`, `σ_l = s_l²`.
//!
//! Reduced coefficients are whitened, `k_l = ψ_lᵀ(K - Ê[K]) / sqrt(σ_l)`, so
//! that on the training ensemble every coefficient has zero mean and unit
//! unbiased variance. Reconstruction inverts this exactly on the span of the
//! retained modes.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RomError};

/// Node variance below `MASK_RELATIVE · max` is treated as zero.
pub const MASK_RELATIVE: f64 = 1e-14;

/// SVD route used by [`fit_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdBackend {
    /// Thin SVD of the full scaled snapshot matrix.
    Thin,
    /// Randomized range finder with power iterations.
    Randomized {
        oversampling: usize,
        power_iterations: usize,
        seed: u64,
    },
    /// Thin for `N ≤ 1000`, randomized (seed 0) above.
    Auto,
}

impl Default for SvdBackend {
    fn default() -> Self {
        SvdBackend::Auto
    }
}

/// Copies field columns into an `N_h × N` matrix.
pub fn snapshot_matrix(fields: &[&[f64]]) -> Result<Mat<f64>> {
    let n_h = fields.first().map_or(0, |f| f.len());
    if fields.iter().any(|f| f.len() != n_h) {
        return Err(RomError::Data("snapshots have different lengths".into()));
    }
    Ok(Mat::from_fn(n_h, fields.len(), |i, j| fields[j][i]))
}

/// Centers the snapshots and scales by `1/sqrt(N-1)`.
pub fn center_scale(fields: &[&[f64]]) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = fields.len();
    if n < 2 {
        return Err(RomError::Data(format!(
            "degenerate ensemble: {n} snapshot(s), need at least 2"
        )));
    }
    let s = snapshot_matrix(fields)?;
    let n_h = s.nrows();
    let mut mean = vec![0.0; n_h];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let scaled = Mat::from_fn(n_h, n, |i, j| (s[(i, j)] - mean[i]) * scale);
    Ok((mean, scaled))
}

/// Inverse of [`center_scale`].
pub fn uncenter_unscale(mean: &[f64], scaled: &Mat<f64>) -> Vec<Vec<f64>> {
    let factor = ((scaled.ncols() - 1) as f64).sqrt();
    (0..scaled.ncols())
        .map(|j| {
            mean.iter()
                .enumerate()
                .map(|(i, m)| m + factor * scaled[(i, j)])
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    pub mean_field: Vec<f64>,
    /// `N_h × L`, orthonormal columns.
    pub modes: Mat<f64>,
    /// Retained eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Every eigenvalue the SVD produced (at least the retained ones).
    pub spectrum: Vec<f64>,
    /// Sum of all covariance eigenvalues, `‖S‖_F²`.
    pub total_variance: f64,
    pub n_train: usize,
    /// Unbiased per-node variance over the training snapshots.
    pub node_variance: Vec<f64>,
    /// Nodes whose variance is non-negligible.
    pub mask: Vec<bool>,
}

pub fn fit(fields: &[&[f64]], n_modes: usize) -> Result<ReducedBasis> {
    fit_with(fields, n_modes, SvdBackend::Auto)
}

pub fn fit_with(fields: &[&[f64]], n_modes: usize, backend: SvdBackend) -> Result<ReducedBasis> {
    let (mean_field, scaled) = center_scale(fields)?;
    let (n_h, n) = (scaled.nrows(), scaled.ncols());
    let max_modes = n_h.min(n - 1);
    if n_modes == 0 || n_modes > max_modes {
        return Err(invalid(format!(
            "number of modes {n_modes} outside [1, {max_modes}]"
        )));
    }
    let backend = match backend {
        SvdBackend::Auto if n > 1000 => SvdBackend::Randomized {
            oversampling: 10,
            power_iterations: 2,
            seed: 0,
        },
        SvdBackend::Auto => SvdBackend::Thin,
        other => other,
    };
    let (mut u, singular) = match backend {
        SvdBackend::Randomized {
            oversampling,
            power_iterations,
            seed,
        } => randomized_svd(&scaled, n_modes, oversampling, power_iterations, seed)?,
        _ => thin_svd(&scaled)?,
    };
    let spectrum: Vec<f64> = singular.iter().map(|s| s * s).collect();
    for j in 0..n_modes {
        canonicalize_sign(&mut u, j);
    }
    let modes = u.subcols(0, n_modes).to_owned();

    let node_variance: Vec<f64> = (0..n_h)
        .map(|i| (0..n).map(|j| scaled[(i, j)].powi(2)).sum())
        .collect();
    let total_variance: f64 = node_variance.iter().sum();
    let max_var = node_variance.iter().cloned().fold(0.0, f64::max);
    let mask = node_variance
        .iter()
        .map(|v| max_var > 0.0 && *v >= MASK_RELATIVE * max_var)
        .collect();
    Ok(ReducedBasis {
        mean_field,
        modes,
        eigenvalues: spectrum[..n_modes].to_vec(),
        spectrum,
        total_variance,
        n_train: n,
        node_variance,
        mask,
    })
}

fn thin_svd(a: &Mat<f64>) -> Result<(Mat<f64>, Vec<f64>)> {
    let svd = a
        .thin_svd()
        .map_err(|e| RomError::Numerical(format!("SVD failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let singular: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
    Ok((svd.U().to_owned(), singular))
}

/// Randomized range finder followed by an exact SVD of the projected matrix.
fn randomized_svd(
    a: &Mat<f64>,
    rank: usize,
    oversampling: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<(Mat<f64>, Vec<f64>)> {
    let (m, n) = (a.nrows(), a.ncols());
    let k = (rank + oversampling).min(n).min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Mat::from_fn(n, k, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let orth = |y: Mat<f64>| -> Mat<f64> { y.qr().compute_thin_Q() };
    let mut q = orth(a * &omega);
    for _ in 0..power_iterations {
        let z = orth(a.transpose() * &q);
        q = orth(a * &z);
    }
    let b = q.transpose() * a;
    let (ub, singular) = thin_svd(&b)?;
    Ok((&q * &ub, singular))
}

/// Flips column `j` so its largest-magnitude entry is positive.
fn canonicalize_sign(u: &mut Mat<f64>, j: usize) {
    let mut best = 0;
    for i in 0..u.nrows() {
        if u[(i, j)].abs() > u[(best, j)].abs() {
            best = i;
        }
    }
    if u[(best, j)] < 0.0 {
        for i in 0..u.nrows() {
            u[(i, j)] = -u[(i, j)];
        }
    }
}

impl ReducedBasis {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.mean_field.len()
    }

    fn check_field(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.n_nodes() {
            return Err(RomError::Data(format!(
                "field has {} nodes, basis has {}",
                field.len(),
                self.n_nodes()
            )));
        }
        Ok(())
    }

    /// Whitened reduced coefficients of one field.
    pub fn project(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.check_field(field)?;
        let centered: Vec<f64> = field.iter().zip(&self.mean_field).map(|(f, m)| f - m).collect();
        Ok((0..self.n_modes())
            .map(|l| {
                let col = self.modes.col(l);
                let dot: f64 = centered.iter().enumerate().map(|(i, c)| c * col[i]).sum();
                whiten(dot, self.eigenvalues[l])
            })
            .collect())
    }

    /// Coefficients of many fields as an `L × N` matrix.
    pub fn project_many(&self, fields: &[&[f64]]) -> Result<Mat<f64>> {
        for f in fields {
            self.check_field(f)?;
        }
        let centered = Mat::from_fn(self.n_nodes(), fields.len(), |i, j| fields[j][i] - self.mean_field[i]);
        let mut k = self.modes.transpose() * &centered;
        for l in 0..self.n_modes() {
            for j in 0..fields.len() {
                k[(l, j)] = whiten(k[(l, j)], self.eigenvalues[l]);
            }
        }
        Ok(k)
    }

    /// Field from whitened coefficients, `Ê[K] + Σ sqrt(σ_l)·k_l·ψ_l`.
    pub fn reconstruct(&self, k: &[f64]) -> Result<Vec<f64>> {
        if k.len() > self.n_modes() {
            return Err(RomError::Data(format!(
                "{} coefficients for a basis of {} modes",
                k.len(),
                self.n_modes()
            )));
        }
        let mut field = self.mean_field.clone();
        for (l, kl) in k.iter().enumerate() {
            let w = self.eigenvalues[l].sqrt() * kl;
            let col = self.modes.col(l);
            for (i, f) in field.iter_mut().enumerate() {
                *f += w * col[i];
            }
        }
        Ok(field)
    }

    /// Fraction of the total ensemble variance carried by the first `l` modes.
    pub fn explained_variance(&self, l: usize) -> f64 {
        self.spectrum.iter().take(l).sum::<f64>() / self.total_variance
    }

    /// Correlation between mode `l` (1-based) and every node; `None` on
    /// masked nodes.
    pub fn correlation_map(&self, l: usize) -> Result<Vec<Option<f64>>> {
        if l == 0 || l > self.n_modes() {
            return Err(invalid(format!("mode {l} outside [1, {}]", self.n_modes())));
        }
        let sigma = self.eigenvalues[l - 1];
        let col = self.modes.col(l - 1);
        (0..self.n_nodes())
            .map(|j| {
                if !self.mask[j] {
                    return Ok(None);
                }
                let c = (sigma / self.node_variance[j]).sqrt() * col[j];
                let excess = c.abs() - 1.0;
                if excess > 1e-6 {
                    return Err(RomError::Numerical(format!(
                        "correlation {c} at node {j} exceeds 1"
                    )));
                }
                Ok(Some(c.clamp(-1.0, 1.0)))
            })
            .collect()
    }
}

fn whiten(dot: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        dot / sigma.sqrt()
    } else {
        0.0
    }
}

/// Cumulative explained variance `Q²(L)` for `L = 1..=len`.
pub fn cumulative_variance(spectrum: &[f64]) -> Vec<f64> {
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    spectrum
        .iter()
        .map(|s| {
            acc += s;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Largest `L` with `σ_L ≥ fraction · mean(σ)`.
pub fn kaiser_rule(eigenvalues: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0) {
        return Err(invalid("Kaiser fraction must be positive"));
    }
    if eigenvalues.is_empty() {
        return Ok(0);
    }
    let threshold = fraction * eigenvalues.iter().sum::<f64>() / eigenvalues.len() as f64;
    Ok(eigenvalues
        .iter()
        .rposition(|s| *s >= threshold)
        .map_or(0, |p| p + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elbow {
    pub n_modes: usize,
    /// `false` when the second difference never changes sign.
    pub found: bool,
}

/// Elbow from the discrete second difference `D_L = σ_L − 2σ_{L+1} + σ_{L+2}`:
/// the smallest `L ≥ 2` whose `D_L` has the opposite sign of `D_{L−1}`
/// (zero counts as its own sign). Without a sign change the full length is
/// returned with `found = false`.
pub fn elbow_rule(eigenvalues: &[f64]) -> Result<Elbow> {
    if eigenvalues.len() < 3 {
        return Err(invalid("elbow rule needs at least three eigenvalues"));
    }
    let d: Vec<f64> = eigenvalues
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .collect();
    for l in 1..d.len() {
        if d[l].signum() != d[l - 1].signum() || (d[l] == 0.0) != (d[l - 1] == 0.0) {
            return Ok(Elbow {
                n_modes: l + 1,
                found: true,
            });
        }
    }
    Ok(Elbow {
        n_modes: eigenvalues.len(),
        found: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::Rng;

    fn random_fields(n_h: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..n_h).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect()
    }

    fn refs(f: &[Vec<f64>]) -> Vec<&[f64]> {
        f.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn center_scale_properties() {
        let same = vec![vec![1.0, 2.0, 3.0]; 2];
        let (_, s) = center_scale(&refs(&same)).unwrap();
        assert!((0..3).all(|i| (0..2).all(|j| s[(i, j)] == 0.0)));
        assert!(center_scale(&refs(&same[..1])).is_err());

        let fields = random_fields(12, 5, 1);
        let (mean, s) = center_scale(&refs(&fields)).unwrap();
        for i in 0..12 {
            let row: f64 = (0..5).map(|j| s[(i, j)]).sum();
            assert!(row.abs() < 1e-10);
        }
        let back = uncenter_unscale(&mean, &s);
        for (a, b) in back.iter().flatten().zip(fields.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rank_one_ensemble() {
        let pattern: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fields: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let a: f64 = rng.random();
                pattern.iter().map(|p| 2.0 + a * p).collect()
            })
            .collect();
        let basis = fit(&refs(&fields), 3).unwrap();
        assert!(basis.eigenvalues[1] / basis.eigenvalues[0] <= 1e-10);
        let corr = basis.correlation_map(1).unwrap();
        for (c, v) in corr.iter().zip(&basis.node_variance) {
            match c {
                Some(c) => assert!((c.abs() - 1.0).abs() < 1e-8),
                None => assert!(*v < 1e-20),
            }
        }
    }

    #[test]
    fn matches_dense_eigendecomposition() {
        let fields = random_fields(30, 8, 2);
        let basis = fit(&refs(&fields), 7).unwrap();
        let (_, s) = center_scale(&refs(&fields)).unwrap();
        let dense = DMatrix::from_fn(30, 8, |i, j| s[(i, j)]);
        let eig = SymmetricEigen::new(&dense * dense.transpose());
        let mut order: Vec<usize> = (0..30).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        for l in 0..7 {
            let lam = eig.eigenvalues[order[l]];
            assert!((basis.eigenvalues[l] - lam).abs() <= 1e-8 * lam.max(1.0));
            let v = eig.eigenvectors.column(order[l]);
            let dot: f64 = (0..30).map(|i| v[i] * basis.modes[(i, l)]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-8);
        }
        // ψᵀψ = I
        let g = basis.modes.transpose() * &basis.modes;
        for i in 0..7 {
            for j in 0..7 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn refit_is_bitwise_identical_and_sign_canonical() {
        let fields = random_fields(50, 10, 3);
        let a = fit(&refs(&fields), 5).unwrap();
        let b = fit(&refs(&fields), 5).unwrap();
        assert_eq!(a, b);
        for l in 0..5 {
            let col: Vec<f64> = (0..50).map(|i| a.modes[(i, l)]).collect();
            let big = col.iter().cloned().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
            assert!(big > 0.0);
        }
    }

    #[test]
    fn full_rank_reconstruction() {
        let fields = random_fields(25, 9, 5);
        let basis = fit(&refs(&fields), 8).unwrap();
        assert!((basis.explained_variance(8) - 1.0).abs() < 1e-10);
        for f in &fields {
            let k = basis.project(f).unwrap();
            let r = basis.reconstruct(&k).unwrap();
            let err: f64 = r.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm <= 1e-8);
        }
        assert!(fit(&refs(&fields), 9).is_err());
        assert!(fit(&refs(&fields), 0).is_err());
    }

    #[test]
    fn projection_identities() {
        let fields = random_fields(40, 12, 6);
        let basis = fit(&refs(&fields), 6).unwrap();
        assert!(basis.project(&basis.mean_field).unwrap().iter().all(|k| k.abs() < 1e-10));
        assert_eq!(basis.reconstruct(&[]).unwrap(), basis.mean_field);
        let k = vec![0.3, -1.2, 0.5, 2.0, -0.1, 0.7];
        let back = basis.project(&basis.reconstruct(&k).unwrap()).unwrap();
        for (a, b) in k.iter().zip(&back) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(basis.project(&[0.0; 3]).is_err());
        assert!(basis.reconstruct(&[0.0; 7]).is_err());

        let coeffs = basis.project_many(&refs(&fields)).unwrap();
        for l in 0..6 {
            let row: Vec<f64> = (0..12).map(|j| coeffs[(l, j)]).collect();
            let m = row.iter().sum::<f64>() / 12.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 11.0;
            assert!(m.abs() <= 1e-8 && (v - 1.0).abs() <= 1e-6, "{m} {v}");
            let single = basis.project(&fields[3]).unwrap();
            assert!((single[l] - coeffs[(l, 3)]).abs() < 1e-10);
        }
    }

    #[test]
    fn truncation_error_matches_tail_spectrum() {
        let fields = random_fields(35, 10, 7);
        let full = fit(&refs(&fields), 9).unwrap();
        for l in [1usize, 3, 6] {
            let basis = fit(&refs(&fields), l).unwrap();
            let mut sse = 0.0;
            let mut sst = 0.0;
            for f in &fields {
                let r = basis.reconstruct(&basis.project(f).unwrap()).unwrap();
                sse += r.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                sst += f.iter().zip(&basis.mean_field).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            let q2 = cumulative_variance(&full.spectrum)[l - 1];
            assert!((sse / sst - (1.0 - q2)).abs() < 1e-8);
        }
    }

    #[test]
    fn correlation_squares_sum_to_one() {
        let fields = random_fields(20, 25, 8);
        let basis = fit(&refs(&fields), 20).unwrap();
        let maps: Vec<Vec<Option<f64>>> = (1..=20).map(|l| basis.correlation_map(l).unwrap()).collect();
        for j in 0..20 {
            let s: f64 = maps.iter().map(|m| m[j].unwrap().powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-8, "{s}");
        }
        assert!(basis.correlation_map(0).is_err());
        assert!(basis.correlation_map(21).is_err());
    }

    #[test]
    fn randomized_backend_agrees_on_leading_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fields: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let a: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
                (0..200)
                    .map(|i| {
                        let x = i as f64 / 200.0;
                        10.0 * a[0] * (3.0 * x).sin() + 3.0 * a[1] * (7.0 * x).cos() + a[2] * (13.0 * x).sin()
                            + 0.01 * a[3] * (x * 50.0).cos()
                    })
                    .collect()
            })
            .collect();
        let exact = fit_with(&refs(&fields), 3, SvdBackend::Thin).unwrap();
        let rand = fit_with(
            &refs(&fields),
            3,
            SvdBackend::Randomized {
                oversampling: 10,
                power_iterations: 2,
                seed: 1,
            },
        )
        .unwrap();
        for l in 0..3 {
            assert!((exact.eigenvalues[l] - rand.eigenvalues[l]).abs() < 1e-8 * exact.eigenvalues[0]);
        }
        assert!((exact.total_variance - rand.total_variance).abs() < 1e-10 * exact.total_variance);
    }

    #[test]
    fn cumulative_variance_shapes() {
        assert_eq!(cumulative_variance(&[2.0, 2.0, 2.0, 2.0]), vec![0.25, 0.5, 0.75, 1.0]);
        let q = cumulative_variance(&[5.0, 3.0, 1.0, 0.5, 0.01]);
        assert!(q.windows(2).all(|w| w[1] >= w[0]));
        assert!((q[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kaiser_examples() {
        assert_eq!(kaiser_rule(&[4.0, 2.0, 1.0, 1.0], 0.7).unwrap(), 2);
        assert_eq!(kaiser_rule(&[3.0; 6], 0.7).unwrap(), 6);
        assert!(kaiser_rule(&[1.0], 0.0).is_err());
    }

    #[test]
    fn elbow_examples() {
        let geometric: Vec<f64> = (1..=12).map(|l| 0.5f64.powi(l)).collect();
        assert_eq!(
            elbow_rule(&geometric).unwrap(),
            Elbow {
                n_modes: 12,
                found: false
            }
        );
        // D = (89, 0.5, 0.4, -7.3): first sign flip at D_4
        let e = elbow_rule(&[100.0, 10.0, 9.0, 8.5, 8.4, 1.0]).unwrap();
        assert_eq!(e, Elbow { n_modes: 4, found: true });
        // D = (89, 1, -0.1): flip at D_3
        let e = elbow_rule(&[100.0, 10.0, 9.0, 9.0, 8.9]).unwrap();
        assert_eq!(e, Elbow { n_modes: 3, found: true });
        assert!(elbow_rule(&[1.0, 0.5]).is_err());
    }
}
