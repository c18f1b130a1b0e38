//! Model directory layout.
//!
//! - `model.json`: [`ModelMeta`](super::ModelMeta), pretty-printed.
//! - `basis.smx`: columns `[mean, ψ_1, …, ψ_L, node variance]`.
//! - `gps.bin`: magic `GPB1`, `u32` mode count, `u32` training size, `u32`
//!   input dimension, the training inputs row by row, then per mode a 32-byte
//!   SHA-256 of its hyperparameters followed by targets and weights `α`, all
//!   little-endian `f64`.
//!
//! On load each GP is refactorized from its inputs, targets and
//! hyperparameters; the stored checksum and weights must agree.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use faer::Mat;

use super::{theta_checksum, ModelMeta, RomModel};
use crate::error::{Result, RomError};
use crate::gpr::{GpModel, Point, TrainingInputs};
use crate::pod::{ReducedBasis, MASK_RELATIVE};
use crate::sampling::PARAM_DIM;
use crate::smx::SmxMatrix;

const GP_MAGIC: &[u8; 4] = b"GPB1";

fn hex_to_bytes(s: &str) -> Option<Vec<u8>> {
    (0..s.len())
        .step_by(2)
        .map(|i| s.get(i..i + 2).and_then(|b| u8::from_str_radix(b, 16).ok()))
        .collect()
}

pub fn save_model(model: &RomModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&model.meta)?;
    json.push('\n');
    fs::write(dir.join("model.json"), json)?;

    let b = &model.basis;
    let mut columns = vec![b.mean_field.clone()];
    for l in 0..b.n_modes() {
        let col = b.modes.col(l);
        columns.push((0..b.n_nodes()).map(|i| col[i]).collect());
    }
    columns.push(b.node_variance.clone());
    let grid = &model.meta.grid;
    SmxMatrix::new(grid.nx as u32, grid.nz as u32, columns)?.save(&dir.join("basis.smx"))?;

    let mut w = BufWriter::new(File::create(dir.join("gps.bin"))?);
    let inputs = model.gps.first().map_or(&[][..], |g| g.inputs());
    w.write_all(GP_MAGIC)?;
    for v in [model.gps.len(), inputs.len(), PARAM_DIM] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for p in inputs {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for gp in &model.gps {
        let sum = hex_to_bytes(&theta_checksum(gp.theta())).expect("hex checksum");
        w.write_all(&sum)?;
        for v in gp.targets().iter().chain(gp.alpha()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn format_err(path: &Path, reason: impl Into<String>) -> RomError {
    RomError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_f64s<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated payload"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn load_model(dir: &Path) -> Result<RomModel> {
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    let n_modes = meta.modes.len();

    let basis_path = dir.join("basis.smx");
    let smx = SmxMatrix::load(&basis_path)?;
    if smx.nx as usize != meta.grid.nx || smx.nz as usize != meta.grid.nz || smx.columns.len() != n_modes + 2 {
        return Err(format_err(&basis_path, "basis shape disagrees with model.json"));
    }
    let mut columns = smx.columns;
    let node_variance = columns.pop().expect("node variance column");
    let mean_field = columns.remove(0);
    let n_h = mean_field.len();
    let max_var = node_variance.iter().cloned().fold(0.0, f64::max);
    let basis = ReducedBasis {
        mean_field,
        modes: Mat::from_fn(n_h, n_modes, |i, j| columns[j][i]),
        eigenvalues: meta.eigenvalues.clone(),
        spectrum: meta.spectrum.clone(),
        total_variance: meta.total_variance,
        n_train: meta.training.n_pod,
        mask: node_variance
            .iter()
            .map(|v| max_var > 0.0 && *v >= MASK_RELATIVE * max_var)
            .collect(),
        node_variance,
    };

    let gp_path = dir.join("gps.bin");
    let mut r = BufReader::new(File::open(&gp_path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| format_err(&gp_path, "truncated header"))?;
    if &head[..4] != GP_MAGIC {
        return Err(format_err(&gp_path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (count, n, dim) = (word(1), word(2), word(3));
    if count != n_modes || dim != PARAM_DIM || n != meta.training.n_gp {
        return Err(format_err(&gp_path, "GP header disagrees with model.json"));
    }
    let flat = read_f64s(&mut r, n * PARAM_DIM, &gp_path)?;
    let points: Vec<Point> = flat
        .chunks_exact(PARAM_DIM)
        .map(|c| c.try_into().expect("point"))
        .collect();
    let inputs = TrainingInputs::new(points);
    let mut gps = Vec::with_capacity(count);
    for record in &meta.modes {
        let mut sum = [0u8; 32];
        r.read_exact(&mut sum).map_err(|_| format_err(&gp_path, "truncated payload"))?;
        let expected = theta_checksum(&record.theta);
        if hex_to_bytes(&expected).as_deref() != Some(&sum[..]) || record.theta_checksum != expected {
            return Err(format_err(
                &gp_path,
                format!("hyperparameter checksum mismatch for mode {}", record.mode),
            ));
        }
        let targets = read_f64s(&mut r, n, &gp_path)?;
        let alpha = read_f64s(&mut r, n, &gp_path)?;
        let gp = GpModel::fit(&inputs, &targets, record.theta)?;
        let scale = alpha.iter().fold(1.0f64, |m, a| m.max(a.abs()));
        if gp.alpha().iter().zip(&alpha).any(|(a, b)| (a - b).abs() > 1e-10 * scale) {
            return Err(format_err(
                &gp_path,
                format!("refactorized weights disagree for mode {}", record.mode),
            ));
        }
        gps.push(gp);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(format_err(&gp_path, "trailing bytes after payload"));
    }
    Ok(RomModel { meta, basis, gps })
}
