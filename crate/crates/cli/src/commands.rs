//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plumerom::plume::{self, DatasetOptions, SnapshotSet};
use plumerom::rom::{
    self, curves_csv, summary_csv, truncation_csv, DatasetTag, Method, RobustnessConfig,
    TrainConfig,
};
use plumerom::sampling::{ParameterSample, PhysicalParams};
use plumerom::smx::SmxMatrix;
use plumerom::RomError;
use serde_json::json;

use crate::config::{RunConfig, RunManifest};
use crate::{CliError, EvaluateArgs, GenerateArgs, PredictArgs, RobustnessArgs, SplitArg, TrainArgs};

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<(), CliError> {
    if !force {
        if let Ok(mut entries) = fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
        }
    }
    fs::create_dir_all(dir).map_err(RomError::from)?;
    Ok(())
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Ok(s.parse::<Method>()?)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(RomError::from)?;
    Ok(())
}

fn or_default(out: Option<PathBuf>, base: &Path, name: &str) -> PathBuf {
    out.unwrap_or_else(|| base.join(name))
}

pub fn generate(mut config: RunConfig, args: GenerateArgs, force: bool) -> Result<(), CliError> {
    if let Some(n) = args.n {
        config.n_snapshots = n;
    }
    if let Some((nx, nz)) = args.grid {
        config.grid.nx = nx;
        config.grid.nz = nz;
    }
    if let Some(c) = &args.channel {
        config.channel = c.parse()?;
    }
    if let Some(out) = args.out {
        config.paths.dataset = out;
    }
    let dir = config.paths.dataset.clone();
    prepare_output(&dir, force)?;
    let start = Instant::now();
    let set = plume::generate_dataset_with(
        &config.space,
        config.n_snapshots,
        &config.grid,
        config.channel,
        config.seed,
        &DatasetOptions {
            noise: config.noise,
            reference_mc_draws: config.reference_mc_draws,
            start_index: 1,
        },
    )?;
    set.save(&dir)?;
    RunManifest::new("generate", &config).write(&dir)?;
    println!(
        "generated {} snapshots (+{} half-window) of {} on {}x{} in {:.2} s -> {}",
        set.len(),
        set.half_window.as_ref().map_or(0, |h| h.len()),
        set.channel.name(),
        set.grid.nx,
        set.grid.nz,
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

/// Per-mode hyperparameter and optimizer table.
pub fn theta_table(model: &rom::RomModel) -> String {
    let mut s = String::from(
        "mode,noise_var,signal_var,len_u_zc,len_z0,len_x_src,len_z_src,iterations,evaluations,objective\n",
    );
    for m in &model.meta.modes {
        let t = &m.theta;
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{:.6e}",
            m.mode,
            t.noise_var,
            t.signal_var,
            t.lengthscales[0],
            t.lengthscales[1],
            t.lengthscales[2],
            t.lengthscales[3],
            m.diagnostics.total_iterations(),
            m.diagnostics.total_evaluations(),
            m.diagnostics.best_value(),
        );
    }
    s
}

pub fn train(mut config: RunConfig, args: TrainArgs, force: bool) -> Result<(), CliError> {
    if let Some(d) = args.dataset {
        config.paths.dataset = d;
    }
    if let Some(l) = args.n_modes {
        config.n_modes = l;
    }
    if let Some(m) = &args.method {
        config.method = parse_method(m)?;
    }
    if let Some(r) = args.restarts {
        config.n_restarts = r;
    }
    if let Some(out) = args.out {
        config.paths.model = out;
    }
    let data = SnapshotSet::load(&config.paths.dataset)?;
    let split = rom::split(&data, &config.split)?;
    let dir = config.paths.model.clone();
    prepare_output(&dir, force)?;
    let mut train_config = TrainConfig::new(config.n_modes, config.method, config.seed);
    train_config.n_restarts = config.n_restarts;
    let start = Instant::now();
    let model = rom::train_split(&split, &train_config)?;
    let elapsed = start.elapsed().as_secs_f64();
    rom::save_model(&model, &dir)?;
    RunManifest::new("train", &config).write(&dir)?;
    print!("{}", theta_table(&model));
    println!(
        "method {} | modes {} | optimizer iterations {} | training time {:.2} s | train Q2 {:.6}",
        model.method().name(),
        model.n_modes(),
        model.total_iterations(),
        elapsed,
        model.meta.training_scores.q2_global
    );
    println!("model -> {}", dir.display());
    Ok(())
}

fn coefficient_csv(mean: &[f64], var: &[f64]) -> String {
    let mut s = String::from("mode,mean,variance\n");
    for (l, (m, v)) in mean.iter().zip(var).enumerate() {
        let _ = writeln!(s, "{},{:.17e},{:.17e}", l + 1, m, v);
    }
    s
}

pub fn predict(mut config: RunConfig, args: PredictArgs, force: bool) -> Result<(), CliError> {
    if let Some(m) = args.model {
        config.paths.model = m;
    }
    let model = rom::load_model(&config.paths.model)?;
    let space = model.meta.space;
    let (sample, arguments): (ParameterSample, _) = match (args.mu, args.unit) {
        (Some(mu), None) => (
            space.sample_from_physical(PhysicalParams::from_array(mu))?,
            json!({ "mu": mu }),
        ),
        (None, Some(unit)) => {
            let mapped = space.to_physical(unit)?;
            if mapped.rejected {
                return Err(RomError::Domain(format!(
                    "unit point {unit:?} maps into the obstacle exclusion box"
                ))
                .into());
            }
            (mapped.sample, json!({ "unit": unit }))
        }
        _ => return Err(CliError::Config("exactly one of --mu or --unit is required".into())),
    };
    let prediction = model.predict(&sample)?;
    let dir = or_default(args.out, &config.paths.report, "predict");
    prepare_output(&dir, force)?;
    let grid = model.meta.grid;
    SmxMatrix::new(grid.nx as u32, grid.nz as u32, vec![prediction.field.clone()])?
        .save(&dir.join("field.smx"))?;
    write_file(
        &dir.join("coefficients.csv"),
        &coefficient_csv(&prediction.coeff_mean, &prediction.coeff_var),
    )?;
    let mut manifest = RunManifest::new("predict", &config);
    manifest.arguments = arguments;
    manifest.write(&dir)?;
    let p = sample.physical;
    println!(
        "predicted {} at u_zc={} z0={} x_src={} z_src={} with {} modes -> {}",
        model.meta.channel.name(),
        p.u_zc,
        p.z0,
        p.x_src,
        p.z_src,
        model.n_modes(),
        dir.display()
    );
    Ok(())
}

pub fn evaluate(mut config: RunConfig, args: EvaluateArgs, force: bool) -> Result<(), CliError> {
    if let Some(m) = args.model {
        config.paths.model = m;
    }
    if let Some(d) = args.dataset {
        config.paths.dataset = d;
    }
    let model = rom::load_model(&config.paths.model)?;
    let data = SnapshotSet::load(&config.paths.dataset)?;
    let fractions = model.meta.split.as_ref().map_or(config.split, |s| s.fractions);
    let split = rom::split(&data, &fractions)?;
    let (set, tag) = match args.split {
        SplitArg::Test => (&split.test, DatasetTag::Test),
        SplitArg::Train => (&split.train, DatasetTag::Train),
    };
    let report = rom::evaluate(&model, set, tag)?;
    let dir = or_default(args.out, &config.paths.report, &format!("evaluate_{}", tag.name()));
    prepare_output(&dir, force)?;
    report.write(&dir, model.meta.grid.nx, model.meta.grid.nz)?;
    let mut manifest = RunManifest::new("evaluate", &config);
    manifest.arguments = json!({ "split": tag.name() });
    manifest.write(&dir)?;
    println!(
        "{} split: {} snapshots, {} modes, global Q2 {:.6} -> {}",
        tag.name(),
        report.n_snapshots,
        report.q2_per_mode.len(),
        report.q2_global,
        dir.display()
    );
    Ok(())
}

pub fn robustness(mut config: RunConfig, args: RobustnessArgs, force: bool) -> Result<(), CliError> {
    if let Some(d) = args.dataset {
        config.paths.dataset = d;
    }
    if let Some(sizes) = args.sizes {
        config.sizes = sizes;
    }
    if let Some(m) = &args.method {
        config.method = parse_method(m)?;
    }
    if let Some(r) = args.restarts {
        config.n_restarts = r;
    }
    let data = SnapshotSet::load(&config.paths.dataset)?;
    let split = rom::split(&data, &config.split)?;
    let dir = or_default(args.out, &config.paths.report, "robustness");
    prepare_output(&dir, force)?;
    let mut sweep = RobustnessConfig::new(config.sizes.clone(), config.method, config.seed);
    sweep.n_restarts = config.n_restarts;
    let rows = rom::robustness_sweep(&split.train, &split.calibration, &split.test, &sweep)?;
    write_file(&dir.join("robustness.csv"), &summary_csv(&rows))?;
    write_file(&dir.join("robustness_curves.csv"), &curves_csv(&rows))?;
    write_file(&dir.join("robustness_truncation.csv"), &truncation_csv(&rows))?;
    RunManifest::new("robustness", &config).write(&dir)?;
    for r in &rows {
        println!(
            "size {:>4}: L_opt {:>3}, Q2 {:.4}, crossing {}, {:.1} s",
            r.size,
            r.l_opt,
            r.q2_opt,
            r.crossing_index.map_or_else(|| "none".to_string(), |c| c.to_string()),
            r.runtime_seconds
        );
    }
    println!("robustness -> {}", dir.display());
    Ok(())
}
