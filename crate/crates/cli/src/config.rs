//! Run configuration shared by every subcommand.
//!
//! A [`RunConfig`] is read from JSON (`--config`), patched by command-line
//! flags and written verbatim into the `run.json` manifest of every artifact
//! directory. Feeding that manifest back through `--config` reproduces the
//! artifact.

use std::fs;
use std::path::{Path, PathBuf};

use plumerom::gpr::DEFAULT_RESTARTS;
use plumerom::plume::{Channel, Grid, NoiseConfig, REFERENCE_MC_DRAWS};
use plumerom::rom::{Method, SplitFractions};
use plumerom::sampling::ParameterSpace;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Artifact locations. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            model: PathBuf::from("model"),
            report: PathBuf::from("report"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub space: ParameterSpace,
    pub grid: Grid,
    pub noise: NoiseConfig,
    pub channel: Channel,
    pub n_snapshots: usize,
    pub reference_mc_draws: usize,
    /// Number of retained modes `L`.
    pub n_modes: usize,
    pub method: Method,
    pub n_restarts: usize,
    pub split: SplitFractions,
    pub seed: u64,
    /// Training sizes for the robustness sweep.
    pub sizes: Vec<usize>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            space: ParameterSpace::default(),
            grid: Grid::default(),
            noise: NoiseConfig::default(),
            channel: Channel::MeanConcentration,
            n_snapshots: 750,
            reference_mc_draws: REFERENCE_MC_DRAWS,
            n_modes: 60,
            method: Method::Map,
            n_restarts: DEFAULT_RESTARTS,
            split: SplitFractions::default(),
            seed: 0,
            sizes: vec![50, 100, 472],
            paths: Paths::default(),
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: RunConfig,
    /// Command-specific inputs not covered by the config (e.g. the
    /// prediction point).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub arguments: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool_version: plumerom::TOOL_VERSION.to_string(),
            command: command.to_string(),
            config: config.clone(),
            arguments: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(self).map_err(plumerom::RomError::from)?;
        json.push('\n');
        fs::write(dir.join("run.json"), json).map_err(plumerom::RomError::from)?;
        Ok(())
    }
}

/// Reads a bare [`RunConfig`] or a `run.json` manifest.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config = match value.get("config") {
        Some(inner) if value.get("tool_version").is_some() => inner.clone(),
        _ => value,
    };
    serde_json::from_value(config).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Parses `NXxNZ`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NXxNZ, got '{s}'"))?;
    let nx = a.trim().parse().map_err(|_| format!("bad nx in '{s}'"))?;
    let nz = b.trim().parse().map_err(|_| format!("bad nz in '{s}'"))?;
    Ok((nx, nz))
}

/// Parses exactly four comma-separated numbers.
pub fn parse_point(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number '{t}'")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 values, got {}", v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_point_parsing() {
        assert_eq!(parse_grid("41x21"), Ok((41, 21)));
        assert!(parse_grid("41").is_err());
        assert_eq!(parse_point("5.78, 2.79e-2,-1.01,0.830"), Ok([5.78, 0.0279, -1.01, 0.83]));
        assert!(parse_point("1,2,3").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"n_snapshots": 20, "method": "mll"}"#).unwrap();
        assert_eq!(c.n_snapshots, 20);
        assert_eq!(c.method, Method::Mll);
        assert_eq!(c.grid, Grid::default());
    }

    #[test]
    fn manifest_round_trips_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.seed = 9;
        RunManifest::new("generate", &c).write(dir.path()).unwrap();
        assert_eq!(load_config(&dir.path().join("run.json")).unwrap(), c);
    }
}
