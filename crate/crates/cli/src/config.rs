//! Run configuration files. Unknown keys are rejected everywhere; relative
//! paths inside a file resolve against that file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use fractalqos::control::CalibrationGrid;
use fractalqos::engine::MethodMode;
use fractalqos::{AttackSpec, CalibrationTable, DetectorConfig, NetworkGraph, QosClass, ScenarioConfig, TraceSpec};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub trace: TraceSpec,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    #[serde(default)]
    pub detector: DetectorConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub classes: Vec<QosClass>,
    #[serde(default)]
    pub grid: CalibrationGrid,
}

fn default_seed_count() -> usize {
    20
}

fn default_modes() -> Vec<MethodMode> {
    MethodMode::ALL.to_vec()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Scenario file used as the template for every row.
    pub scenario: PathBuf,
    pub loads: Vec<f64>,
    #[serde(default = "default_seed_count")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<MethodMode>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A scenario with its topology loaded and, when available, its calibration table.
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    pub graph: NetworkGraph,
    pub table: Option<CalibrationTable>,
}

pub fn load_scenario(path: &Path, modes: &[MethodMode]) -> Result<LoadedScenario, CliError> {
    let config: ScenarioConfig = read_json(path)?;
    config.validate()?;
    if config.topology.is_empty() {
        return Err(CliError::Config(format!("{}: missing topology", path.display())));
    }
    let topo_path = resolve(path, Path::new(&config.topology));
    let text = fs::read_to_string(&topo_path)
        .map_err(|e| CliError::Config(format!("cannot read topology {}: {e}", topo_path.display())))?;
    let graph = NetworkGraph::from_json(&text)?;

    let needs_table = modes.iter().any(|m| m.controls_capacity());
    let table = match &config.calibration {
        Some(c) => {
            let calib_path = resolve(path, Path::new(c));
            if calib_path.exists() {
                let text = fs::read_to_string(&calib_path)?;
                Some(CalibrationTable::from_json(&text)?)
            } else if needs_table {
                return Err(CliError::Config(format!(
                    "calibration table {} not found; create it with `fractalqos calibrate`",
                    calib_path.display()
                )));
            } else {
                log::warn!("calibration table {} not found; admission runs without it", calib_path.display());
                None
            }
        }
        None if needs_table => return Err(fractalqos::Error::CalibrationMissing.into()),
        None => None,
    };
    Ok(LoadedScenario { config, graph, table })
}

pub fn resolve_sweep_scenario(sweep_path: &Path, sweep: &SweepConfig) -> PathBuf {
    resolve(sweep_path, &sweep.scenario)
}
