//! `simulate`: writes a synthetic dataset.

use std::path::PathBuf;

use poseforge_testbed::{default_paper_scenario, generate, trajectory_scenario, ScenarioFile, SimOutput, SimScenario};

use crate::error::{CliError, Result};
use crate::io::read_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 64 board-facing samples with corner observations.
    Calibration,
    /// 111 free-orientation samples without observations.
    Trajectory,
}

impl Preset {
    pub fn scenario(self) -> SimScenario {
        match self {
            Preset::Calibration => default_paper_scenario(),
            Preset::Trajectory => trajectory_scenario(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub out: PathBuf,
    pub preset: Preset,
    /// Scenario JSON; takes precedence over `preset`.
    pub scenario: Option<PathBuf>,
    pub seed: Option<u64>,
    pub noiseless: bool,
    /// Overrides the Vicon dropout rate.
    pub vicon_dropout: Option<f64>,
}

pub fn resolve_scenario(config: &SimulateConfig) -> Result<SimScenario> {
    let mut scenario = match &config.scenario {
        Some(path) => {
            let file: ScenarioFile = read_json(path)?;
            file.to_scenario()
                .map_err(|e| CliError::validation(path.display().to_string(), e))?
        }
        None => config.preset.scenario(),
    };
    if let Some(seed) = config.seed {
        scenario = scenario.with_seed(seed);
    }
    if config.noiseless {
        scenario = scenario.noiseless();
    }
    if let Some(rate) = config.vicon_dropout {
        scenario.vicon_noise.dropout_rate = rate;
    }
    scenario
        .validate()
        .map_err(|e| CliError::validation("scenario", e))?;
    Ok(scenario)
}

pub fn cmd_simulate(config: &SimulateConfig) -> Result<SimOutput> {
    let scenario = resolve_scenario(config)?;
    let output = generate(&scenario);
    output
        .write_to(&config.out)
        .map_err(|e| CliError::io(&config.out, e))?;
    log::info!(
        "{} samples ({} Vicon dropouts, {} outliers) written to {}",
        output.samples.len(),
        output.manifest.vicon_dropouts,
        output.manifest.vicon_outliers,
        config.out.display()
    );
    Ok(output)
}
