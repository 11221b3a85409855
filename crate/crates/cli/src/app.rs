//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use poseforge_core::fusion::DEFAULT_CONFIDENCE_MULTIPLIER;

use crate::calibrate::{cmd_calibrate, CalibrateConfig};
use crate::error::Result;
use crate::label::{cmd_label, LabelConfig};
use crate::report::{cmd_report, ReportConfig};
use crate::simulate::{cmd_simulate, Preset, SimulateConfig};

/// Overrides `--log-level`.
pub const LOG_ENV: &str = "POSEFORGE_LOG";

#[derive(Debug, Parser)]
#[command(name = "poseforge", version, about = "Pose labels from robot and motion-capture chains")]
pub struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Simulate(SimulateArgs),
    /// Estimate offsets, variances and the rejection gate.
    Calibrate(CalibrateArgs),
    /// Fuse every measurement record into a pose label.
    Label(LabelArgs),
    /// Compare labels with reference poses.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "calibration")]
    pub preset: Preset,
    /// Scenario JSON; replaces the preset.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Zero every noise, outlier and dropout rate.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub vicon_dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub measurements: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub board: PathBuf,
    /// Where to write the profile. Default `<out>/profile.json`.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub refine_intrinsics: bool,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE_MULTIPLIER)]
    pub reject_multiplier: f64,
    /// Seed of the RWHE restarts.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub measurements: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the multiplier stored in the profile.
    #[arg(long)]
    pub reject_multiplier: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires_all = ["camera", "board"])]
    pub measurements: Option<PathBuf>,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long)]
    pub board: Option<PathBuf>,
}

/// `POSEFORGE_LOG` wins over the flag.
pub fn log_filter(flag: &str) -> String {
    std::env::var(LOG_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| flag.to_string())
}

pub fn init_logging(flag: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(&log_filter(flag))
        .format_timestamp(None)
        .try_init();
}

/// Runs one subcommand, printing its console summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let out = cmd_simulate(&SimulateConfig {
                out: a.out,
                preset: a.preset,
                scenario: a.scenario,
                seed: a.seed,
                noiseless: a.noiseless,
                vicon_dropout: a.vicon_dropout,
            })?;
            println!(
                "simulated {} samples ({}, seed {})",
                out.samples.len(),
                out.manifest.scenario,
                out.manifest.seed
            );
        }
        Command::Calibrate(a) => {
            let outcome = cmd_calibrate(&CalibrateConfig {
                measurements: a.measurements,
                camera: a.camera,
                board: a.board,
                profile: a.profile,
                out: a.out,
                refine_intrinsics: a.refine_intrinsics,
                reject_multiplier: a.reject_multiplier,
                seed: a.seed,
            })?;
            print!("{}", outcome.summary.render());
        }
        Command::Label(a) => {
            let (_, summary) = cmd_label(&LabelConfig {
                measurements: a.measurements,
                profile: a.profile,
                out: a.out,
                reject_multiplier: a.reject_multiplier,
            })?;
            print!("{}", summary.render());
        }
        Command::Report(a) => {
            let summary = cmd_report(&ReportConfig {
                labels: a.labels,
                truth: a.truth,
                out: a.out,
                measurements: a.measurements,
                camera: a.camera,
                board: a.board,
            })?;
            print!("{}", summary.render());
        }
    }
    Ok(())
}
