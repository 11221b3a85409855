//! `calibrate`: PnP reference poses, per-source offsets, variances and the
//! Vicon rejection gate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use poseforge_core::camera::{BoardSpec, CameraModel};
use poseforge_core::formats::{BoardFile, CameraFile, ProfileFile, SCHEMA_VERSION};
use poseforge_core::fusion::{
    fit_rejection_model, fuse_poses, sample_variances, CalibrationProfile, ProfileMetadata, VarianceModel,
    ViconCalibration, DEFAULT_CONFIDENCE_MULTIPLIER,
};
use poseforge_core::metrics::{mean, pose_errors, std_dev};
use poseforge_core::pnp::{solve_pnp_with, PnpOptions, PnpSample};
use poseforge_core::rwhe::{reconstruct_pose, solve_rwhe_with, RwheOptions, Source, SourceMeasurement, MIN_SAMPLES};
use poseforge_core::se3::RigidTransform;
use poseforge_core::SampleId;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::{ingest, Record};
use crate::io::{profile_date, read_json, write_json};

pub const PROFILE_FILE: &str = "profile.json";
pub const SUMMARY_FILE: &str = "calibration_summary.json";
pub const REFINED_CAMERA_FILE: &str = "camera_refined.json";

#[derive(Debug, Clone)]
pub struct CalibrateConfig {
    pub measurements: PathBuf,
    pub camera: PathBuf,
    pub board: PathBuf,
    /// Defaults to `<out>/profile.json`.
    pub profile: Option<PathBuf>,
    pub out: PathBuf,
    pub refine_intrinsics: bool,
    pub reject_multiplier: f64,
    /// RWHE restart seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrateOptions {
    pub refine_intrinsics: bool,
    pub reject_multiplier: f64,
    pub seed: Option<u64>,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self {
            refine_intrinsics: false,
            reject_multiplier: DEFAULT_CONFIDENCE_MULTIPLIER,
            seed: None,
        }
    }
}

/// Mean and sample standard deviation; `std` is `None` below two samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            mean: mean(values)?,
            std: std_dev(values),
        })
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            mean: self.mean * k,
            std: self.std.map(|s| s * k),
        }
    }

    pub fn display(&self, precision: usize) -> String {
        match self.std {
            Some(s) => format!("{:.p$} ± {:.p$}", self.mean, s, p = precision),
            None => format!("{:.p$} ± n/a", self.mean, p = precision),
        }
    }
}

/// One row of the calibration table, against the PnP reference poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub samples: usize,
    pub e_t_mm: Stat,
    pub e_r_deg: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFit {
    pub residual_rms: f64,
    pub iterations: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub schema_version: u32,
    pub sample_count: usize,
    pub reference_samples: usize,
    /// Mean per-sample RMS reprojection error of the reference poses, px.
    pub reprojection_error_px: f64,
    pub kuka_fit: SourceFit,
    pub vicon_fit: Option<SourceFit>,
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl CalibrationSummary {
    pub fn row(&self, source: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.source == source)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "calibration: {} samples, {} with reference poses, reprojection {:.4} px",
            self.sample_count, self.reference_samples, self.reprojection_error_px
        );
        let _ = writeln!(s, "{:<8}{:>6}  {:>22}  {:>22}", "source", "N", "E_T [mm]", "E_R [deg]");
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{:<8}{:>6}  {:>22}  {:>22}",
                row.source,
                row.samples,
                row.e_t_mm.display(3),
                row.e_r_deg.display(3)
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub profile: CalibrationProfile<f64>,
    pub summary: CalibrationSummary,
    /// PnP camera-from-target poses.
    pub reference: BTreeMap<SampleId, RigidTransform<f64>>,
    pub refined_camera: Option<CameraModel<f64>>,
}

fn row(source: &str, truth: &BTreeMap<SampleId, RigidTransform<f64>>, est: &BTreeMap<SampleId, RigidTransform<f64>>) -> Result<SummaryRow> {
    let (e, t): (Vec<_>, Vec<_>) = est.iter().filter_map(|(id, p)| Some((*p, *truth.get(id)?))).unzip();
    let errs = pose_errors(&e, &t).map_err(CliError::metrics)?;
    let e_t = Stat::of(&errs.translation).expect("non-empty");
    let e_r = Stat::of(&errs.rotation).expect("non-empty");
    Ok(SummaryRow {
        source: source.to_string(),
        samples: e.len(),
        e_t_mm: e_t.scaled(1e3),
        e_r_deg: e_r.scaled(180.0 / std::f64::consts::PI),
    })
}

fn reconstruct_all(
    offsets: &poseforge_core::rwhe::OffsetPair<f64>,
    meas: &[SourceMeasurement<f64>],
) -> BTreeMap<SampleId, RigidTransform<f64>> {
    meas.iter().map(|m| (m.sample_id, reconstruct_pose(offsets, m))).collect()
}

/// Runs the whole calibration in memory.
pub fn calibrate_records(
    camera: &CameraModel<f64>,
    board: &BoardSpec<f64>,
    camera_id: &str,
    records: &[Record],
    opts: &CalibrateOptions,
) -> Result<CalibrationOutcome> {
    if !(opts.reject_multiplier.is_finite() && opts.reject_multiplier > 0.0) {
        return Err(CliError::validation("--reject-multiplier", "must be positive"));
    }
    let mut warnings = Vec::new();
    let samples: Vec<PnpSample<f64>> = records.iter().filter_map(|r| r.observations.clone()).collect();
    if samples.is_empty() {
        return Err(CliError::validation("calibrate", "no record carries board observations"));
    }
    if samples.len() < records.len() {
        warnings.push(format!(
            "{} records without board observations are not used for calibration",
            records.len() - samples.len()
        ));
    }

    let pnp = solve_pnp_with(
        camera,
        board,
        &samples,
        &PnpOptions {
            refine_intrinsics: opts.refine_intrinsics,
            ..PnpOptions::default()
        },
    )
    .map_err(CliError::pnp)?;
    let reference = pnp.poses.clone();
    let rms: Vec<f64> = pnp.rms_per_sample.values().copied().collect();
    let reprojection_error_px = mean(&rms).unwrap_or(0.0);
    log::info!("pnp: {} poses, mean rms {:.4} px", reference.len(), reprojection_error_px);

    let mut rwhe_opts = RwheOptions::default();
    if let Some(seed) = opts.seed {
        rwhe_opts.restart_seed = seed;
    }
    let used: Vec<&Record> = records.iter().filter(|r| reference.contains_key(&r.sample_id)).collect();

    let kuka_meas: Vec<_> = used.iter().map(|r| r.kuka_measurement()).collect();
    let kuka = solve_rwhe_with(&reference, &kuka_meas, None, &rwhe_opts).map_err(|e| CliError::rwhe("KUKA", e))?;
    let kuka_recon = reconstruct_all(&kuka.offsets, &kuka_meas);
    let kuka_variance = sample_variances(&reference, &kuka_recon, Source::Kuka)
        .map_err(|e| CliError::fusion("KUKA variance", e))?
        .floored();
    let kuka_fit = SourceFit {
        residual_rms: kuka.offsets.residual_rms,
        iterations: kuka.report.iterations,
        restarts: kuka.restarts,
    };
    let mut rows = vec![row("KUKA", &reference, &kuka_recon)?];

    let vicon_meas: Vec<_> = used.iter().filter_map(|r| r.vicon_measurement()).collect();
    let mut vicon = None;
    let mut vicon_fit = None;
    if vicon_meas.len() < MIN_SAMPLES {
        let msg = if vicon_meas.is_empty() {
            "no Vicon chains in the calibration data; fusion disabled".to_string()
        } else {
            format!("only {} Vicon samples; fusion disabled", vicon_meas.len())
        };
        log::warn!("{msg}");
        warnings.push(msg);
    } else {
        let sol =
            solve_rwhe_with(&reference, &vicon_meas, None, &rwhe_opts).map_err(|e| CliError::rwhe("VICON", e))?;
        let vicon_recon = reconstruct_all(&sol.offsets, &vicon_meas);
        let variance = sample_variances(&reference, &vicon_recon, Source::Vicon)
            .map_err(|e| CliError::fusion("VICON variance", e))?
            .floored();
        let rejection = fit_rejection_model(&kuka_recon, &vicon_recon, opts.reject_multiplier)
            .map_err(|e| CliError::fusion("rejection model", e))?;
        rows.push(row("VICON", &reference, &vicon_recon)?);
        let fused = fuse_all(&kuka_recon, &vicon_recon, &kuka_variance, &variance)?;
        rows.push(row("FUSED", &reference, &fused)?);
        vicon_fit = Some(SourceFit {
            residual_rms: sol.offsets.residual_rms,
            iterations: sol.report.iterations,
            restarts: sol.restarts,
        });
        vicon = Some(ViconCalibration {
            offsets: sol.offsets,
            variance,
            rejection,
        });
    }

    let profile = CalibrationProfile {
        kuka_offsets: kuka.offsets,
        kuka_variance,
        vicon,
        metadata: ProfileMetadata {
            date: profile_date(),
            sample_count: used.len(),
            camera_id: camera_id.to_string(),
        },
    };
    let summary = CalibrationSummary {
        schema_version: SCHEMA_VERSION,
        sample_count: records.len(),
        reference_samples: used.len(),
        reprojection_error_px,
        kuka_fit,
        vicon_fit,
        rows,
        warnings,
    };
    Ok(CalibrationOutcome {
        profile,
        summary,
        reference,
        refined_camera: pnp.refined_camera,
    })
}

/// Ungated fusion of every sample both sources reconstructed.
fn fuse_all(
    kuka: &BTreeMap<SampleId, RigidTransform<f64>>,
    vicon: &BTreeMap<SampleId, RigidTransform<f64>>,
    var_k: &VarianceModel<f64>,
    var_v: &VarianceModel<f64>,
) -> Result<BTreeMap<SampleId, RigidTransform<f64>>> {
    vicon
        .iter()
        .filter_map(|(id, pv)| Some((*id, kuka.get(id)?, pv)))
        .map(|(id, pk, pv)| {
            fuse_poses(pk, pv, var_k, var_v)
                .map(|(pose, _, _)| (id, pose))
                .map_err(|e| CliError::fusion(&format!("sample {id}"), e))
        })
        .collect()
}

pub fn load_camera(path: &Path) -> Result<(CameraModel<f64>, String)> {
    let file: CameraFile = read_json(path)?;
    let model = file.to_model().map_err(|e| CliError::format(path.display().to_string(), e))?;
    Ok((model, file.camera_id))
}

pub fn load_board(path: &Path) -> Result<BoardSpec<f64>> {
    let file: BoardFile = read_json(path)?;
    file.to_spec().map_err(|e| CliError::format(path.display().to_string(), e))
}

pub fn cmd_calibrate(config: &CalibrateConfig) -> Result<CalibrationOutcome> {
    let (camera, camera_id) = load_camera(&config.camera)?;
    let board = load_board(&config.board)?;
    let records = ingest(&config.measurements)?;
    let outcome = calibrate_records(
        &camera,
        &board,
        &camera_id,
        &records,
        &CalibrateOptions {
            refine_intrinsics: config.refine_intrinsics,
            reject_multiplier: config.reject_multiplier,
            seed: config.seed,
        },
    )?;
    let profile_path = config.profile.clone().unwrap_or_else(|| config.out.join(PROFILE_FILE));
    write_json(&profile_path, &ProfileFile::from_profile(&outcome.profile))?;
    write_json(&config.out.join(SUMMARY_FILE), &outcome.summary)?;
    if let Some(refined) = &outcome.refined_camera {
        write_json(&config.out.join(REFINED_CAMERA_FILE), &CameraFile::from_model(refined, &camera_id))?;
    }
    log::info!("profile written to {}", profile_path.display());
    Ok(outcome)
}
