//! `label`: one fused pose per measurement record.

use std::path::{Path, PathBuf};

use poseforge_core::formats::{LabelRecord, ProfileFile, SCHEMA_VERSION};
use poseforge_core::fusion::{fuse_pose_label_with, CalibrationProfile, FuseOptions, FusedPoseLabel, Provenance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::{ingest, Record};
use crate::io::{json_lines_bytes, read_json, write_bytes, write_json};

pub const LABELS_FILE: &str = "labels.jsonl";
pub const LABEL_SUMMARY_FILE: &str = "label_summary.json";

#[derive(Debug, Clone)]
pub struct LabelConfig {
    pub measurements: PathBuf,
    pub profile: PathBuf,
    pub out: PathBuf,
    /// Replaces the profile's gate multiplier when set.
    pub reject_multiplier: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub schema_version: u32,
    pub total: usize,
    pub fused: usize,
    pub kuka_only: usize,
    pub vicon_missing: usize,
    pub vicon_rejected: usize,
    pub degenerate_mean: usize,
}

impl LabelSummary {
    pub fn of(labels: &[FusedPoseLabel<f64>], records: &[Record]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            total: labels.len(),
            fused: labels.iter().filter(|l| l.provenance == Provenance::Fused).count(),
            kuka_only: labels.iter().filter(|l| l.provenance == Provenance::KukaOnly).count(),
            vicon_missing: records.iter().filter(|r| r.vicon_measurement().is_none()).count(),
            vicon_rejected: labels.iter().filter(|l| l.rejection.is_some()).count(),
            degenerate_mean: labels.iter().filter(|l| l.degenerate_mean).count(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "labelled {} samples: {} fused, {} KUKA only ({} Vicon rejected, {} Vicon missing, {} degenerate)\n",
            self.total, self.fused, self.kuka_only, self.vicon_rejected, self.vicon_missing, self.degenerate_mean
        )
    }
}

/// Labels records in parallel; output order follows input order.
pub fn label_records(
    profile: &CalibrationProfile<f64>,
    records: &[Record],
    reject_multiplier: Option<f64>,
) -> Vec<FusedPoseLabel<f64>> {
    let opts = FuseOptions {
        gate: true,
        confidence_multiplier: reject_multiplier,
    };
    records
        .par_iter()
        .map(|r| {
            let vicon = r.vicon_measurement();
            fuse_pose_label_with(profile, &r.kuka_measurement(), vicon.as_ref(), &opts)
        })
        .collect()
}

pub fn load_profile(path: &Path) -> Result<CalibrationProfile<f64>> {
    if !path.exists() {
        return Err(CliError::MissingProfile(path.to_path_buf()));
    }
    let file: ProfileFile = read_json(path)?;
    file.to_profile().map_err(|e| CliError::format(path.display().to_string(), e))
}

pub fn cmd_label(config: &LabelConfig) -> Result<(Vec<FusedPoseLabel<f64>>, LabelSummary)> {
    if let Some(m) = config.reject_multiplier {
        if !(m.is_finite() && m > 0.0) {
            return Err(CliError::validation("--reject-multiplier", "must be positive"));
        }
    }
    let profile = load_profile(&config.profile)?;
    if profile.vicon.is_none() {
        log::warn!("profile has no Vicon calibration; every label is KUKA only");
    }
    let records = ingest(&config.measurements)?;
    let labels = label_records(&profile, &records, config.reject_multiplier);
    let summary = LabelSummary::of(&labels, &records);
    let lines: Vec<LabelRecord> = labels.iter().map(LabelRecord::from_label).collect();
    write_bytes(&config.out.join(LABELS_FILE), &json_lines_bytes(&lines))?;
    write_json(&config.out.join(LABEL_SUMMARY_FILE), &summary)?;
    Ok((labels, summary))
}
