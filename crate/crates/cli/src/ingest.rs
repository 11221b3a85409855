//! Measurement file loading and validation.

use std::collections::BTreeSet;
use std::path::Path;

use poseforge_core::formats::{check_schema, MeasurementRecord, TransformRecord};
use poseforge_core::pnp::PnpSample;
use poseforge_core::rwhe::{Source, SourceMeasurement};
use poseforge_core::se3::RigidTransform;
use poseforge_core::SampleId;

use crate::error::{CliError, Result};
use crate::io::read_json_lines;

/// A validated measurement record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sample_id: SampleId,
    /// `T_{C_K K}`.
    pub kuka_camera_chain: RigidTransform<f64>,
    /// `T_{T_K K}`.
    pub kuka_target_chain: RigidTransform<f64>,
    pub vicon_camera_chain: Option<RigidTransform<f64>>,
    pub vicon_target_chain: Option<RigidTransform<f64>>,
    pub observations: Option<PnpSample<f64>>,
    /// Fields whose rotation was projected back onto SO(3).
    pub reorthonormalized: Vec<&'static str>,
}

impl Record {
    /// `T_{T_K C_K} = T_{C_K K}⁻¹ T_{T_K K}`.
    pub fn kuka_measurement(&self) -> SourceMeasurement<f64> {
        SourceMeasurement {
            sample_id: self.sample_id,
            target_chain: self.kuka_camera_chain.inverse().compose(&self.kuka_target_chain),
            source: Source::Kuka,
        }
    }

    pub fn vicon_measurement(&self) -> Option<SourceMeasurement<f64>> {
        let (cam, target) = (self.vicon_camera_chain?, self.vicon_target_chain?);
        Some(SourceMeasurement {
            sample_id: self.sample_id,
            target_chain: cam.inverse().compose(&target),
            source: Source::Vicon,
        })
    }
}

fn decode(
    path: &Path,
    line: usize,
    field: &'static str,
    rec: &TransformRecord,
    flagged: &mut Vec<&'static str>,
) -> Result<RigidTransform<f64>> {
    let d = rec
        .decode(field)
        .map_err(|e| CliError::validation(format!("{}:{line}", path.display()), e))?;
    if d.reorthonormalized {
        flagged.push(field);
    }
    Ok(d.transform)
}

pub fn validate_record(path: &Path, line: usize, raw: &MeasurementRecord) -> Result<Record> {
    let ctx = || format!("{}:{line}", path.display());
    check_schema(raw.schema_version).map_err(|e| CliError::validation(ctx(), e))?;
    let mut flagged = Vec::new();
    let kuka_camera_chain = decode(path, line, "kuka_camera_chain", &raw.kuka_camera_chain, &mut flagged)?;
    let kuka_target_chain = decode(path, line, "kuka_target_chain", &raw.kuka_target_chain, &mut flagged)?;
    let (vicon_camera_chain, vicon_target_chain) = match (&raw.vicon_camera_chain, &raw.vicon_target_chain) {
        (Some(c), Some(t)) => (
            Some(decode(path, line, "vicon_camera_chain", c, &mut flagged)?),
            Some(decode(path, line, "vicon_target_chain", t, &mut flagged)?),
        ),
        (None, None) => (None, None),
        _ => {
            return Err(CliError::validation(
                ctx(),
                "vicon_camera_chain and vicon_target_chain must be given together",
            ))
        }
    };
    if let Some(obs) = &raw.observations {
        if obs.iter().any(|o| !(o.u.is_finite() && o.v.is_finite())) {
            return Err(CliError::validation(ctx(), "observations: non-finite pixel coordinate"));
        }
    }
    if !flagged.is_empty() {
        log::warn!(
            "{}: sample {} re-orthonormalized {}",
            ctx(),
            raw.sample_id,
            flagged.join(", ")
        );
    }
    Ok(Record {
        sample_id: raw.sample_id,
        kuka_camera_chain,
        kuka_target_chain,
        vicon_camera_chain,
        vicon_target_chain,
        observations: raw.observations_as_sample(),
        reorthonormalized: flagged,
    })
}

/// Reads a line-delimited measurement file. Blank lines are ignored.
pub fn ingest(path: &Path) -> Result<Vec<Record>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, raw) in read_json_lines::<MeasurementRecord>(path)? {
        let rec = validate_record(path, line, &raw)?;
        if !seen.insert(rec.sample_id) {
            return Err(CliError::validation(
                format!("{}:{line}", path.display()),
                format!("sample_id {} appears more than once", rec.sample_id),
            ));
        }
        out.push(rec);
    }
    log::info!("{}: {} records", path.display(), out.len());
    Ok(out)
}
