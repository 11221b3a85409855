//! On-disk records. All numbers are `f64`; rotations are 9 row-major
//! entries, translations 3 entries in meters.
//!
//! Measurement, label and truth files are line-delimited JSON, one record per
//! line. Camera, board, profile and manifest files are single JSON documents.
//! Every record carries `schema_version`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{BoardSpec, CameraError, CameraModel, Distortion, FeatureObservation};
use crate::fusion::{
    CalibrationProfile, FusedPoseLabel, ProfileMetadata, Provenance, RejectionFlags, RejectionModel, VarianceModel,
    ViconCalibration,
};
use crate::pnp::PnpSample;
use crate::rwhe::{OffsetPair, Source};
use crate::se3::{orthonormality_error, RigidTransform, RotationMatrix};
use crate::SampleId;

pub const SCHEMA_VERSION: u32 = 1;

/// Rotations farther than this from orthonormal are re-projected and flagged.
pub const ORTHONORMALITY_TOL: f64 = 1e-6;
/// Rotations farther than this are rejected outright.
pub const ORTHONORMALITY_LIMIT: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl FormatError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        FormatError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub fn check_schema(found: u32) -> Result<(), FormatError> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(FormatError::SchemaVersion { found })
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Result of decoding a transform: the rigid transform and whether the
/// rotation had to be re-orthonormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub transform: RigidTransform<f64>,
    pub reorthonormalized: bool,
}

impl TransformRecord {
    pub fn from_transform(t: &RigidTransform<f64>) -> Self {
        let m = t.rotation.matrix();
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[3 * r + c] = m[(r, c)];
            }
        }
        Self {
            rotation,
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }

    /// Validates and decodes. `field` names the record field in errors.
    pub fn decode(&self, field: &str) -> Result<Decoded, FormatError> {
        if self.rotation.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(FormatError::invalid(field, "non-finite entry"));
        }
        let m = Matrix3::from_row_slice(&self.rotation);
        let det = m.determinant();
        let err = orthonormality_error(&m);
        if det <= 0.0 {
            return Err(FormatError::invalid(
                field,
                format!("rotation determinant {det:.6} is not positive"),
            ));
        }
        if err > ORTHONORMALITY_LIMIT {
            return Err(FormatError::invalid(
                field,
                format!("rotation orthonormality error {err:.3e} exceeds {ORTHONORMALITY_LIMIT:e}"),
            ));
        }
        let (rotation, reorthonormalized) = if err > ORTHONORMALITY_TOL {
            let r = RotationMatrix::nearest(&m).map_err(|e| FormatError::invalid(field, e.to_string()))?;
            (r, true)
        } else {
            (RotationMatrix::new_unchecked(m), false)
        };
        Ok(Decoded {
            transform: RigidTransform::new(rotation, Vector3::from(self.translation)),
            reorthonormalized,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub camera_id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// `[k1, k2, p1, p2, k3]`.
    pub distortion: [f64; 5],
    pub width: u32,
    pub height: u32,
}

impl CameraFile {
    pub fn from_model(model: &CameraModel<f64>, camera_id: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            camera_id: camera_id.to_string(),
            fx: model.fx,
            fy: model.fy,
            cx: model.cx,
            cy: model.cy,
            distortion: model.distortion.to_array(),
            width: model.width,
            height: model.height,
        }
    }

    pub fn to_model(&self) -> Result<CameraModel<f64>, FormatError> {
        check_schema(self.schema_version)?;
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Distortion::from_array(self.distortion),
            self.width,
            self.height,
        )
        .map_err(|e: CameraError| FormatError::invalid("camera", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub squares_x: u32,
    pub squares_y: u32,
    pub square_size: f64,
    pub board_to_target: TransformRecord,
}

impl BoardFile {
    pub fn from_spec(spec: &BoardSpec<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            squares_x: spec.squares_x,
            squares_y: spec.squares_y,
            square_size: spec.square_size,
            board_to_target: TransformRecord::from_transform(&spec.board_to_target),
        }
    }

    pub fn to_spec(&self) -> Result<BoardSpec<f64>, FormatError> {
        check_schema(self.schema_version)?;
        let t = self.board_to_target.decode("board_to_target")?.transform;
        BoardSpec::new(self.squares_x, self.squares_y, self.square_size, t)
            .map_err(|e| FormatError::invalid("board", e.to_string()))
    }
}

/// A detected corner: board feature id and pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub id: u32,
    pub u: f64,
    pub v: f64,
}

/// One synchronized sample of raw measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub sample_id: SampleId,
    /// `T_{C_K K}`: KUKA base into camera end-effector.
    pub kuka_camera_chain: TransformRecord,
    /// `T_{T_K K}`: KUKA base into target end-effector.
    pub kuka_target_chain: TransformRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vicon_camera_chain: Option<TransformRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vicon_target_chain: Option<TransformRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<Vec<ObservationRecord>>,
}

impl MeasurementRecord {
    pub fn observations_as_sample(&self) -> Option<PnpSample<f64>> {
        self.observations.as_ref().map(|obs| PnpSample {
            sample_id: self.sample_id,
            observations: obs
                .iter()
                .map(|o| FeatureObservation {
                    feature_id: o.id,
                    pixel: Vector2::new(o.u, o.v),
                })
                .collect(),
        })
    }
}

/// Reference camera-from-target pose of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub sample_id: SampleId,
    pub pose: TransformRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetRecord {
    pub target_offset: TransformRecord,
    pub camera_offset: TransformRecord,
    pub residual_rms: f64,
}

impl OffsetRecord {
    pub fn from_offsets(o: &OffsetPair<f64>) -> Self {
        Self {
            target_offset: TransformRecord::from_transform(&o.target_offset),
            camera_offset: TransformRecord::from_transform(&o.camera_offset),
            residual_rms: o.residual_rms,
        }
    }

    pub fn to_offsets(&self, field: &str) -> Result<OffsetPair<f64>, FormatError> {
        Ok(OffsetPair {
            target_offset: self.target_offset.decode(&format!("{field}.target_offset"))?.transform,
            camera_offset: self.camera_offset.decode(&format!("{field}.camera_offset"))?.transform,
            residual_rms: self.residual_rms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub position_var: [f64; 3],
    pub rotation_var: f64,
}

impl VarianceRecord {
    fn from_model(v: &VarianceModel<f64>) -> Self {
        Self {
            position_var: v.position_var.into(),
            rotation_var: v.rotation_var,
        }
    }

    fn to_model(self, source: Source) -> VarianceModel<f64> {
        VarianceModel {
            position_var: self.position_var.into(),
            rotation_var: self.rotation_var,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub position_sigma: [f64; 3],
    pub rotation_sigma: f64,
    pub confidence_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KukaSection {
    pub offsets: OffsetRecord,
    pub variance: VarianceRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViconSection {
    pub offsets: OffsetRecord,
    pub variance: VarianceRecord,
    pub rejection: RejectionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub date: String,
    pub sample_count: usize,
    pub camera_id: String,
    pub kuka: KukaSection,
    /// Absent when calibrated without Vicon data.
    pub vicon: Option<ViconSection>,
}

impl ProfileFile {
    pub fn from_profile(p: &CalibrationProfile<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            date: p.metadata.date.clone(),
            sample_count: p.metadata.sample_count,
            camera_id: p.metadata.camera_id.clone(),
            kuka: KukaSection {
                offsets: OffsetRecord::from_offsets(&p.kuka_offsets),
                variance: VarianceRecord::from_model(&p.kuka_variance),
            },
            vicon: p.vicon.as_ref().map(|v| ViconSection {
                offsets: OffsetRecord::from_offsets(&v.offsets),
                variance: VarianceRecord::from_model(&v.variance),
                rejection: RejectionRecord {
                    position_sigma: v.rejection.position_sigma.into(),
                    rotation_sigma: v.rejection.rotation_sigma,
                    confidence_multiplier: v.rejection.confidence_multiplier,
                },
            }),
        }
    }

    pub fn to_profile(&self) -> Result<CalibrationProfile<f64>, FormatError> {
        check_schema(self.schema_version)?;
        let profile = CalibrationProfile {
            kuka_offsets: self.kuka.offsets.to_offsets("kuka.offsets")?,
            kuka_variance: self.kuka.variance.to_model(Source::Kuka),
            vicon: self
                .vicon
                .as_ref()
                .map(|v| -> Result<_, FormatError> {
                    Ok(ViconCalibration {
                        offsets: v.offsets.to_offsets("vicon.offsets")?,
                        variance: v.variance.to_model(Source::Vicon),
                        rejection: RejectionModel {
                            position_sigma: v.rejection.position_sigma.into(),
                            rotation_sigma: v.rejection.rotation_sigma,
                            confidence_multiplier: v.rejection.confidence_multiplier,
                        },
                    })
                })
                .transpose()?,
            metadata: ProfileMetadata {
                date: self.date.clone(),
                sample_count: self.sample_count,
                camera_id: self.camera_id.clone(),
            },
        };
        if !profile.is_valid() {
            return Err(FormatError::invalid("profile", "variances and sigmas must be positive"));
        }
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub sample_id: SampleId,
    pub pose: TransformRecord,
    pub provenance: String,
    pub fused_position_var: [f64; 3],
    pub fused_rotation_var: f64,
    /// Gate components the Vicon reconstruction violated.
    #[serde(default)]
    pub rejection_flags: Vec<String>,
    #[serde(default)]
    pub vicon_rejected: bool,
    #[serde(default)]
    pub degenerate_mean: bool,
}

impl LabelRecord {
    pub fn from_label(l: &FusedPoseLabel<f64>) -> Self {
        let flags: RejectionFlags = l.rejection.unwrap_or_default();
        Self {
            schema_version: SCHEMA_VERSION,
            sample_id: l.sample_id,
            pose: TransformRecord::from_transform(&l.pose),
            provenance: l.provenance.as_str().to_string(),
            fused_position_var: l.fused_position_var.into(),
            fused_rotation_var: l.fused_rotation_var,
            rejection_flags: flags.names().iter().map(|s| s.to_string()).collect(),
            vicon_rejected: l.rejection.is_some(),
            degenerate_mean: l.degenerate_mean,
        }
    }

    pub fn provenance(&self) -> Result<Provenance, FormatError> {
        self.provenance
            .parse()
            .map_err(|e: String| FormatError::invalid("provenance", e))
    }
}
