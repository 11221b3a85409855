//! Scenario description and presets.

use nalgebra::Vector3;
use poseforge_core::camera::{BoardSpec, CameraModel, Distortion};
use poseforge_core::formats::{
    check_schema, BoardFile, CameraFile, FormatError, OffsetRecord, TransformRecord, SCHEMA_VERSION,
};
use poseforge_core::rwhe::OffsetPair;
use poseforge_core::se3::{RigidTransform, RotationVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Perturbation model of one measurement source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// RMS angle of the isotropic rotation-vector perturbation, rad. Each
    /// component has std `rot_noise_sigma / sqrt(3)`.
    pub rot_noise_sigma: f64,
    /// Per-axis std of the translation perturbation, m.
    pub trans_noise_sigma: f64,
    /// Probability that a sample's noise is scaled by `outlier_scale`.
    pub outlier_rate: f64,
    pub outlier_scale: f64,
    /// Probability that the source reports nothing for a sample. Only
    /// meaningful for Vicon.
    pub dropout_rate: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            rot_noise_sigma: 0.0,
            trans_noise_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_scale: 10.0,
            dropout_rate: 0.0,
        }
    }

    pub fn gaussian(rot_noise_sigma: f64, trans_noise_sigma: f64) -> Self {
        Self {
            rot_noise_sigma,
            trans_noise_sigma,
            ..Self::none()
        }
    }

    fn validate(&self, what: &str) -> Result<(), String> {
        let sigmas = [self.rot_noise_sigma, self.trans_noise_sigma, self.outlier_scale];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(format!("{what}: sigmas and outlier scale must be finite and non-negative"));
        }
        for (name, rate) in [("outlier_rate", self.outlier_rate), ("dropout_rate", self.dropout_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(format!("{what}: {name} {rate} is not in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Distribution of reference camera-from-target poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseSampler {
    /// Camera looks at the board from `[min_range, max_range]` meters with
    /// the boresight within `max_tilt_deg` of the board normal, random roll,
    /// and the aim point jittered by up to `aim_jitter` meters in the board
    /// plane. Every corner stays inside the image.
    BoardFacing {
        min_range: f64,
        max_range: f64,
        max_tilt_deg: f64,
        aim_jitter: f64,
    },
    /// Target orientation uniform over all rotations; target origin at
    /// `[min_range, max_range]` meters within `max_off_axis_deg` of the
    /// boresight.
    FullOrientation {
        min_range: f64,
        max_range: f64,
        max_off_axis_deg: f64,
    },
}

impl PoseSampler {
    fn validate(&self) -> Result<(), String> {
        let (lo, hi, angle) = match *self {
            PoseSampler::BoardFacing {
                min_range,
                max_range,
                max_tilt_deg,
                aim_jitter,
            } => {
                if !(aim_jitter >= 0.0) {
                    return Err("aim_jitter must be non-negative".into());
                }
                (min_range, max_range, max_tilt_deg)
            }
            PoseSampler::FullOrientation {
                min_range,
                max_range,
                max_off_axis_deg,
            } => (min_range, max_range, max_off_axis_deg),
        };
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(format!("range [{lo}, {hi}] must be positive and ordered"));
        }
        if !(0.0..90.0).contains(&angle) {
            return Err(format!("cone angle {angle} deg must be in [0, 90)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub name: String,
    pub camera_id: String,
    pub true_kuka_offsets: OffsetPair<f64>,
    pub true_vicon_offsets: OffsetPair<f64>,
    /// `T_{W K}`: world frame into the KUKA base frame.
    pub kuka_frame: RigidTransform<f64>,
    /// `T_{W V}`: world frame into the Vicon frame.
    pub vicon_frame: RigidTransform<f64>,
    pub camera: CameraModel<f64>,
    pub board: BoardSpec<f64>,
    pub pose_sampler: PoseSampler,
    pub kuka_noise: NoiseSpec,
    pub vicon_noise: NoiseSpec,
    /// Per-coordinate std of corner detections, px.
    pub pixel_noise_sigma: f64,
    /// Emit board observations (calibration runs).
    pub emit_observations: bool,
    pub sample_count: usize,
    pub rng_seed: u64,
}

fn transform(r: [f64; 3], t: [f64; 3]) -> RigidTransform<f64> {
    RigidTransform::from_parameters(&RotationVector::new(r[0], r[1], r[2]), Vector3::from(t))
}

/// Synthetic 1920x1200 camera used by the presets.
pub fn synthetic_camera() -> CameraModel<f64> {
    CameraModel::new(
        1600.0,
        1602.0,
        958.0,
        603.0,
        Distortion::from_array([-0.06, 0.04, 0.0004, -0.0002, 0.0]),
        1920,
        1200,
    )
    .expect("valid preset camera")
}

/// 11x11 squares of 30 mm, mounted on the target with a small offset.
pub fn preset_board() -> BoardSpec<f64> {
    BoardSpec::new(11, 11, 0.03, transform([0.0, 0.0, 0.05], [-0.16, -0.17, 0.02])).expect("valid preset board")
}

// Noise levels that put single-source reconstruction errors of the
// calibration preset near 2.4 mm / 0.64 deg (KUKA) and 1.2 mm / 0.17 deg
// (Vicon). Synthetic values, not hardware characterizations.
pub const KUKA_ROT_SIGMA: f64 = 1.204e-2;
pub const KUKA_TRANS_SIGMA: f64 = 8.0e-4;
pub const VICON_ROT_SIGMA: f64 = 3.256e-3;
pub const VICON_TRANS_SIGMA: f64 = 7.2e-4;
pub const PIXEL_SIGMA: f64 = 0.2;

/// Calibration run: 64 board-facing samples at about 0.75 m, tilt up to 45°.
pub fn default_paper_scenario() -> SimScenario {
    SimScenario {
        name: "calibration".into(),
        camera_id: "synthetic-1920x1200".into(),
        true_kuka_offsets: OffsetPair {
            target_offset: transform([1.1, 0.35, -0.2], [0.04, 0.09, 0.21]),
            camera_offset: transform([0.05, -1.45, 0.12], [0.02, -0.05, 0.11]),
            residual_rms: 0.0,
        },
        true_vicon_offsets: OffsetPair {
            target_offset: transform([-0.4, 2.2, 0.6], [-0.03, 0.12, 0.08]),
            camera_offset: transform([0.9, 0.3, -1.8], [0.06, 0.015, -0.04]),
            residual_rms: 0.0,
        },
        kuka_frame: transform([0.0, 0.0, 0.3], [-1.2, 0.4, 0.0]),
        vicon_frame: transform([0.02, -0.01, -1.1], [2.5, -1.0, -0.3]),
        camera: synthetic_camera(),
        board: preset_board(),
        pose_sampler: PoseSampler::BoardFacing {
            min_range: 0.7,
            max_range: 0.8,
            max_tilt_deg: 45.0,
            aim_jitter: 0.03,
        },
        kuka_noise: NoiseSpec::gaussian(KUKA_ROT_SIGMA, KUKA_TRANS_SIGMA),
        vicon_noise: NoiseSpec::gaussian(VICON_ROT_SIGMA, VICON_TRANS_SIGMA),
        pixel_noise_sigma: PIXEL_SIGMA,
        emit_observations: true,
        sample_count: 64,
        rng_seed: 1,
    }
}

/// Labeling run: 111 poses over the full orientation space out to 9.5 m,
/// with Vicon occlusions and occasional gross Vicon errors.
pub fn trajectory_scenario() -> SimScenario {
    let mut vicon_noise = NoiseSpec::gaussian(VICON_ROT_SIGMA, VICON_TRANS_SIGMA);
    vicon_noise.outlier_rate = 0.05;
    vicon_noise.dropout_rate = 0.05;
    SimScenario {
        name: "trajectory".into(),
        pose_sampler: PoseSampler::FullOrientation {
            min_range: 0.75,
            max_range: 9.5,
            max_off_axis_deg: 10.0,
        },
        vicon_noise,
        emit_observations: false,
        sample_count: 111,
        rng_seed: 2,
        ..default_paper_scenario()
    }
}

impl SimScenario {
    pub fn with_seed(self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self }
    }

    pub fn noiseless(self) -> Self {
        Self {
            kuka_noise: NoiseSpec::none(),
            vicon_noise: NoiseSpec::none(),
            pixel_noise_sigma: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sample_count == 0 {
            return Err("sample_count must be at least 1".into());
        }
        self.kuka_noise.validate("kuka_noise")?;
        self.vicon_noise.validate("vicon_noise")?;
        if self.kuka_noise.dropout_rate != 0.0 {
            return Err("kuka_noise: dropout is only modeled for Vicon".into());
        }
        if !(self.pixel_noise_sigma.is_finite() && self.pixel_noise_sigma >= 0.0) {
            return Err("pixel_noise_sigma must be finite and non-negative".into());
        }
        self.pose_sampler.validate()?;
        self.camera.validate().map_err(|e| e.to_string())?;
        self.board.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            camera_id: self.camera_id.clone(),
            true_kuka_offsets: OffsetRecord::from_offsets(&self.true_kuka_offsets),
            true_vicon_offsets: OffsetRecord::from_offsets(&self.true_vicon_offsets),
            kuka_frame: TransformRecord::from_transform(&self.kuka_frame),
            vicon_frame: TransformRecord::from_transform(&self.vicon_frame),
            camera: CameraFile::from_model(&self.camera, &self.camera_id),
            board: BoardFile::from_spec(&self.board),
            pose_sampler: self.pose_sampler,
            kuka_noise: self.kuka_noise,
            vicon_noise: self.vicon_noise,
            pixel_noise_sigma: self.pixel_noise_sigma,
            emit_observations: self.emit_observations,
            sample_count: self.sample_count,
            rng_seed: self.rng_seed,
        }
    }

    /// Hex SHA-256 of the scenario's canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// JSON form of [`SimScenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    pub camera_id: String,
    pub true_kuka_offsets: OffsetRecord,
    pub true_vicon_offsets: OffsetRecord,
    pub kuka_frame: TransformRecord,
    pub vicon_frame: TransformRecord,
    pub camera: CameraFile,
    pub board: BoardFile,
    pub pose_sampler: PoseSampler,
    pub kuka_noise: NoiseSpec,
    pub vicon_noise: NoiseSpec,
    pub pixel_noise_sigma: f64,
    pub emit_observations: bool,
    pub sample_count: usize,
    pub rng_seed: u64,
}

impl ScenarioFile {
    pub fn to_scenario(&self) -> Result<SimScenario, FormatError> {
        check_schema(self.schema_version)?;
        let scenario = SimScenario {
            name: self.name.clone(),
            camera_id: self.camera_id.clone(),
            true_kuka_offsets: self.true_kuka_offsets.to_offsets("true_kuka_offsets")?,
            true_vicon_offsets: self.true_vicon_offsets.to_offsets("true_vicon_offsets")?,
            kuka_frame: self.kuka_frame.decode("kuka_frame")?.transform,
            vicon_frame: self.vicon_frame.decode("vicon_frame")?.transform,
            camera: self.camera.to_model()?,
            board: self.board.to_spec()?,
            pose_sampler: self.pose_sampler,
            kuka_noise: self.kuka_noise,
            vicon_noise: self.vicon_noise,
            pixel_noise_sigma: self.pixel_noise_sigma,
            emit_observations: self.emit_observations,
            sample_count: self.sample_count,
            rng_seed: self.rng_seed,
        };
        scenario.validate().map_err(|reason| FormatError::Invalid {
            field: "scenario".into(),
            reason,
        })?;
        Ok(scenario)
    }
}
