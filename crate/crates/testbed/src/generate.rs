//! Sample generation and file emission.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use poseforge_core::camera::{board_corners_in_target, project, FeatureObservation};
use poseforge_core::formats::{
    BoardFile, CameraFile, MeasurementRecord, ObservationRecord, TransformRecord, TruthRecord, SCHEMA_VERSION,
};
use poseforge_core::pnp::PnpSample;
use poseforge_core::rwhe::{Source, SourceMeasurement};
use poseforge_core::se3::{RigidTransform, RotationVector};
use poseforge_core::SampleId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sampler::{sample_pose, uniform_rotation};
use crate::scenario::{NoiseSpec, SimScenario};

pub const MEASUREMENTS_FILE: &str = "measurements.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const CAMERA_FILE: &str = "camera.json";
pub const BOARD_FILE: &str = "board.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Half-width of the cube in which the camera is placed, world frame, m.
const WORKSPACE_HALF_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub sample_id: SampleId,
    /// Reference `T_TC`.
    pub truth: RigidTransform<f64>,
    /// `T_{C_K K}`.
    pub kuka_camera_chain: RigidTransform<f64>,
    /// `T_{T_K K}`, noisy.
    pub kuka_target_chain: RigidTransform<f64>,
    /// `T_{C_V V}`; `None` on dropout.
    pub vicon_camera_chain: Option<RigidTransform<f64>>,
    /// `T_{T_V V}`, noisy; `None` on dropout.
    pub vicon_target_chain: Option<RigidTransform<f64>>,
    /// The Vicon noise of this sample was scaled up.
    pub vicon_outlier: bool,
    pub observations: Option<PnpSample<f64>>,
}

impl SimSample {
    /// `T_{T_K C_K}`.
    pub fn kuka_measurement(&self) -> SourceMeasurement<f64> {
        SourceMeasurement {
            sample_id: self.sample_id,
            target_chain: self.kuka_camera_chain.inverse().compose(&self.kuka_target_chain),
            source: Source::Kuka,
        }
    }

    /// `T_{T_V C_V}` when Vicon saw the sample.
    pub fn vicon_measurement(&self) -> Option<SourceMeasurement<f64>> {
        let (cam, target) = (self.vicon_camera_chain?, self.vicon_target_chain?);
        Some(SourceMeasurement {
            sample_id: self.sample_id,
            target_chain: cam.inverse().compose(&target),
            source: Source::Vicon,
        })
    }

    pub fn to_record(&self) -> MeasurementRecord {
        MeasurementRecord {
            schema_version: SCHEMA_VERSION,
            sample_id: self.sample_id,
            kuka_camera_chain: TransformRecord::from_transform(&self.kuka_camera_chain),
            kuka_target_chain: TransformRecord::from_transform(&self.kuka_target_chain),
            vicon_camera_chain: self.vicon_camera_chain.as_ref().map(TransformRecord::from_transform),
            vicon_target_chain: self.vicon_target_chain.as_ref().map(TransformRecord::from_transform),
            observations: self.observations.as_ref().map(|s| {
                s.observations
                    .iter()
                    .map(|o| ObservationRecord {
                        id: o.feature_id,
                        u: o.pixel.x,
                        v: o.pixel.y,
                    })
                    .collect()
            }),
        }
    }

    pub fn truth_record(&self) -> TruthRecord {
        TruthRecord {
            schema_version: SCHEMA_VERSION,
            sample_id: self.sample_id,
            pose: TransformRecord::from_transform(&self.truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub kuka: NoiseSpec,
    pub vicon: NoiseSpec,
    pub pixel_noise_sigma: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub scenario_hash: String,
    pub sample_count: usize,
    pub vicon_dropouts: usize,
    pub vicon_outliers: usize,
    pub noise: NoiseSummary,
    /// SHA-256 of every emitted file other than the manifest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub scenario: SimScenario,
    pub samples: Vec<SimSample>,
    pub manifest: Manifest,
}

/// Applies `R' = exp(δr) R`, `t' = t + δt`.
fn perturb(chain: &RigidTransform<f64>, dr: &Vector3<f64>, dt: &Vector3<f64>) -> RigidTransform<f64> {
    RigidTransform::new(
        RotationVector(*dr).to_matrix().compose(&chain.rotation),
        chain.translation + dt,
    )
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Noise draw for one chain; the draws happen whether or not they are used
/// so that changing one rate leaves the rest of the stream intact.
fn draw_noise<R: Rng + ?Sized>(rng: &mut R, spec: &NoiseSpec) -> (Vector3<f64>, Vector3<f64>, bool) {
    let outlier = rng.random::<f64>() < spec.outlier_rate;
    let scale = if outlier { spec.outlier_scale } else { 1.0 };
    let dr = gaussian3(rng, spec.rot_noise_sigma * scale / 3f64.sqrt());
    let dt = gaussian3(rng, spec.trans_noise_sigma * scale);
    (dr, dt, outlier)
}

fn observe<R: Rng + ?Sized>(rng: &mut R, scenario: &SimScenario, sample_id: SampleId, truth: &RigidTransform<f64>) -> PnpSample<f64> {
    let noise = Normal::new(0.0, scenario.pixel_noise_sigma).expect("validated sigma");
    let (w, h) = (scenario.camera.width as f64, scenario.camera.height as f64);
    let mut observations = Vec::new();
    for (id, point) in board_corners_in_target(&scenario.board) {
        let (du, dv) = (noise.sample(rng), noise.sample(rng));
        if let Ok(px) = project(&scenario.camera, truth, &point) {
            if px.x >= 0.0 && px.x <= w && px.y >= 0.0 && px.y <= h {
                observations.push(FeatureObservation::new(id, px.x + du, px.y + dv));
            }
        }
    }
    PnpSample { sample_id, observations }
}

/// Runs the scenario. Panics if the scenario does not validate.
pub fn generate(scenario: &SimScenario) -> SimOutput {
    if let Err(e) = scenario.validate() {
        panic!("invalid scenario: {e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
    let kuka_offsets = &scenario.true_kuka_offsets;
    let vicon_offsets = &scenario.true_vicon_offsets;
    let mut samples = Vec::with_capacity(scenario.sample_count);
    for sample_id in 0..scenario.sample_count as SampleId {
        let truth = sample_pose(&mut rng, &scenario.pose_sampler, &scenario.camera, &scenario.board);
        // Camera frame into world.
        let camera_in_world = RigidTransform::new(
            uniform_rotation(&mut rng),
            Vector3::from_fn(|_, _| rng.random_range(-WORKSPACE_HALF_WIDTH..=WORKSPACE_HALF_WIDTH)),
        );
        let target_in_world = camera_in_world.compose(&truth);

        // Source-frame poses of both end-effectors.
        let chains = |frame: &RigidTransform<f64>, offsets: &poseforge_core::rwhe::OffsetPair<f64>| {
            (
                frame.compose(&camera_in_world).compose(&offsets.camera_offset),
                frame.compose(&target_in_world).compose(&offsets.target_offset),
            )
        };
        let (kuka_cam, kuka_target) = chains(&scenario.kuka_frame, kuka_offsets);
        let (vicon_cam, vicon_target) = chains(&scenario.vicon_frame, vicon_offsets);

        let (kdr, kdt, _) = draw_noise(&mut rng, &scenario.kuka_noise);
        let dropout = rng.random::<f64>() < scenario.vicon_noise.dropout_rate;
        let (vdr, vdt, outlier) = draw_noise(&mut rng, &scenario.vicon_noise);
        let observations = scenario
            .emit_observations
            .then(|| observe(&mut rng, scenario, sample_id, &truth));

        samples.push(SimSample {
            sample_id,
            truth,
            kuka_camera_chain: kuka_cam,
            kuka_target_chain: perturb(&kuka_target, &kdr, &kdt),
            vicon_camera_chain: (!dropout).then_some(vicon_cam),
            vicon_target_chain: (!dropout).then(|| perturb(&vicon_target, &vdr, &vdt)),
            vicon_outlier: outlier && !dropout,
            observations,
        });
    }

    let mut output = SimOutput {
        scenario: scenario.clone(),
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            scenario: scenario.name.clone(),
            seed: scenario.rng_seed,
            scenario_hash: scenario.hash(),
            sample_count: samples.len(),
            vicon_dropouts: samples.iter().filter(|s| s.vicon_camera_chain.is_none()).count(),
            vicon_outliers: samples.iter().filter(|s| s.vicon_outlier).count(),
            noise: NoiseSummary {
                kuka: scenario.kuka_noise,
                vicon: scenario.vicon_noise,
                pixel_noise_sigma: scenario.pixel_noise_sigma,
                note: "synthetic Gaussian noise on the target end-effector chains; sigmas tuned to \
                       calibration error levels, not measured hardware characteristics"
                    .into(),
            },
            files: BTreeMap::new(),
        },
        samples,
    };
    output.manifest.files = output
        .data_files()
        .iter()
        .map(|(name, bytes)| (name.to_string(), hex::encode(Sha256::digest(bytes))))
        .collect();
    output
}

fn json_document<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn json_lines<T: Serialize>(values: impl Iterator<Item = T>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for v in values {
        serde_json::to_writer(&mut bytes, &v).expect("serializable");
        bytes.push(b'\n');
    }
    bytes
}

impl SimOutput {
    pub fn truth_map(&self) -> BTreeMap<SampleId, RigidTransform<f64>> {
        self.samples.iter().map(|s| (s.sample_id, s.truth)).collect()
    }

    pub fn kuka_measurements(&self) -> Vec<SourceMeasurement<f64>> {
        self.samples.iter().map(SimSample::kuka_measurement).collect()
    }

    pub fn vicon_measurements(&self) -> Vec<SourceMeasurement<f64>> {
        self.samples.iter().filter_map(SimSample::vicon_measurement).collect()
    }

    pub fn pnp_samples(&self) -> Vec<PnpSample<f64>> {
        self.samples.iter().filter_map(|s| s.observations.clone()).collect()
    }

    pub fn records(&self) -> Vec<MeasurementRecord> {
        self.samples.iter().map(SimSample::to_record).collect()
    }

    /// Every emitted file except the manifest, as `(name, bytes)`.
    pub fn data_files(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            (MEASUREMENTS_FILE, json_lines(self.samples.iter().map(SimSample::to_record))),
            (TRUTH_FILE, json_lines(self.samples.iter().map(SimSample::truth_record))),
            (
                CAMERA_FILE,
                json_document(&CameraFile::from_model(&self.scenario.camera, &self.scenario.camera_id)),
            ),
            (BOARD_FILE, json_document(&BoardFile::from_spec(&self.scenario.board))),
            (SCENARIO_FILE, json_document(&self.scenario.to_file())),
        ]
    }

    /// Writes all files plus the manifest into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in self.data_files() {
            std::fs::write(dir.join(name), bytes)?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), json_document(&self.manifest))
    }
}
