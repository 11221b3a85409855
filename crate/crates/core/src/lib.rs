//! Multi-source extrinsic calibration and pose-label fusion.
pub mod camera;
pub mod formats;
pub mod fusion;
pub mod lsq;
pub mod metrics;
pub mod pnp;
pub mod rwhe;
pub mod scalar;
pub mod se3;

pub use scalar::Real;

/// Identifier tying together the records of one synchronized sample.
pub type SampleId = u64;

pub type RotationMatrixF64 = se3::RotationMatrix<f64>;
pub type RigidTransformF64 = se3::RigidTransform<f64>;
pub type CameraModelF64 = camera::CameraModel<f64>;
pub type BoardSpecF64 = camera::BoardSpec<f64>;
pub type OffsetPairF64 = rwhe::OffsetPair<f64>;
pub type CalibrationProfileF64 = fusion::CalibrationProfile<f64>;

pub type RotationMatrixF32 = se3::RotationMatrix<f32>;
pub type RigidTransformF32 = se3::RigidTransform<f32>;
pub type CameraModelF32 = camera::CameraModel<f32>;
pub type BoardSpecF32 = camera::BoardSpec<f32>;
pub type OffsetPairF32 = rwhe::OffsetPair<f32>;
pub type CalibrationProfileF32 = fusion::CalibrationProfile<f32>;
