//! Pose-label accuracy metrics.

use thiserror::Error;

use crate::camera::{project, BoardSpec, CameraError, CameraModel};
use crate::pnp::PnpSample;
use crate::scalar::{lit, Real};
use crate::se3::{geodesic_angle, RigidTransform};

/// Translations shorter than this cannot normalize a SPEED term, meters.
pub const MIN_RANGE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{estimated} estimates but {truth} reference values")]
    LengthMismatch { estimated: usize, truth: usize },
    #[error("metric needs at least one sample")]
    Empty,
    #[error("reference pose {index} has zero range")]
    ZeroRangeTruth { index: usize },
    #[error("sample {sample_id}: {source}")]
    Camera { sample_id: u64, source: CameraError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrors<T: Real> {
    /// Mean translation error, m.
    pub e_t: T,
    /// Mean rotation error, rad.
    pub e_r: T,
    pub translation: Vec<T>,
    pub rotation: Vec<T>,
}

fn check_lengths(estimated: usize, truth: usize) -> Result<(), MetricsError> {
    if estimated != truth {
        return Err(MetricsError::LengthMismatch { estimated, truth });
    }
    if estimated == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(T::zero(), |acc, v| acc + *v);
    Some(sum / lit(values.len() as f64))
}

/// Sample standard deviation; `None` for fewer than two values.
pub fn std_dev<T: Real>(values: &[T]) -> Option<T> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss = values.iter().fold(T::zero(), |acc, v| acc + (*v - m) * (*v - m));
    Some((ss / lit((values.len() - 1) as f64)).sqrt())
}

pub fn translation_error<T: Real>(estimated: &RigidTransform<T>, truth: &RigidTransform<T>) -> T {
    (estimated.translation - truth.translation).norm()
}

pub fn rotation_error<T: Real>(estimated: &RigidTransform<T>, truth: &RigidTransform<T>) -> T {
    geodesic_angle(&estimated.rotation, &truth.rotation)
}

pub fn pose_errors<T: Real>(
    estimated: &[RigidTransform<T>],
    truth: &[RigidTransform<T>],
) -> Result<PoseErrors<T>, MetricsError> {
    check_lengths(estimated.len(), truth.len())?;
    let translation: Vec<T> = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| translation_error(e, t))
        .collect();
    let rotation: Vec<T> = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| rotation_error(e, t))
        .collect();
    Ok(PoseErrors {
        e_t: mean(&translation).expect("non-empty"),
        e_r: mean(&rotation).expect("non-empty"),
        translation,
        rotation,
    })
}

/// RMS pixel error of one sample's observations at `pose`.
pub fn sample_reprojection_rms<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    pose: &RigidTransform<T>,
    sample: &PnpSample<T>,
) -> Result<T, MetricsError> {
    let mut ss = T::zero();
    let mut n = 0usize;
    for obs in &sample.observations {
        let point = board
            .corner_in_target(obs.feature_id)
            .ok_or(MetricsError::Camera {
                sample_id: sample.sample_id,
                source: CameraError::UnknownFeature(obs.feature_id),
            })?;
        let px = project(camera, pose, &point).map_err(|source| MetricsError::Camera {
            sample_id: sample.sample_id,
            source,
        })?;
        ss += (px - obs.pixel).norm_squared();
        n += 1;
    }
    if n == 0 {
        return Ok(T::zero());
    }
    Ok((ss / lit(n as f64)).sqrt())
}

/// Mean over samples of the per-sample RMS reprojection error, px.
pub fn reprojection_error<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    poses: &[RigidTransform<T>],
    samples: &[PnpSample<T>],
) -> Result<T, MetricsError> {
    check_lengths(poses.len(), samples.len())?;
    let per_sample = poses
        .iter()
        .zip(samples)
        .map(|(p, s)| sample_reprojection_rms(camera, board, p, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean(&per_sample).expect("non-empty"))
}

/// Per-sample SPEED terms: rotation error in radians plus translation error
/// normalized by the reference range.
pub fn speed_terms<T: Real>(
    estimated: &[RigidTransform<T>],
    truth: &[RigidTransform<T>],
) -> Result<Vec<T>, MetricsError> {
    check_lengths(estimated.len(), truth.len())?;
    estimated
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(index, (e, t))| {
            let range = t.translation.norm();
            if !(range >= lit(MIN_RANGE)) {
                return Err(MetricsError::ZeroRangeTruth { index });
            }
            Ok(rotation_error(e, t) + translation_error(e, t) / range)
        })
        .collect()
}

pub fn speed_score<T: Real>(estimated: &[RigidTransform<T>], truth: &[RigidTransform<T>]) -> Result<T, MetricsError> {
    Ok(mean(&speed_terms(estimated, truth)?).expect("non-empty"))
}
