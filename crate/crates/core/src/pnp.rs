//! Camera-from-target pose estimation from planar board observations.
//!
//! Each sample is initialized with a homography DLT on the board plane and
//! refined by minimizing pixel reprojection error. Optionally the camera
//! intrinsics and distortion are refined jointly over all samples.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{BoardSpec, CameraError, CameraModel, FeatureObservation, INTRINSIC_PARAMS, MIN_DEPTH};
use crate::lsq::{solve_lm, LmOptions, LsqError, LsqProblem, SolveReport};
use crate::scalar::{lit, Real};
use crate::se3::{RigidTransform, RotationMatrix, RotationVector};
use crate::SampleId;

/// Observations demanded per sample for a well-conditioned solve.
pub const MIN_OBSERVATIONS: usize = 6;

/// Residual assigned to a corner that a trial pose puts behind the camera.
const BEHIND_CAMERA_PENALTY: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("sample {sample_id}: {count} observations, need at least {MIN_OBSERVATIONS}")]
    InsufficientFeatures { sample_id: SampleId, count: usize },
    #[error("sample {sample_id}: feature {feature_id} observed twice")]
    DuplicateFeature { sample_id: SampleId, feature_id: u32 },
    #[error("sample {sample_id}: observed corners are collinear or the DLT system is rank deficient")]
    DegenerateConfiguration { sample_id: SampleId },
    #[error("sample {sample_id}: {source}")]
    Camera {
        sample_id: SampleId,
        #[source]
        source: CameraError,
    },
    #[error("sample {sample_id:?}: {source}")]
    Solver {
        sample_id: Option<SampleId>,
        #[source]
        source: LsqError,
    },
}

/// Board observations from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PnpSample<T: Real> {
    pub sample_id: SampleId,
    pub observations: Vec<FeatureObservation<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult<T: Real> {
    /// Camera-from-target pose per sample.
    pub poses: BTreeMap<SampleId, RigidTransform<T>>,
    /// RMS pixel reprojection error per sample.
    pub rms_per_sample: BTreeMap<SampleId, T>,
    /// Present when intrinsics were refined.
    pub refined_camera: Option<CameraModel<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions<T: Real> {
    pub refine_intrinsics: bool,
    pub lm: LmOptions<T>,
}

impl<T: Real> Default for PnpOptions<T> {
    fn default() -> Self {
        Self {
            refine_intrinsics: false,
            lm: LmOptions::default(),
        }
    }
}

/// Reprojection residuals of one or more samples.
///
/// Parameters are `[r, t]` (rotation vector, translation) per sample in the
/// order given, followed by the nine intrinsics when `refine_intrinsics`.
pub struct ReprojectionProblem<T: Real> {
    camera: CameraModel<T>,
    /// Target-frame corner and pixel per observation, per sample.
    samples: Vec<Vec<(Vector3<T>, Vector2<T>)>>,
    refine_intrinsics: bool,
}

impl<T: Real> ReprojectionProblem<T> {
    pub fn new(
        camera: &CameraModel<T>,
        board: &BoardSpec<T>,
        samples: &[&PnpSample<T>],
        refine_intrinsics: bool,
    ) -> Result<Self, PnpError> {
        let samples = samples
            .iter()
            .map(|s| {
                s.observations
                    .iter()
                    .map(|o| {
                        board
                            .corner_in_target(o.feature_id)
                            .map(|p| (p, o.pixel))
                            .ok_or(PnpError::Camera {
                                sample_id: s.sample_id,
                                source: CameraError::UnknownFeature(o.feature_id),
                            })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            camera: *camera,
            samples,
            refine_intrinsics,
        })
    }

    /// Packs poses (and the camera when refining) into a parameter vector.
    pub fn pack(&self, poses: &[RigidTransform<T>], camera: &CameraModel<T>) -> DVector<T> {
        let mut x = Vec::with_capacity(self.num_params());
        for pose in poses {
            x.extend(pose.rotation.to_rotation_vector().vector().iter().copied());
            x.extend(pose.translation.iter().copied());
        }
        if self.refine_intrinsics {
            x.extend(camera.to_params());
        }
        DVector::from_vec(x)
    }

    pub fn pose(&self, x: &DVector<T>, sample: usize) -> RigidTransform<T> {
        let o = 6 * sample;
        RigidTransform::from_parameters(
            &RotationVector::new(x[o], x[o + 1], x[o + 2]),
            Vector3::new(x[o + 3], x[o + 4], x[o + 5]),
        )
    }

    pub fn camera(&self, x: &DVector<T>) -> CameraModel<T> {
        if self.refine_intrinsics {
            let o = 6 * self.samples.len();
            self.camera.with_params(&x.as_slice()[o..o + INTRINSIC_PARAMS])
        } else {
            self.camera
        }
    }
}

impl<T: Real> LsqProblem<T> for ReprojectionProblem<T> {
    fn num_params(&self) -> usize {
        6 * self.samples.len() + if self.refine_intrinsics { INTRINSIC_PARAMS } else { 0 }
    }

    fn num_residuals(&self) -> usize {
        2 * self.samples.iter().map(Vec::len).sum::<usize>()
    }

    fn residuals(&self, x: &DVector<T>) -> DVector<T> {
        let camera = self.camera(x);
        let mut r = DVector::zeros(self.num_residuals());
        let mut row = 0;
        for (s, obs) in self.samples.iter().enumerate() {
            let pose = self.pose(x, s);
            for (point, pixel) in obs {
                let e = match camera.project_camera_point(&pose.transform_point(point)) {
                    Ok(p) => p - pixel,
                    Err(_) => Vector2::repeat(lit(BEHIND_CAMERA_PENALTY)),
                };
                r[row] = e.x;
                r[row + 1] = e.y;
                row += 2;
            }
        }
        r
    }

    fn jacobian(&self, x: &DVector<T>) -> Option<DMatrix<T>> {
        let camera = self.camera(x);
        let mut jac = DMatrix::zeros(self.num_residuals(), self.num_params());
        let intr_col = 6 * self.samples.len();
        let mut row = 0;
        for (s, obs) in self.samples.iter().enumerate() {
            let o = 6 * s;
            let rv = RotationVector::new(x[o], x[o + 1], x[o + 2]);
            let pose = self.pose(x, s);
            let rot = *pose.rotation.matrix();
            let right = rv.right_jacobian();
            for (point, _) in obs {
                let pc = pose.transform_point(point);
                if let Ok((_, d_point, d_intr)) = camera.project_camera_point_with_jacobians(&pc) {
                    let d_rot = -(rot * crate::se3::skew(point) * right);
                    let j_rot = d_point * d_rot;
                    jac.fixed_view_mut::<2, 3>(row, o).copy_from(&j_rot);
                    jac.fixed_view_mut::<2, 3>(row, o + 3).copy_from(&d_point);
                    if self.refine_intrinsics {
                        jac.fixed_view_mut::<2, INTRINSIC_PARAMS>(row, intr_col).copy_from(&d_intr);
                    }
                }
                row += 2;
            }
        }
        Some(jac)
    }
}

fn validate_sample<T: Real>(sample: &PnpSample<T>, board: &BoardSpec<T>) -> Result<(), PnpError> {
    let count = sample.observations.len();
    if count < MIN_OBSERVATIONS {
        return Err(PnpError::InsufficientFeatures {
            sample_id: sample.sample_id,
            count,
        });
    }
    let mut seen = BTreeSet::new();
    for o in &sample.observations {
        if !board.contains(o.feature_id) {
            return Err(PnpError::Camera {
                sample_id: sample.sample_id,
                source: CameraError::UnknownFeature(o.feature_id),
            });
        }
        if !seen.insert(o.feature_id) {
            return Err(PnpError::DuplicateFeature {
                sample_id: sample.sample_id,
                feature_id: o.feature_id,
            });
        }
    }
    Ok(())
}

/// Similarity transform moving `points` to zero mean and mean distance √2.
fn hartley_normalization<T: Real>(points: &[Vector2<T>]) -> Matrix3<T> {
    let n: T = lit(points.len() as f64);
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let spread = points.iter().fold(T::zero(), |acc, p| acc + (p - mean).norm()) / n;
    let s = lit::<T>(2.0).sqrt() / spread.max(lit(1e-300));
    Matrix3::new(s, T::zero(), -s * mean.x, T::zero(), s, -s * mean.y, T::zero(), T::zero(), T::one())
}

/// Camera-from-target pose from a homography between the board plane and
/// undistorted normalized image coordinates.
pub fn initial_pose<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    sample: &PnpSample<T>,
) -> Result<RigidTransform<T>, PnpError> {
    validate_sample(sample, board)?;
    let degenerate = PnpError::DegenerateConfiguration {
        sample_id: sample.sample_id,
    };

    let plane: Vec<Vector2<T>> = sample
        .observations
        .iter()
        .map(|o| board.corner_in_board(o.feature_id).expect("validated").xy())
        .collect();
    let image: Vec<Vector2<T>> = sample
        .observations
        .iter()
        .map(|o| camera.unproject_normalized(&o.pixel))
        .collect();

    // Collinear corners leave the plane-to-image map undetermined.
    let n: T = lit(plane.len() as f64);
    let mean = plane.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let cov = plane
        .iter()
        .fold(nalgebra::Matrix2::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose());
    let eig = SymmetricEigen::new(cov);
    if eig.eigenvalues.min() <= lit::<T>(1e-10) * eig.eigenvalues.max() {
        return Err(degenerate);
    }

    let norm_plane = hartley_normalization(&plane);
    let norm_image = hartley_normalization(&image);
    let mut a = DMatrix::zeros(2 * plane.len(), 9);
    for (i, (p, q)) in plane.iter().zip(&image).enumerate() {
        let p = norm_plane * p.push(T::one());
        let q = norm_image * q.push(T::one());
        let (x, y) = (p.x, p.y);
        let (u, v) = (q.x, q.y);
        let (o, z) = (T::one(), T::zero());
        let rows = [
            [-x, -y, -o, z, z, z, u * x, u * y, u],
            [z, z, z, -x, -y, -o, v * x, v * y, v],
        ];
        for (k, r) in rows.iter().enumerate() {
            for (c, val) in r.iter().enumerate() {
                a[(2 * i + k, c)] = *val;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(degenerate.clone())?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (smallest, second, largest) = (order[0], order[1], order[order.len() - 1]);
    if svd.singular_values[second] <= lit::<T>(1e-10) * svd.singular_values[largest] {
        return Err(degenerate);
    }
    let h = v_t.row(smallest);
    let h_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let inv_image = norm_image.try_inverse().ok_or(degenerate.clone())?;
    let homography = inv_image * h_norm * norm_plane;

    let h1 = homography.column(0).into_owned();
    let h2 = homography.column(1).into_owned();
    let h3 = homography.column(2).into_owned();
    let mut scale = lit::<T>(2.0) / (h1.norm() + h2.norm());
    if h3.z * scale < T::zero() {
        scale = -scale;
    }
    let r1 = h1 * scale;
    let r2 = h2 * scale;
    let r3 = r1.cross(&r2);
    let rotation = RotationMatrix::nearest(&Matrix3::from_columns(&[r1, r2, r3])).map_err(|_| degenerate)?;
    let camera_from_board = RigidTransform::new(rotation, h3 * scale);
    Ok(camera_from_board.compose(&board.board_to_target.inverse()))
}

/// RMS pixel error of one sample at `pose`.
pub fn sample_rms<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    pose: &RigidTransform<T>,
    sample: &PnpSample<T>,
) -> Result<T, CameraError> {
    if sample.observations.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for o in &sample.observations {
        let point = board
            .corner_in_target(o.feature_id)
            .ok_or(CameraError::UnknownFeature(o.feature_id))?;
        let p = crate::camera::project(camera, pose, &point)?;
        sum += (p - o.pixel).norm_squared();
    }
    Ok((sum / lit(sample.observations.len() as f64)).sqrt())
}

fn check_depths<T: Real>(
    board: &BoardSpec<T>,
    pose: &RigidTransform<T>,
    sample: &PnpSample<T>,
) -> Result<(), PnpError> {
    for o in &sample.observations {
        let pc = pose.transform_point(&board.corner_in_target(o.feature_id).expect("validated"));
        if !(pc.z > lit(MIN_DEPTH)) {
            return Err(PnpError::Camera {
                sample_id: sample.sample_id,
                source: CameraError::BehindCamera {
                    depth: crate::scalar::to_f64(pc.z),
                },
            });
        }
    }
    Ok(())
}

fn refine_single<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    sample: &PnpSample<T>,
    lm: &LmOptions<T>,
) -> Result<(RigidTransform<T>, SolveReport<T>), PnpError> {
    let init = initial_pose(camera, board, sample)?;
    let problem = ReprojectionProblem::new(camera, board, &[sample], false)?;
    let x0 = problem.pack(&[init], camera);
    let report = solve_lm(&problem, &x0, lm).map_err(|source| PnpError::Solver {
        sample_id: Some(sample.sample_id),
        source,
    })?;
    let pose = problem.pose(&report.solution, 0);
    check_depths(board, &pose, sample)?;
    Ok((pose, report))
}

/// Estimates the camera-from-target pose of every sample.
pub fn solve_pnp<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    samples: &[PnpSample<T>],
    refine_intrinsics: bool,
) -> Result<PnpResult<T>, PnpError> {
    solve_pnp_with(
        camera,
        board,
        samples,
        &PnpOptions {
            refine_intrinsics,
            ..PnpOptions::default()
        },
    )
}

pub fn solve_pnp_with<T: Real>(
    camera: &CameraModel<T>,
    board: &BoardSpec<T>,
    samples: &[PnpSample<T>],
    opts: &PnpOptions<T>,
) -> Result<PnpResult<T>, PnpError> {
    let solved: Vec<RigidTransform<T>> = samples
        .par_iter()
        .map(|s| refine_single(camera, board, s, &opts.lm).map(|(pose, _)| pose))
        .collect::<Result<_, _>>()?;

    let (poses, refined_camera) = if opts.refine_intrinsics && !samples.is_empty() {
        let refs: Vec<&PnpSample<T>> = samples.iter().collect();
        let problem = ReprojectionProblem::new(camera, board, &refs, true)?;
        let x0 = problem.pack(&solved, camera);
        let report = solve_lm(&problem, &x0, &opts.lm).map_err(|source| PnpError::Solver {
            sample_id: None,
            source,
        })?;
        let poses: Vec<_> = (0..samples.len())
            .map(|i| problem.pose(&report.solution, i))
            .collect();
        let refined = problem.camera(&report.solution);
        refined.validate().map_err(|source| PnpError::Camera {
            sample_id: samples[0].sample_id,
            source,
        })?;
        for (pose, sample) in poses.iter().zip(samples) {
            check_depths(board, pose, sample)?;
        }
        (poses, Some(refined))
    } else {
        (solved, None)
    };

    let used = refined_camera.as_ref().unwrap_or(camera);
    let mut result = PnpResult {
        poses: BTreeMap::new(),
        rms_per_sample: BTreeMap::new(),
        refined_camera,
    };
    for (pose, sample) in poses.into_iter().zip(samples) {
        let rms = sample_rms(used, board, &pose, sample).map_err(|source| PnpError::Camera {
            sample_id: sample.sample_id,
            source,
        })?;
        result.poses.insert(sample.sample_id, pose);
        result.rms_per_sample.insert(sample.sample_id, rms);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Distortion;
    use crate::lsq::jacobian_relative_error;
    use crate::se3::geodesic_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraModel<f64> {
        CameraModel::new(
            1600.0,
            1605.0,
            962.0,
            597.0,
            Distortion::from_array([-0.08, 0.05, 0.0005, -0.0003, 0.0]),
            1920,
            1200,
        )
        .unwrap()
    }

    fn board() -> BoardSpec<f64> {
        BoardSpec::new(
            11,
            11,
            0.03,
            RigidTransform::from_parameters(&RotationVector::new(0.0, 0.05, 0.02), Vector3::new(-0.15, -0.1, 0.2)),
        )
        .unwrap()
    }

    /// Camera 0.75 m from the board center, tilted and rolled.
    fn pose(board: &BoardSpec<f64>, tilt: [f64; 2], roll: f64) -> RigidTransform<f64> {
        let center = Vector3::new(0.15, 0.15, 0.0);
        let view = RotationVector::new(tilt[0], tilt[1], 0.0).to_matrix();
        let position = center - view.rotate(&Vector3::z()) * 0.75;
        let board_in_camera_rot = RotationVector::new(0.0, 0.0, roll).to_matrix().compose(&view.transpose());
        let camera_in_board = RigidTransform::new(board_in_camera_rot.transpose(), position);
        camera_in_board.inverse().compose(&board.board_to_target.inverse())
    }

    fn synthesize(camera: &CameraModel<f64>, board: &BoardSpec<f64>, pose: &RigidTransform<f64>, id: SampleId) -> PnpSample<f64> {
        PnpSample {
            sample_id: id,
            observations: crate::camera::board_corners_in_target(board)
                .into_iter()
                .map(|(fid, p)| FeatureObservation {
                    feature_id: fid,
                    pixel: crate::camera::project(camera, pose, &p).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn noiseless_pose_is_recovered() {
        let (c, b) = (camera(), board());
        for (i, (tilt, roll)) in [([0.0, 0.0], 0.0), ([0.4, -0.3], 1.0), ([-0.6, 0.2], -2.5)].iter().enumerate() {
            let truth = pose(&b, *tilt, *roll);
            let sample = synthesize(&c, &b, &truth, i as SampleId);
            let result = solve_pnp(&c, &b, &[sample], false).unwrap();
            let est = result.poses[&(i as SampleId)];
            assert!((est.translation - truth.translation).amax() < 1e-8);
            assert!(geodesic_angle(&est.rotation, &truth.rotation) < 1e-8);
            assert!(result.rms_per_sample[&(i as SampleId)] < 1e-8);
            assert!(result.refined_camera.is_none());
        }
    }

    #[test]
    fn homography_init_is_close() {
        let (c, b) = (camera(), board());
        let truth = pose(&b, [0.3, 0.3], 0.4);
        let init = initial_pose(&c, &b, &synthesize(&c, &b, &truth, 0)).unwrap();
        assert!((init.translation - truth.translation).amax() < 1e-6);
        assert!(geodesic_angle(&init.rotation, &truth.rotation) < 1e-6);
    }

    #[test]
    fn noiseless_cost_is_negligible() {
        let (c, b) = (camera(), board());
        let truth = pose(&b, [0.2, -0.5], 0.3);
        let sample = synthesize(&c, &b, &truth, 0);
        let (_, report) = refine_single(&c, &b, &sample, &LmOptions::default()).unwrap();
        assert!(report.final_cost < 1e-16, "{}", report.final_cost);
    }

    #[test]
    fn collinear_corners_are_degenerate() {
        let (c, b) = (camera(), board());
        let mut sample = synthesize(&c, &b, &pose(&b, [0.1, 0.1], 0.0), 4);
        sample.observations.retain(|o| o.feature_id < 10);
        assert_eq!(
            solve_pnp(&c, &b, &[sample], false),
            Err(PnpError::DegenerateConfiguration { sample_id: 4 })
        );
    }

    #[test]
    fn too_few_or_duplicate_observations() {
        let (c, b) = (camera(), board());
        let full = synthesize(&c, &b, &pose(&b, [0.1, 0.1], 0.0), 2);
        let mut few = full.clone();
        few.observations.truncate(5);
        assert_eq!(
            solve_pnp(&c, &b, &[few], false),
            Err(PnpError::InsufficientFeatures { sample_id: 2, count: 5 })
        );
        let mut dup = full.clone();
        dup.observations[1].feature_id = dup.observations[0].feature_id;
        assert!(matches!(solve_pnp(&c, &b, &[dup], false), Err(PnpError::DuplicateFeature { .. })));
    }

    #[test]
    fn partial_board_and_ordering_invariance() {
        let (c, b) = (camera(), board());
        let truth = pose(&b, [-0.3, 0.4], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sample = synthesize(&c, &b, &truth, 9);
        sample.observations.retain(|o| o.feature_id % 3 != 0 && o.feature_id > 20);
        for o in &mut sample.observations {
            o.pixel += Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        }
        let a = solve_pnp(&c, &b, &[sample.clone()], false).unwrap();
        let mut shuffled = sample.clone();
        shuffled.observations.reverse();
        shuffled.observations.swap(0, 7);
        let bb = solve_pnp(&c, &b, &[shuffled], false).unwrap();
        let (pa, pb) = (a.poses[&9], bb.poses[&9]);
        assert!((pa.translation - pb.translation).amax() < 1e-9);
        assert!(geodesic_angle(&pa.rotation, &pb.rotation) < 1e-9);
    }

    #[test]
    fn reported_rms_matches_independent_recomputation() {
        let (c, b) = (camera(), board());
        let truth = pose(&b, [0.2, 0.1], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sample = synthesize(&c, &b, &truth, 0);
        for o in &mut sample.observations {
            o.pixel += Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        }
        let result = solve_pnp(&c, &b, &[sample.clone()], false).unwrap();
        let est = result.poses[&0];
        let mut sum = 0.0;
        for o in &sample.observations {
            let p = b.corner_in_target(o.feature_id).unwrap();
            let pc = est.rotation.matrix() * p + est.translation;
            let (x, y) = (pc.x / pc.z, pc.y / pc.z);
            let d = c.distortion.apply(&Vector2::new(x, y));
            let u = c.fx * d.x + c.cx - o.pixel.x;
            let v = c.fy * d.y + c.cy - o.pixel.y;
            sum += u * u + v * v;
        }
        let rms = (sum / sample.observations.len() as f64).sqrt();
        assert!((rms - result.rms_per_sample[&0]).abs() < 1e-10);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let (c, b) = (camera(), board());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<_> = (0..2)
            .map(|i| synthesize(&c, &b, &pose(&b, [0.1 * i as f64, -0.2], 0.5), i))
            .collect();
        let refs: Vec<_> = samples.iter().collect();
        for refine in [false, true] {
            let problem = ReprojectionProblem::new(&c, &b, &refs, refine).unwrap();
            for _ in 0..5 {
                let poses: Vec<_> = (0..2)
                    .map(|i| {
                        let p = pose(&b, [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)], rng.random_range(-3.0..3.0));
                        RigidTransform::new(p.rotation, p.translation + Vector3::new(0.0, 0.0, 0.1 * i as f64))
                    })
                    .collect();
                let x = problem.pack(&poses, &c);
                let err = jacobian_relative_error(&problem, &x).unwrap();
                // The k3 column is O(r⁶) and forward differences there are
                // limited by rounding of the pixel residual.
                let tol = if refine { 1e-3 } else { 1e-5 };
                assert!(err < tol, "refine={refine} err={err}");
            }
        }
    }

    #[test]
    fn joint_refinement_recovers_intrinsics() {
        let truth_camera = camera();
        let b = board();
        let tilts = [[0.0, 0.0], [0.5, 0.0], [-0.5, 0.1], [0.0, 0.6], [0.1, -0.6], [0.45, 0.45], [-0.4, -0.4], [0.3, -0.2]];
        let samples: Vec<_> = tilts
            .iter()
            .enumerate()
            .map(|(i, t)| synthesize(&truth_camera, &b, &pose(&b, *t, i as f64 * 0.7), i as SampleId))
            .collect();
        let mut guess = truth_camera;
        guess.fx *= 1.01;
        guess.fy *= 0.99;
        guess.cx += 4.0;
        guess.distortion.k1 = 0.0;
        let result = solve_pnp(&guess, &b, &samples, true).unwrap();
        let refined = result.refined_camera.unwrap();
        assert!((refined.fx - truth_camera.fx).abs() < 1e-4);
        assert!((refined.cy - truth_camera.cy).abs() < 1e-4);
        assert!((refined.distortion.k1 - truth_camera.distortion.k1).abs() < 1e-6);
        for rms in result.rms_per_sample.values() {
            assert!(*rms < 1e-6);
        }
    }
}
