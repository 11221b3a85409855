//! Robot/world hand/eye calibration for one measurement source.
//!
//! For every calibration sample the reference camera-from-target pose
//! `T_TC` and the source's end-effector chain `M = T_{T_S C_S}` satisfy
//! `T_TC · T_{T_S T} = T_{C_S C} · M`. The two constant offsets are found by
//! minimizing `Σ ‖T_TC − T_{C_S C} · M · T_{T_S T}⁻¹‖_F²` with
//! Levenberg–Marquardt over rotation vectors and translations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lsq::{solve_lm, LmOptions, LsqError, LsqProblem, SolveReport, Termination};
use crate::scalar::{lit, to_f64, Real};
use crate::se3::{skew, RigidTransform, RotationVector};
use crate::SampleId;

pub const MIN_SAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Kuka,
    Vicon,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Kuka => "KUKA",
            Source::Vicon => "VICON",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "KUKA" => Ok(Source::Kuka),
            "VICON" => Ok(Source::Vicon),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// End-effector-to-end-effector relative pose reported by one source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceMeasurement<T: Real> {
    pub sample_id: SampleId,
    /// `T_{T_S C_S}`: target end-effector frame into camera end-effector frame.
    pub target_chain: RigidTransform<T>,
    pub source: Source,
}

/// Constant fixture offsets of one source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetPair<T: Real> {
    /// `T_{T_S T}`: target frame into the target end-effector frame.
    pub target_offset: RigidTransform<T>,
    /// `T_{C_S C}`: camera end-effector frame into the camera frame.
    pub camera_offset: RigidTransform<T>,
    /// `sqrt(Σᵢ ‖Eᵢ‖_F² / N)` at the solution.
    pub residual_rms: T,
}

impl<T: Real> OffsetPair<T> {
    pub fn identity() -> Self {
        Self {
            target_offset: RigidTransform::identity(),
            camera_offset: RigidTransform::identity(),
            residual_rms: T::zero(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RwheError {
    #[error("{count} samples, need at least {MIN_SAMPLES}")]
    InsufficientSamples { count: usize },
    #[error("no reference pose for sample {0}")]
    MissingTruth(SampleId),
    #[error("measurement rotations span only {rank} dimension(s); need 3")]
    DegenerateMotion { rank: usize },
    #[error("solver hit the iteration limit with gradient norm {gradient_norm:.3e}")]
    NoConvergence { gradient_norm: f64 },
    #[error(transparent)]
    Solver(#[from] LsqError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RwheOptions<T: Real> {
    /// Scales the translation entries of each residual matrix.
    pub translation_weight: T,
    pub max_restarts: usize,
    pub restart_seed: u64,
    /// Gradient norm above which a solve is retried from a perturbed start.
    pub restart_gradient: T,
    /// Singular value threshold of the motion rank test.
    pub rank_tol: T,
    pub lm: LmOptions<T>,
}

impl<T: Real> Default for RwheOptions<T> {
    fn default() -> Self {
        Self {
            translation_weight: T::one(),
            max_restarts: 8,
            restart_seed: 0x5eed,
            restart_gradient: lit(1e-6),
            rank_tol: lit(1e-6),
            lm: LmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RwheSolution<T: Real> {
    pub offsets: OffsetPair<T>,
    pub report: SolveReport<T>,
    pub restarts: usize,
}

/// `T̃_TC = T_{C_S C} · T_{T_S C_S} · T_{T_S T}⁻¹`.
pub fn reconstruct_pose<T: Real>(offsets: &OffsetPair<T>, measurement: &SourceMeasurement<T>) -> RigidTransform<T> {
    offsets
        .camera_offset
        .compose(&measurement.target_chain)
        .compose(&offsets.target_offset.inverse())
}

/// Residuals of the hand/eye objective.
///
/// Parameters: `[r_cam, t_cam, r_inv, t_inv]` where `(r_cam, t_cam)`
/// parametrize `T_{C_S C}` and `(r_inv, t_inv)` parametrize `T_{T_S T}⁻¹`.
/// Each sample contributes the 12 free entries of the 3x4 residual block,
/// rotation columns first, then the weighted translation.
pub struct RwheProblem<T: Real> {
    pairs: Vec<(RigidTransform<T>, RigidTransform<T>)>,
    translation_weight: T,
}

impl<T: Real> RwheProblem<T> {
    /// `pairs` holds `(reference pose, measured chain)` per sample.
    pub fn new(pairs: Vec<(RigidTransform<T>, RigidTransform<T>)>, translation_weight: T) -> Self {
        Self {
            pairs,
            translation_weight,
        }
    }

    pub fn pack(offsets: &OffsetPair<T>) -> DVector<T> {
        let inv = offsets.target_offset.inverse();
        let mut x = DVector::zeros(12);
        x.fixed_rows_mut::<3>(0)
            .copy_from(offsets.camera_offset.rotation.to_rotation_vector().vector());
        x.fixed_rows_mut::<3>(3).copy_from(&offsets.camera_offset.translation);
        x.fixed_rows_mut::<3>(6).copy_from(inv.rotation.to_rotation_vector().vector());
        x.fixed_rows_mut::<3>(9).copy_from(&inv.translation);
        x
    }

    fn split(x: &DVector<T>) -> (RotationVector<T>, Vector3<T>, RotationVector<T>, Vector3<T>) {
        let v = |o: usize| Vector3::new(x[o], x[o + 1], x[o + 2]);
        (RotationVector(v(0)), v(3), RotationVector(v(6)), v(9))
    }

    /// Offsets encoded by `x` (residual_rms left at zero).
    pub fn unpack(x: &DVector<T>) -> OffsetPair<T> {
        let (rc, tc, ri, ti) = Self::split(x);
        OffsetPair {
            camera_offset: RigidTransform::from_parameters(&rc, tc),
            target_offset: RigidTransform::from_parameters(&ri, ti).inverse(),
            residual_rms: T::zero(),
        }
    }
}

impl<T: Real> LsqProblem<T> for RwheProblem<T> {
    fn num_params(&self) -> usize {
        12
    }

    fn num_residuals(&self) -> usize {
        12 * self.pairs.len()
    }

    fn residuals(&self, x: &DVector<T>) -> DVector<T> {
        let (rc, tc, ri, ti) = Self::split(x);
        let cam = RigidTransform::from_parameters(&rc, tc);
        let inv = RigidTransform::from_parameters(&ri, ti);
        let mut r = DVector::zeros(self.num_residuals());
        for (i, (reference, chain)) in self.pairs.iter().enumerate() {
            let model = cam.compose(chain).compose(&inv);
            let e_rot = reference.rotation.matrix() - model.rotation.matrix();
            let e_t = (reference.translation - model.translation) * self.translation_weight;
            r.fixed_rows_mut::<9>(12 * i).copy_from_slice(e_rot.as_slice());
            r.fixed_rows_mut::<3>(12 * i + 9).copy_from(&e_t);
        }
        r
    }

    fn jacobian(&self, x: &DVector<T>) -> Option<DMatrix<T>> {
        let (rc, _, ri, ti) = Self::split(x);
        let (rot_c, rot_i) = (*rc.to_matrix().matrix(), *ri.to_matrix().matrix());
        let (jr_c, jr_i) = (rc.right_jacobian(), ri.right_jacobian());
        let w = self.translation_weight;
        let mut jac = DMatrix::zeros(self.num_residuals(), 12);
        for (i, (_, chain)) in self.pairs.iter().enumerate() {
            let row = 12 * i;
            let rot_m = *chain.rotation.matrix();
            let after = rot_m * rot_i;
            let before = rot_c * rot_m;
            for k in 0..3 {
                // Column k of R_c · R_m · R_i.
                let a_k = after.column(k).into_owned();
                let d_cam = rot_c * skew(&a_k) * jr_c;
                let e_k = Vector3::ith(k, T::one());
                let d_inv = before * rot_i * skew(&e_k) * jr_i;
                // Residual is reference minus model, so signs flip twice.
                jac.fixed_view_mut::<3, 3>(row + 3 * k, 0).copy_from(&d_cam);
                jac.fixed_view_mut::<3, 3>(row + 3 * k, 6).copy_from(&d_inv);
            }
            let lever = rot_m * ti + chain.translation;
            let d_cam_t = rot_c * skew(&lever) * jr_c * w;
            jac.fixed_view_mut::<3, 3>(row + 9, 0).copy_from(&d_cam_t);
            jac.fixed_view_mut::<3, 3>(row + 9, 3).copy_from(&(-Matrix3::identity() * w));
            jac.fixed_view_mut::<3, 3>(row + 9, 9).copy_from(&(-before * w));
        }
        Some(jac)
    }
}

/// Rank of the stacked rotation vectors of each measurement relative to the
/// first one.
pub fn motion_rank<T: Real>(measurements: &[SourceMeasurement<T>], tol: T) -> usize {
    let Some(first) = measurements.first() else {
        return 0;
    };
    let base = first.target_chain.rotation.transpose();
    let rows: Vec<Vector3<T>> = measurements[1..]
        .iter()
        .map(|m| *base.compose(&m.target_chain.rotation).to_rotation_vector().vector())
        .collect();
    if rows.is_empty() {
        return 0;
    }
    let stacked = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    stacked
        .singular_values()
        .iter()
        .filter(|s| **s > tol)
        .count()
}

/// Solves for the offsets of one source with default options.
pub fn solve_rwhe<T: Real>(
    truth: &BTreeMap<SampleId, RigidTransform<T>>,
    measurements: &[SourceMeasurement<T>],
    init: Option<&OffsetPair<T>>,
) -> Result<OffsetPair<T>, RwheError> {
    solve_rwhe_with(truth, measurements, init, &RwheOptions::default()).map(|s| s.offsets)
}

pub fn solve_rwhe_with<T: Real>(
    truth: &BTreeMap<SampleId, RigidTransform<T>>,
    measurements: &[SourceMeasurement<T>],
    init: Option<&OffsetPair<T>>,
    opts: &RwheOptions<T>,
) -> Result<RwheSolution<T>, RwheError> {
    if measurements.len() < MIN_SAMPLES {
        return Err(RwheError::InsufficientSamples {
            count: measurements.len(),
        });
    }
    let pairs = measurements
        .iter()
        .map(|m| {
            truth
                .get(&m.sample_id)
                .map(|t| (*t, m.target_chain))
                .ok_or(RwheError::MissingTruth(m.sample_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rank = motion_rank(measurements, opts.rank_tol);
    if rank < 3 {
        return Err(RwheError::DegenerateMotion { rank });
    }

    let n = pairs.len();
    let problem = RwheProblem::new(pairs, opts.translation_weight);
    let start = init.copied().unwrap_or_else(OffsetPair::identity);
    let x0 = RwheProblem::pack(&start);

    let mut best = solve_lm(&problem, &x0, &opts.lm)?;
    let mut restarts = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.restart_seed);
    while best.gradient_norm > opts.restart_gradient && restarts < opts.max_restarts {
        restarts += 1;
        let mut x = x0.clone();
        for offset in [0, 6] {
            let delta = random_rotation_vector(&mut rng, std::f64::consts::FRAC_PI_2);
            let current = RotationVector::new(x[offset], x[offset + 1], x[offset + 2]).to_matrix();
            let perturbed = RotationVector(delta.map(lit::<T>)).to_matrix().compose(&current);
            x.fixed_rows_mut::<3>(offset)
                .copy_from(perturbed.to_rotation_vector().vector());
        }
        let candidate = solve_lm(&problem, &x, &opts.lm)?;
        if candidate.final_cost < best.final_cost {
            best = candidate;
        }
    }
    if best.termination == Termination::MaxIter && best.gradient_norm > opts.restart_gradient {
        return Err(RwheError::NoConvergence {
            gradient_norm: to_f64(best.gradient_norm),
        });
    }

    let mut offsets = RwheProblem::unpack(&best.solution);
    offsets.residual_rms = (best.final_cost / lit(n as f64)).sqrt();
    Ok(RwheSolution {
        offsets,
        report: best,
        restarts,
    })
}

/// Uniform direction, magnitude uniform in `[0, max_angle]`.
fn random_rotation_vector(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let norm: f64 = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            return v / norm * rng.random_range(0.0..max_angle);
        }
    }
}
