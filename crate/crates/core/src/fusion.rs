//! Per-source uncertainty, variance-weighted pose fusion and Vicon gating.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::rwhe::{reconstruct_pose, OffsetPair, Source, SourceMeasurement};
use crate::scalar::{lit, Real};
use crate::se3::{geodesic_angle, weighted_rotation_mean, RigidTransform, RotationMatrix, Se3Error};
use crate::SampleId;

/// Floor applied to position variances, m².
pub const POSITION_VARIANCE_FLOOR: f64 = 1e-12;
/// Floor applied to rotation variances, rad².
pub const ROTATION_VARIANCE_FLOOR: f64 = 1e-12;
pub const DEFAULT_CONFIDENCE_MULTIPLIER: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("{count} common samples, need at least 2")]
    InsufficientSamples { count: usize },
    #[error("{tag} variance is exactly zero; apply a floor before fusing")]
    ZeroVariance { tag: Source },
    #[error("variances must be positive and finite")]
    InvalidVariance,
    #[error(transparent)]
    Rotation(#[from] Se3Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceModel<T: Real> {
    /// Per camera-frame axis, m².
    pub position_var: Vector3<T>,
    /// rad².
    pub rotation_var: T,
    pub source: Source,
}

impl<T: Real> VarianceModel<T> {
    pub fn is_valid(&self) -> bool {
        self.position_var
            .iter()
            .chain(std::iter::once(&self.rotation_var))
            .all(|v| *v > T::zero() && v.is_finite())
    }

    /// Raises every variance to at least the module floors.
    pub fn floored(&self) -> Self {
        Self {
            position_var: self.position_var.map(|v| v.max(lit(POSITION_VARIANCE_FLOOR))),
            rotation_var: self.rotation_var.max(lit(ROTATION_VARIANCE_FLOOR)),
            source: self.source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionModel<T: Real> {
    /// Std of the Vicon-minus-KUKA position difference per axis, m.
    pub position_sigma: Vector3<T>,
    /// Std of the angle between the two reconstructions, rad.
    pub rotation_sigma: T,
    pub confidence_multiplier: T,
}

impl<T: Real> RejectionModel<T> {
    pub fn is_valid(&self) -> bool {
        self.position_sigma.iter().all(|s| *s > T::zero())
            && self.rotation_sigma > T::zero()
            && self.confidence_multiplier > T::zero()
    }

    pub fn with_multiplier(&self, confidence_multiplier: T) -> Self {
        Self {
            confidence_multiplier,
            ..*self
        }
    }
}

/// Which components of a Vicon reconstruction exceeded their gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RejectionFlags {
    pub position: [bool; 3],
    pub rotation: bool,
}

impl RejectionFlags {
    pub fn any(&self) -> bool {
        self.rotation || self.position.iter().any(|f| *f)
    }

    /// Names of the violated components, e.g. `["position.x", "rotation"]`.
    pub fn names(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = ["position.x", "position.y", "position.z"]
            .iter()
            .zip(self.position)
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect();
        if self.rotation {
            out.push("rotation");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RejectionDecision {
    pub accepted: bool,
    pub flags: RejectionFlags,
}

/// Vicon half of a calibration profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViconCalibration<T: Real> {
    pub offsets: OffsetPair<T>,
    pub variance: VarianceModel<T>,
    pub rejection: RejectionModel<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileMetadata {
    /// `YYYY-MM-DD`.
    pub date: String,
    pub sample_count: usize,
    pub camera_id: String,
}

/// Everything needed to label new samples. `vicon` is `None` when the
/// calibration data carried no Vicon chains; fusion is then disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile<T: Real> {
    pub kuka_offsets: OffsetPair<T>,
    pub kuka_variance: VarianceModel<T>,
    pub vicon: Option<ViconCalibration<T>>,
    pub metadata: ProfileMetadata,
}

impl<T: Real> CalibrationProfile<T> {
    pub fn is_valid(&self) -> bool {
        self.kuka_variance.is_valid()
            && self
                .vicon
                .as_ref()
                .is_none_or(|v| v.variance.is_valid() && v.rejection.is_valid())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Fused,
    KukaOnly,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Fused => "FUSED",
            Provenance::KukaOnly => "KUKA_ONLY",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FUSED" => Ok(Provenance::Fused),
            "KUKA_ONLY" => Ok(Provenance::KukaOnly),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPoseLabel<T: Real> {
    pub sample_id: SampleId,
    pub pose: RigidTransform<T>,
    pub provenance: Provenance,
    pub fused_position_var: Vector3<T>,
    pub fused_rotation_var: T,
    /// Present when a Vicon reconstruction was gated.
    pub rejection: Option<RejectionFlags>,
    /// Set when the rotation mean was degenerate and KUKA was used instead.
    pub degenerate_mean: bool,
}

/// Sample variances of the reconstructed poses about the reference poses,
/// with an `N − 1` denominator. Samples missing from either map are skipped.
/// Zero variances are reported as [`FusionError::ZeroVariance`].
pub fn estimate_variances<T: Real>(
    truth: &BTreeMap<SampleId, RigidTransform<T>>,
    reconstructed: &BTreeMap<SampleId, RigidTransform<T>>,
    source: Source,
) -> Result<VarianceModel<T>, FusionError> {
    let model = sample_variances(truth, reconstructed, source)?;
    if model.rotation_var == T::zero() || model.position_var.iter().any(|v| *v == T::zero()) {
        return Err(FusionError::ZeroVariance { tag: source });
    }
    Ok(model)
}

/// Like [`estimate_variances`] but lets zero variances through, for callers
/// that floor them.
pub fn sample_variances<T: Real>(
    truth: &BTreeMap<SampleId, RigidTransform<T>>,
    reconstructed: &BTreeMap<SampleId, RigidTransform<T>>,
    source: Source,
) -> Result<VarianceModel<T>, FusionError> {
    let mut sum_pos = Vector3::zeros();
    let mut sum_rot = T::zero();
    let mut n = 0usize;
    for (id, est) in reconstructed {
        let Some(reference) = truth.get(id) else {
            continue;
        };
        let d = est.translation - reference.translation;
        sum_pos += d.component_mul(&d);
        let angle = geodesic_angle(&est.rotation, &reference.rotation);
        sum_rot += angle * angle;
        n += 1;
    }
    if n < 2 {
        return Err(FusionError::InsufficientSamples { count: n });
    }
    let denom: T = lit((n - 1) as f64);
    Ok(VarianceModel {
        position_var: sum_pos / denom,
        rotation_var: sum_rot / denom,
        source,
    })
}

/// Per-axis inverse-variance weighted mean and its variance.
pub fn fuse_position<T: Real>(
    z_k: &Vector3<T>,
    z_v: &Vector3<T>,
    var_k: &Vector3<T>,
    var_v: &Vector3<T>,
) -> (Vector3<T>, Vector3<T>) {
    let mut mean = Vector3::zeros();
    let mut var = Vector3::zeros();
    for i in 0..3 {
        let (s1, s2) = (var_k[i], var_v[i]);
        let (lo, hi) = if z_k[i] <= z_v[i] { (z_k[i], z_v[i]) } else { (z_v[i], z_k[i]) };
        // Rounding can leave [lo, hi] by an ulp.
        mean[i] = ((s2 * z_k[i] + s1 * z_v[i]) / (s1 + s2)).clamp(lo, hi);
        var[i] = T::one() / (T::one() / s1 + T::one() / s2);
    }
    (mean, var)
}

/// `(w_K, w_V)` with `w_K = var_v / (var_k + var_v)`.
pub fn rotation_weights<T: Real>(var_k: T, var_v: T) -> (T, T) {
    let w_k = var_v / (var_k + var_v);
    (w_k, T::one() - w_k)
}

pub fn fuse_rotation<T: Real>(
    r_k: &RotationMatrix<T>,
    r_v: &RotationMatrix<T>,
    var_k: T,
    var_v: T,
) -> Result<RotationMatrix<T>, FusionError> {
    if !(var_k > T::zero() && var_v > T::zero()) {
        return Err(FusionError::InvalidVariance);
    }
    let (w_k, w_v) = rotation_weights(var_k, var_v);
    Ok(weighted_rotation_mean(&[*r_k, *r_v], &[w_k, w_v])?)
}

/// Gates a Vicon reconstruction against the KUKA one.
pub fn check_rejection<T: Real>(
    pose_k: &RigidTransform<T>,
    pose_v: &RigidTransform<T>,
    model: &RejectionModel<T>,
) -> RejectionDecision {
    let m = model.confidence_multiplier;
    let d = pose_v.translation - pose_k.translation;
    let mut flags = RejectionFlags::default();
    for i in 0..3 {
        flags.position[i] = d[i].abs() > m * model.position_sigma[i];
    }
    flags.rotation = geodesic_angle(&pose_k.rotation, &pose_v.rotation) > m * model.rotation_sigma;
    RejectionDecision {
        accepted: !flags.any(),
        flags,
    }
}

/// Spread of Vicon reconstructions about KUKA ones over the calibration
/// samples: zero-mean standard deviations with an `N − 1` denominator, floored
/// at the square roots of the variance floors.
pub fn fit_rejection_model<T: Real>(
    kuka: &BTreeMap<SampleId, RigidTransform<T>>,
    vicon: &BTreeMap<SampleId, RigidTransform<T>>,
    confidence_multiplier: T,
) -> Result<RejectionModel<T>, FusionError> {
    let mut sum_pos = Vector3::zeros();
    let mut sum_rot = T::zero();
    let mut n = 0usize;
    for (id, v) in vicon {
        let Some(k) = kuka.get(id) else {
            continue;
        };
        let d = v.translation - k.translation;
        sum_pos += d.component_mul(&d);
        let angle = geodesic_angle(&k.rotation, &v.rotation);
        sum_rot += angle * angle;
        n += 1;
    }
    if n < 2 {
        return Err(FusionError::InsufficientSamples { count: n });
    }
    let denom: T = lit((n - 1) as f64);
    let pos_floor = lit::<T>(POSITION_VARIANCE_FLOOR).sqrt();
    let rot_floor = lit::<T>(ROTATION_VARIANCE_FLOOR).sqrt();
    Ok(RejectionModel {
        position_sigma: (sum_pos / denom).map(|v| v.sqrt().max(pos_floor)),
        rotation_sigma: (sum_rot / denom).sqrt().max(rot_floor),
        confidence_multiplier,
    })
}

/// Fuses two reconstructions without gating.
pub fn fuse_poses<T: Real>(
    pose_k: &RigidTransform<T>,
    pose_v: &RigidTransform<T>,
    var_k: &VarianceModel<T>,
    var_v: &VarianceModel<T>,
) -> Result<(RigidTransform<T>, Vector3<T>, T), FusionError> {
    if !(var_k.is_valid() && var_v.is_valid()) {
        return Err(FusionError::InvalidVariance);
    }
    let (t, pos_var) = fuse_position(
        &pose_k.translation,
        &pose_v.translation,
        &var_k.position_var,
        &var_v.position_var,
    );
    let r = fuse_rotation(&pose_k.rotation, &pose_v.rotation, var_k.rotation_var, var_v.rotation_var)?;
    let rot_var = T::one() / (T::one() / var_k.rotation_var + T::one() / var_v.rotation_var);
    Ok((RigidTransform::new(r, t), pos_var, rot_var))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuseOptions<T: Real> {
    /// Apply the Vicon rejection gate.
    pub gate: bool,
    /// Overrides the profile's confidence multiplier.
    pub confidence_multiplier: Option<T>,
}

impl<T: Real> Default for FuseOptions<T> {
    fn default() -> Self {
        Self {
            gate: true,
            confidence_multiplier: None,
        }
    }
}

pub fn fuse_pose_label<T: Real>(
    profile: &CalibrationProfile<T>,
    kuka: &SourceMeasurement<T>,
    vicon: Option<&SourceMeasurement<T>>,
) -> FusedPoseLabel<T> {
    fuse_pose_label_with(profile, kuka, vicon, &FuseOptions::default())
}

/// Labels one sample. Never fails: anything that prevents fusion yields a
/// KUKA-only label.
pub fn fuse_pose_label_with<T: Real>(
    profile: &CalibrationProfile<T>,
    kuka: &SourceMeasurement<T>,
    vicon: Option<&SourceMeasurement<T>>,
    opts: &FuseOptions<T>,
) -> FusedPoseLabel<T> {
    let pose_k = reconstruct_pose(&profile.kuka_offsets, kuka);
    let kuka_only = FusedPoseLabel {
        sample_id: kuka.sample_id,
        pose: pose_k,
        provenance: Provenance::KukaOnly,
        fused_position_var: profile.kuka_variance.position_var,
        fused_rotation_var: profile.kuka_variance.rotation_var,
        rejection: None,
        degenerate_mean: false,
    };
    let (Some(cal), Some(vicon)) = (profile.vicon.as_ref(), vicon) else {
        return kuka_only;
    };
    let pose_v = reconstruct_pose(&cal.offsets, vicon);
    if opts.gate {
        let model = match opts.confidence_multiplier {
            Some(m) => cal.rejection.with_multiplier(m),
            None => cal.rejection,
        };
        let decision = check_rejection(&pose_k, &pose_v, &model);
        if !decision.accepted {
            return FusedPoseLabel {
                rejection: Some(decision.flags),
                ..kuka_only
            };
        }
    }
    match fuse_poses(&pose_k, &pose_v, &profile.kuka_variance, &cal.variance) {
        Ok((pose, fused_position_var, fused_rotation_var)) => FusedPoseLabel {
            pose,
            provenance: Provenance::Fused,
            fused_position_var,
            fused_rotation_var,
            ..kuka_only
        },
        Err(_) => FusedPoseLabel {
            degenerate_mean: true,
            ..kuka_only
        },
    }
}
