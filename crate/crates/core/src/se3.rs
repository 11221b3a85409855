//! Rotations and rigid transformations.
//!
//! Conventions: a transform `T_BA` maps coordinates expressed in frame `B`
//! into frame `A`, `x_A = R_BA * x_B + t`. Composition `a.compose(&b)` is the
//! homogeneous product `a * b`, so `T_CA = T_BA.compose(&T_CB)`.
//!
//! Rotations are stored as matrices. Rotation vectors (axis times angle,
//! radians) only appear as optimization parameters.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use std::ops::Mul;
use thiserror::Error;

use crate::scalar::{lit, to_f64, Real};

/// Below this angle the Rodrigues map uses its first-order expansion.
const SMALL_ANGLE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("matrix is not a rotation (orthonormality error {orthonormality_error:.3e}, det {det:.6})")]
    NotARotation { orthonormality_error: f64, det: f64 },
    #[error("rotation mean needs at least one rotation")]
    EmptyInput,
    #[error("{rotations} rotations but {weights} weights")]
    LengthMismatch { rotations: usize, weights: usize },
    #[error("weights must be finite, non-negative and sum to a positive value")]
    InvalidWeights,
    #[error("weighted rotation sum is singular; the inputs are maximally spread")]
    DegenerateMean,
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a x b`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
fn vee_antisymmetric<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half: T = lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Largest absolute entry of `mᵀm - I`.
pub fn orthonormality_error<T: Real>(m: &Matrix3<T>) -> T {
    (m.transpose() * m - Matrix3::identity()).amax()
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix<T: Real>(Matrix3<T>);

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking orthonormality and determinant against `tol`.
    pub fn try_new(m: Matrix3<T>, tol: T) -> Result<Self, Se3Error> {
        let err = orthonormality_error(&m);
        let det = m.determinant();
        if !(err <= tol) || !((det - T::one()).abs() <= tol) {
            return Err(Se3Error::NotARotation {
                orthonormality_error: to_f64(err),
                det: to_f64(det),
            });
        }
        Ok(Self(m))
    }

    /// Wraps `m` without validation. The caller guarantees it is a rotation.
    pub fn new_unchecked(m: Matrix3<T>) -> Self {
        Self(m)
    }

    /// Nearest rotation in the Frobenius sense (polar factor of `m`).
    ///
    /// Fails when `m` is singular or orientation-reversing, since no proper
    /// rotation is a meaningful repair for a reflection.
    pub fn nearest(m: &Matrix3<T>) -> Result<Self, Se3Error> {
        let det = m.determinant();
        if !(det > T::zero()) {
            return Err(Se3Error::NotARotation {
                orthonormality_error: to_f64(orthonormality_error(m)),
                det: to_f64(det),
            });
        }
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        Ok(Self(u * v_t))
    }

    /// Rotation by `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        RotationVector(axis.normalize() * angle).to_matrix()
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<T> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.0 * v
    }

    /// Logarithm map onto the canonical rotation vector, `‖r‖ ∈ [0, π]`.
    ///
    /// At exactly π the axis sign is ambiguous; the returned axis then has
    /// its first nonzero component positive.
    pub fn to_rotation_vector(&self) -> RotationVector<T> {
        let m = &self.0;
        let cos = ((m.trace() - T::one()) * lit(0.5)).clamp(-T::one(), T::one());
        let v = vee_antisymmetric(m);
        let sin = v.norm();
        let theta = sin.atan2(cos);

        if cos > lit(-0.9) {
            if sin == T::zero() {
                return RotationVector(Vector3::zeros());
            }
            return RotationVector(v * (theta / sin));
        }

        // Near π the antisymmetric part vanishes; read the axis off the
        // symmetric part, uuᵀ = (S - cos I) / (1 - cos).
        let sym = (m + m.transpose()) * lit::<T>(0.5);
        let outer = (sym - Matrix3::identity() * cos) / (T::one() - cos);
        let k = outer.diagonal().imax();
        let mut axis: Vector3<T> = outer.column(k).into_owned() / outer[(k, k)].max(T::zero()).sqrt();
        axis.normalize_mut();

        let along = axis.dot(&v);
        let tie = T::default_epsilon() * lit(1e3);
        if along.abs() > tie {
            if along < T::zero() {
                axis = -axis;
            }
        } else if let Some(first) = axis.iter().copied().find(|c| c.abs() > tie) {
            if first < T::zero() {
                axis = -axis;
            }
        }
        RotationVector(axis * theta)
    }
}

impl<T: Real> Mul for RotationMatrix<T> {
    type Output = RotationMatrix<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

/// Axis-angle rotation vector: direction is the axis, norm the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector<T: Real>(pub Vector3<T>);

impl<T: Real> RotationVector<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn angle(&self) -> T {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vector3<T> {
        &self.0
    }

    /// Exponential map (Rodrigues formula).
    pub fn to_matrix(&self) -> RotationMatrix<T> {
        let r = &self.0;
        let theta = r.norm();
        if theta < lit(SMALL_ANGLE) {
            return RotationMatrix(Matrix3::identity() + skew(r));
        }
        let u = r / theta;
        let (sin, cos) = theta.sin_cos();
        RotationMatrix(
            Matrix3::identity() * cos + (u * u.transpose()) * (T::one() - cos) + skew(&u) * sin,
        )
    }

    /// Right Jacobian of the exponential map.
    ///
    /// For a point `p`, `d(R(r) p)/dr = -R(r) skew(p) J_r(r)`.
    pub fn right_jacobian(&self) -> Matrix3<T> {
        let r = &self.0;
        let theta2 = r.norm_squared();
        let k = skew(r);
        let k2 = k * k;
        if theta2 < lit(1e-10) {
            return Matrix3::identity() - k * lit::<T>(0.5) + k2 * lit::<T>(1.0 / 6.0);
        }
        let theta = theta2.sqrt();
        let (sin, cos) = theta.sin_cos();
        Matrix3::identity() - k * ((T::one() - cos) / theta2)
            + k2 * ((theta - sin) / (theta2 * theta))
    }
}

/// Element of SE(3): rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: RotationMatrix<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn new(rotation: RotationMatrix<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(RotationMatrix::identity(), translation)
    }

    pub fn from_rotation(rotation: RotationMatrix<T>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a transform from optimization parameters.
    pub fn from_parameters(rotation: &RotationVector<T>, translation: Vector3<T>) -> Self {
        Self::new(rotation.to_matrix(), translation)
    }

    /// `self * other` as homogeneous matrices.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            translation: -rt.rotate(&self.translation),
            rotation: rt,
        }
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    /// Frobenius norm of the difference of the two homogeneous matrices.
    pub fn frobenius_distance(&self, other: &Self) -> T {
        let dr = (self.rotation.matrix() - other.rotation.matrix()).norm_squared();
        let dt = (self.translation - other.translation).norm_squared();
        (dr + dt).sqrt()
    }
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

impl<'a, T: Real> Mul<&'a RigidTransform<T>> for &'a RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: &'a RigidTransform<T>) -> Self::Output {
        self.compose(rhs)
    }
}

/// Angle of the relative rotation `aᵀb`, in radians.
///
/// Equal to `arccos((tr(aᵀb) - 1) / 2)`, evaluated as the `atan2` of the
/// antisymmetric and symmetric parts of `aᵀb` so that it stays accurate near
/// 0 and π and returns exactly zero for identical inputs.
pub fn geodesic_angle<T: Real>(a: &RotationMatrix<T>, b: &RotationMatrix<T>) -> T {
    let relative = a.matrix().transpose() * b.matrix();
    let cos = ((relative.trace() - T::one()) * lit(0.5)).clamp(-T::one(), T::one());
    let sin = vee_antisymmetric(&relative).norm();
    sin.atan2(cos)
}

/// Weighted chordal L2 mean on SO(3).
///
/// Minimizes `Σ wᵢ ‖R - Rᵢ‖_F²`. The minimizer is the polar factor of
/// `R̄ = Σ wᵢ Rᵢ`, computed as `R̄ U D^(-1/2) Uᵀ` from the eigendecomposition
/// `R̄ᵀR̄ = U D Uᵀ`. Weights are normalized internally, so only their ratios
/// matter.
pub fn weighted_rotation_mean<T: Real>(
    rotations: &[RotationMatrix<T>],
    weights: &[T],
) -> Result<RotationMatrix<T>, Se3Error> {
    if rotations.is_empty() {
        return Err(Se3Error::EmptyInput);
    }
    if rotations.len() != weights.len() {
        return Err(Se3Error::LengthMismatch {
            rotations: rotations.len(),
            weights: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return Err(Se3Error::InvalidWeights);
    }
    let total = weights.iter().fold(T::zero(), |acc, w| acc + *w);
    if !(total > T::zero()) {
        return Err(Se3Error::InvalidWeights);
    }

    let sum = rotations
        .iter()
        .zip(weights)
        .fold(Matrix3::zeros(), |acc, (r, w)| acc + r.matrix() * (*w / total));

    let gram = sum.transpose() * sum;
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let singular_tol = T::default_epsilon() * lit(1e4);
    if !(max > T::zero()) || min <= singular_tol * max {
        return Err(Se3Error::DegenerateMean);
    }

    if sum.determinant() < T::zero() {
        // The polar factor is a reflection here; flip the weakest singular
        // direction to land back on SO(3).
        let svd = sum.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = Matrix3::identity();
        let weakest = svd.singular_values.imin();
        s[(weakest, weakest)] = -T::one();
        return Ok(RotationMatrix(u * s * v_t));
    }

    let inv_sqrt = Matrix3::from_diagonal(&eig.eigenvalues.map(|d| T::one() / d.sqrt()));
    let u = eig.eigenvectors;
    Ok(RotationMatrix(sum * u * inv_sqrt * u.transpose()))
}

/// Weighted chordal cost `Σ wᵢ ‖R - Rᵢ‖_F²`.
pub fn chordal_cost<T: Real>(r: &RotationMatrix<T>, rotations: &[RotationMatrix<T>], weights: &[T]) -> T {
    rotations
        .iter()
        .zip(weights)
        .fold(T::zero(), |acc, (ri, w)| {
            acc + *w * (r.matrix() - ri.matrix()).norm_squared()
        })
}
