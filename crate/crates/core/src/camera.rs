//! Pinhole camera with Brown–Conrady lens distortion and planar board geometry.

use nalgebra::{Matrix2, Matrix2x3, SMatrix, Vector2, Vector3};
use thiserror::Error;

use crate::scalar::{lit, to_f64, Real};
use crate::se3::RigidTransform;

/// Minimum camera-frame depth (meters) for a point to be projectable.
pub const MIN_DEPTH: f64 = 1e-6;

/// Number of intrinsic parameters when they are optimized:
/// `fx, fy, cx, cy, k1, k2, p1, p2, k3`.
pub const INTRINSIC_PARAMS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid board: {0}")]
    InvalidBoard(String),
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },
    #[error("feature id {0} does not exist on the board")]
    UnknownFeature(u32),
    #[error("feature {feature_id} pixel ({u:.1}, {v:.1}) lies outside the image margin")]
    PixelOutOfBounds { feature_id: u32, u: f64, v: f64 },
}

/// Radial-tangential distortion coefficients in OpenCV order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion<T: Real> {
    pub k1: T,
    pub k2: T,
    pub p1: T,
    pub p2: T,
    pub k3: T,
}

impl<T: Real> Distortion<T> {
    pub fn none() -> Self {
        Self::from_array([T::zero(); 5])
    }

    /// `[k1, k2, p1, p2, k3]`.
    pub fn from_array(d: [T; 5]) -> Self {
        Self {
            k1: d[0],
            k2: d[1],
            p1: d[2],
            p2: d[3],
            k3: d[4],
        }
    }

    pub fn to_array(&self) -> [T; 5] {
        [self.k1, self.k2, self.p1, self.p2, self.k3]
    }

    /// Maps an ideal normalized image point to its distorted position.
    pub fn apply(&self, p: &Vector2<T>) -> Vector2<T> {
        let (x, y) = (p.x, p.y);
        let two: T = lit(2.0);
        let r2 = x * x + y * y;
        let radial = T::one() + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        Vector2::new(
            x * radial + two * self.p1 * x * y + self.p2 * (r2 + two * x * x),
            y * radial + self.p1 * (r2 + two * y * y) + two * self.p2 * x * y,
        )
    }

    /// Jacobian of [`Distortion::apply`] with respect to the ideal point.
    pub fn jacobian(&self, p: &Vector2<T>) -> Matrix2<T> {
        let (x, y) = (p.x, p.y);
        let two: T = lit(2.0);
        let r2 = x * x + y * y;
        let radial = T::one() + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        // d(radial)/d(r2)
        let dradial = self.k1 + r2 * (two * self.k2 + lit::<T>(3.0) * r2 * self.k3);
        let dxx = radial + two * x * x * dradial + two * self.p1 * y + lit::<T>(6.0) * self.p2 * x;
        let dxy = two * x * y * dradial + two * self.p1 * x + two * self.p2 * y;
        let dyx = two * x * y * dradial + two * self.p1 * x + two * self.p2 * y;
        let dyy = radial + two * y * y * dradial + lit::<T>(6.0) * self.p1 * y + two * self.p2 * x;
        Matrix2::new(dxx, dxy, dyx, dyy)
    }

    /// Inverts [`Distortion::apply`] with Newton iterations.
    pub fn remove(&self, distorted: &Vector2<T>) -> Vector2<T> {
        let mut p = *distorted;
        for _ in 0..50 {
            let err = self.apply(&p) - distorted;
            if err.amax() < lit(1e-15) {
                break;
            }
            match self.jacobian(&p).try_inverse() {
                Some(inv) => p -= inv * err,
                None => break,
            }
        }
        p
    }
}

/// Pinhole intrinsics, distortion and image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub distortion: Distortion<T>,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraModel<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        distortion: Distortion<T>,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let model = Self {
            fx,
            fy,
            cx,
            cy,
            distortion,
            width,
            height,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let (w, h): (T, T) = (lit(self.width as f64), lit(self.height as f64));
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(CameraError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                to_f64(self.cx),
                to_f64(self.cy),
                self.width,
                self.height
            )));
        }
        if self.distortion.to_array().iter().any(|d| !d.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(
                "distortion coefficients must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Intrinsics as an optimization vector, see [`INTRINSIC_PARAMS`].
    pub fn to_params(&self) -> [T; INTRINSIC_PARAMS] {
        let d = self.distortion.to_array();
        [self.fx, self.fy, self.cx, self.cy, d[0], d[1], d[2], d[3], d[4]]
    }

    /// Inverse of [`CameraModel::to_params`]; image size is kept from `self`.
    pub fn with_params(&self, p: &[T]) -> Self {
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            distortion: Distortion::from_array([p[4], p[5], p[6], p[7], p[8]]),
            width: self.width,
            height: self.height,
        }
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, p: &Vector3<T>) -> Result<Vector2<T>, CameraError> {
        if !(p.z > lit(MIN_DEPTH)) {
            return Err(CameraError::BehindCamera { depth: to_f64(p.z) });
        }
        let ideal = Vector2::new(p.x / p.z, p.y / p.z);
        let d = self.distortion.apply(&ideal);
        Ok(Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy))
    }

    /// Projection together with its derivatives with respect to the
    /// camera-frame point (2x3) and the intrinsic vector (2x9).
    pub fn project_camera_point_with_jacobians(
        &self,
        p: &Vector3<T>,
    ) -> Result<(Vector2<T>, Matrix2x3<T>, SMatrix<T, 2, INTRINSIC_PARAMS>), CameraError> {
        if !(p.z > lit(MIN_DEPTH)) {
            return Err(CameraError::BehindCamera { depth: to_f64(p.z) });
        }
        let inv_z = T::one() / p.z;
        let ideal = Vector2::new(p.x * inv_z, p.y * inv_z);
        let d = self.distortion.apply(&ideal);
        let pixel = Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy);

        let d_ideal = Matrix2x3::new(
            inv_z,
            T::zero(),
            -ideal.x * inv_z,
            T::zero(),
            inv_z,
            -ideal.y * inv_z,
        );
        let focal = Matrix2::new(self.fx, T::zero(), T::zero(), self.fy);
        let d_point = focal * self.distortion.jacobian(&ideal) * d_ideal;

        let (x, y) = (ideal.x, ideal.y);
        let two: T = lit(2.0);
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let (fx, fy) = (self.fx, self.fy);
        let (o, z) = (T::one(), T::zero());
        #[rustfmt::skip]
        let d_intr = SMatrix::<T, 2, INTRINSIC_PARAMS>::from_row_slice(&[
            d.x, z, o, z, fx * x * r2, fx * x * r4, fx * two * x * y, fx * (r2 + two * x * x), fx * x * r6,
            z, d.y, z, o, fy * y * r2, fy * y * r4, fy * (r2 + two * y * y), fy * two * x * y, fy * y * r6,
        ]);
        Ok((pixel, d_point, d_intr))
    }

    /// Normalized, undistorted image coordinates of a pixel.
    pub fn unproject_normalized(&self, pixel: &Vector2<T>) -> Vector2<T> {
        let distorted = Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy);
        self.distortion.remove(&distorted)
    }

    /// True when the pixel lies inside the image extended by a 10% margin.
    pub fn within_margin(&self, pixel: &Vector2<T>) -> bool {
        let (w, h): (T, T) = (lit(self.width as f64), lit(self.height as f64));
        let (mx, my) = (w * lit(0.1), h * lit(0.1));
        pixel.x >= -mx && pixel.x <= w + mx && pixel.y >= -my && pixel.y <= h + my
    }
}

/// Projects a target-frame point through the camera-from-target pose.
pub fn project<T: Real>(
    model: &CameraModel<T>,
    pose: &RigidTransform<T>,
    point: &Vector3<T>,
) -> Result<Vector2<T>, CameraError> {
    model.project_camera_point(&pose.transform_point(point))
}

/// Planar chessboard-style calibration pattern mounted on the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardSpec<T: Real> {
    pub squares_x: u32,
    pub squares_y: u32,
    /// Edge length of one square, meters.
    pub square_size: T,
    /// Maps board-frame coordinates into the target frame.
    pub board_to_target: RigidTransform<T>,
}

impl<T: Real> BoardSpec<T> {
    pub fn new(
        squares_x: u32,
        squares_y: u32,
        square_size: T,
        board_to_target: RigidTransform<T>,
    ) -> Result<Self, CameraError> {
        let spec = Self {
            squares_x,
            squares_y,
            square_size,
            board_to_target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.squares_x < 3 || self.squares_y < 3 {
            return Err(CameraError::InvalidBoard(format!(
                "need at least 3x3 squares, got {}x{}",
                self.squares_x, self.squares_y
            )));
        }
        if !(self.square_size > T::zero()) {
            return Err(CameraError::InvalidBoard("square size must be positive".into()));
        }
        Ok(())
    }

    /// Interior corners per row.
    fn corners_x(&self) -> u32 {
        self.squares_x - 1
    }

    pub fn corner_count(&self) -> usize {
        ((self.squares_x - 1) * (self.squares_y - 1)) as usize
    }

    pub fn contains(&self, feature_id: u32) -> bool {
        (feature_id as usize) < self.corner_count()
    }

    /// Corner position in the board frame (z = 0 plane).
    pub fn corner_in_board(&self, feature_id: u32) -> Option<Vector3<T>> {
        if !self.contains(feature_id) {
            return None;
        }
        let col = feature_id % self.corners_x() + 1;
        let row = feature_id / self.corners_x() + 1;
        Some(Vector3::new(
            self.square_size * lit(col as f64),
            self.square_size * lit(row as f64),
            T::zero(),
        ))
    }

    pub fn corner_in_target(&self, feature_id: u32) -> Option<Vector3<T>> {
        self.corner_in_board(feature_id)
            .map(|p| self.board_to_target.transform_point(&p))
    }
}

/// All interior corners in the target frame, row-major ids starting at 0.
pub fn board_corners_in_target<T: Real>(spec: &BoardSpec<T>) -> Vec<(u32, Vector3<T>)> {
    (0..spec.corner_count() as u32)
        .map(|id| (id, spec.corner_in_target(id).expect("id in range")))
        .collect()
}

/// A detected board corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation<T: Real> {
    pub feature_id: u32,
    pub pixel: Vector2<T>,
}

impl<T: Real> FeatureObservation<T> {
    pub fn new(feature_id: u32, u: T, v: T) -> Self {
        Self {
            feature_id,
            pixel: Vector2::new(u, v),
        }
    }

    pub fn validate(&self, camera: &CameraModel<T>, board: &BoardSpec<T>) -> Result<(), CameraError> {
        if !board.contains(self.feature_id) {
            return Err(CameraError::UnknownFeature(self.feature_id));
        }
        if !camera.within_margin(&self.pixel) {
            return Err(CameraError::PixelOutOfBounds {
                feature_id: self.feature_id,
                u: to_f64(self.pixel.x),
                v: to_f64(self.pixel.y),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::RotationVector;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn camera(dist: [f64; 5]) -> CameraModel<f64> {
        CameraModel::new(1000.0, 1010.0, 500.0, 400.0, Distortion::from_array(dist), 1000, 800).unwrap()
    }

    /// Straight-line transcription of the distortion polynomial.
    fn reference_projection(c: &CameraModel<f64>, p: &Vector3<f64>) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = c.distortion.to_array();
        let x = p[0] / p[2];
        let y = p[1] / p[2];
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let factor = 1.0 + k1 * r2 + k2 * r4 + k3 * r6;
        let xd = x * factor + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * factor + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (c.fx * xd + c.cx, c.fy * yd + c.cy)
    }

    #[test]
    fn boresight_hits_principal_point() {
        let c = camera([0.0; 5]);
        for depth in [0.1, 1.0, 37.0] {
            let px = project(&c, &RigidTransform::identity(), &Vector3::new(0.0, 0.0, depth)).unwrap();
            assert_eq!(px, Vector2::new(500.0, 400.0));
        }
    }

    #[test]
    fn similar_triangles() {
        let c = CameraModel::new(1000.0, 1000.0, 500.0, 500.0, Distortion::none(), 1000, 1000).unwrap();
        let px = project(&c, &RigidTransform::identity(), &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(px.x, 600.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let c = camera([0.0; 5]);
        let err = project(&c, &RigidTransform::identity(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(CameraError::BehindCamera { .. })));
        let err = project(&c, &RigidTransform::identity(), &Vector3::new(0.0, 0.0, 1e-7));
        assert!(matches!(err, Err(CameraError::BehindCamera { .. })));
    }

    #[test]
    fn distortion_matches_reference_implementation() {
        let c = camera([-0.21, 0.09, 0.0012, -0.0007, -0.015]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.5..3.0),
            );
            let px = c.project_camera_point(&p).unwrap();
            let (u, v) = reference_projection(&c, &p);
            assert!((px.x - u).abs() < 1e-9 && (px.y - v).abs() < 1e-9);
        }
    }

    #[test]
    fn distortion_is_identity_at_center() {
        let d = Distortion::from_array([-0.3, 0.1, 0.01, 0.02, 0.05]);
        assert_eq!(d.apply(&Vector2::zeros()), Vector2::zeros());
    }

    #[test]
    fn zero_distortion_is_scale_invariant() {
        let c = camera([0.0; 5]);
        let p = Vector3::new(0.12, -0.07, 0.9);
        let a = c.project_camera_point(&p).unwrap();
        let b = c.project_camera_point(&(p * 3.7)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let c = camera([-0.21, 0.09, 0.0012, -0.0007, -0.015]);
        let p = Vector3::new(0.1, -0.15, 0.8);
        let (_, d_point, d_intr) = c.project_camera_point_with_jacobians(&p).unwrap();
        let h = 1e-7;
        for k in 0..3 {
            let mut q = p;
            q[k] += h;
            let fd = (c.project_camera_point(&q).unwrap() - c.project_camera_point(&p).unwrap()) / h;
            assert_relative_eq!(fd, d_point.column(k).into_owned(), max_relative = 1e-5, epsilon = 1e-4);
        }
        let params = c.to_params();
        for k in 0..INTRINSIC_PARAMS {
            let mut q = params;
            q[k] += h;
            let moved = c.with_params(&q);
            let fd = (moved.project_camera_point(&p).unwrap() - c.project_camera_point(&p).unwrap()) / h;
            assert_relative_eq!(fd, d_intr.column(k).into_owned(), max_relative = 1e-5, epsilon = 1e-4);
        }
    }

    #[test]
    fn unproject_inverts_distortion() {
        let c = camera([-0.21, 0.09, 0.0012, -0.0007, -0.015]);
        let p = Vector3::new(0.2, -0.15, 1.0);
        let px = c.project_camera_point(&p).unwrap();
        let n = c.unproject_normalized(&px);
        assert_relative_eq!(n, Vector2::new(0.2, -0.15), epsilon = 1e-12);
    }

    #[test]
    fn three_by_three_board() {
        let board = BoardSpec::new(3, 3, 0.1, RigidTransform::identity()).unwrap();
        let corners = board_corners_in_target(&board);
        let expected = [(0.1, 0.1), (0.2, 0.1), (0.1, 0.2), (0.2, 0.2)];
        assert_eq!(corners.len(), 4);
        for ((id, p), (i, (x, y))) in corners.iter().zip(expected.iter().enumerate()) {
            assert_eq!(*id as usize, i);
            assert_relative_eq!(*p, Vector3::new(*x, *y, 0.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn eleven_by_eleven_board() {
        let board = BoardSpec::new(11, 11, 0.03, RigidTransform::identity()).unwrap();
        let corners = board_corners_in_target(&board);
        assert_eq!(corners.len(), 100);
        let max = corners.iter().map(|(_, p)| p.amax()).fold(0.0, f64::max);
        assert_relative_eq!(max, 0.30, epsilon = 1e-12);
    }

    #[test]
    fn board_translation_shifts_corners() {
        let shift = Vector3::new(0.5, -0.2, 0.03);
        let base = BoardSpec::new(5, 4, 0.04, RigidTransform::identity()).unwrap();
        let moved = BoardSpec::new(5, 4, 0.04, RigidTransform::from_translation(shift)).unwrap();
        for ((ia, a), (ib, b)) in board_corners_in_target(&base).iter().zip(board_corners_in_target(&moved).iter()) {
            assert_eq!(ia, ib);
            assert_relative_eq!(*a + shift, *b, epsilon = 1e-15);
        }
        let rotated = BoardSpec::new(
            7,
            6,
            0.03,
            RigidTransform::from_parameters(&RotationVector::new(0.1, 0.2, 0.3), shift),
        )
        .unwrap();
        assert_eq!(board_corners_in_target(&rotated).len(), 6 * 5);
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(CameraModel::new(-1.0, 1.0, 1.0, 1.0, Distortion::none(), 10, 10).is_err());
        assert!(CameraModel::new(1.0, 1.0, 10.0, 1.0, Distortion::none(), 10, 10).is_err());
        assert!(BoardSpec::new(2, 5, 0.1, RigidTransform::<f64>::identity()).is_err());
        assert!(BoardSpec::new(4, 5, 0.0, RigidTransform::<f64>::identity()).is_err());
    }

    #[test]
    fn observation_validation() {
        let c = camera([0.0; 5]);
        let board = BoardSpec::new(3, 3, 0.1, RigidTransform::identity()).unwrap();
        assert!(FeatureObservation::new(3, 10.0, 10.0).validate(&c, &board).is_ok());
        assert!(FeatureObservation::new(1, -90.0, 10.0).validate(&c, &board).is_ok());
        assert_eq!(
            FeatureObservation::new(4, 10.0, 10.0).validate(&c, &board),
            Err(CameraError::UnknownFeature(4))
        );
        assert!(matches!(
            FeatureObservation::new(0, 1200.0, 10.0).validate(&c, &board),
            Err(CameraError::PixelOutOfBounds { .. })
        ));
    }
}
