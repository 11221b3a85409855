//! Random rotations and reference poses.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};
use poseforge_core::camera::{board_corners_in_target, project, BoardSpec, CameraModel};
use poseforge_core::se3::{RigidTransform, RotationMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scenario::PoseSampler;

/// Draws after which a board-facing pose is accepted even if a corner leaves
/// the image.
const MAX_ATTEMPTS: usize = 10_000;

/// Uniform (Haar) random rotation from a normalized Gaussian quaternion.
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix<f64> {
    loop {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = q.norm();
        if n > 1e-9 {
            let uq = UnitQuaternion::from_quaternion(Quaternion::from(q / n));
            return RotationMatrix::new_unchecked(*uq.to_rotation_matrix().matrix());
        }
    }
}

/// Unit vector uniform on the spherical cap of half-angle `max_angle`
/// around `axis`.
pub fn cap_direction<R: Rng + ?Sized>(rng: &mut R, axis: &Vector3<f64>, max_angle: f64) -> Vector3<f64> {
    let cos_min = max_angle.cos();
    let cos_t: f64 = rng.random_range(cos_min..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let a = axis.normalize();
    let (u, v) = orthonormal_basis(&a);
    a * cos_t + (u * phi.cos() + v * phi.sin()) * sin_t
}

/// Two unit vectors completing `a` to a right-handed orthonormal basis.
fn orthonormal_basis(a: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = a.cross(&helper).normalize();
    let v = a.cross(&u);
    (u, v)
}

/// Angle between the camera boresight and the board's normal, rad.
pub fn board_tilt(board: &BoardSpec<f64>, pose: &RigidTransform<f64>) -> f64 {
    // Boresight expressed in the target frame is the third row of R_TC.
    let boresight = pose.rotation.matrix().row(2).transpose();
    let normal = board.board_to_target.rotation.rotate(&Vector3::z());
    (-boresight.dot(&normal)).clamp(-1.0, 1.0).acos()
}

pub fn board_center(board: &BoardSpec<f64>) -> Vector3<f64> {
    let s = board.square_size;
    board.board_to_target.transform_point(&Vector3::new(
        s * board.squares_x as f64 / 2.0,
        s * board.squares_y as f64 / 2.0,
        0.0,
    ))
}

fn all_corners_visible(camera: &CameraModel<f64>, board: &BoardSpec<f64>, pose: &RigidTransform<f64>) -> bool {
    let (w, h) = (camera.width as f64, camera.height as f64);
    board_corners_in_target(board).iter().all(|(_, p)| {
        project(camera, pose, p)
            .map(|px: Vector2<f64>| px.x >= 0.0 && px.x <= w && px.y >= 0.0 && px.y <= h)
            .unwrap_or(false)
    })
}

fn board_facing<R: Rng + ?Sized>(
    rng: &mut R,
    camera: &CameraModel<f64>,
    board: &BoardSpec<f64>,
    range: (f64, f64),
    max_tilt: f64,
    aim_jitter: f64,
) -> RigidTransform<f64> {
    let normal = board.board_to_target.rotation.rotate(&Vector3::z());
    let (bu, bv) = (
        board.board_to_target.rotation.rotate(&Vector3::x()),
        board.board_to_target.rotation.rotate(&Vector3::y()),
    );
    let center = board_center(board);
    let mut pose = RigidTransform::identity();
    for _ in 0..MAX_ATTEMPTS {
        let boresight = cap_direction(rng, &-normal, max_tilt);
        let roll: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let distance: f64 = rng.random_range(range.0..=range.1);
        let jitter = if aim_jitter > 0.0 {
            bu * rng.random_range(-aim_jitter..=aim_jitter) + bv * rng.random_range(-aim_jitter..=aim_jitter)
        } else {
            Vector3::zeros()
        };
        let aim = center + jitter;
        let (u, v) = orthonormal_basis(&boresight);
        let x_axis = u * roll.cos() + v * roll.sin();
        let y_axis = boresight.cross(&x_axis);
        // Camera axes in the target frame; R_TC is its transpose.
        let axes = Matrix3::from_columns(&[x_axis, y_axis, boresight]);
        let rotation = RotationMatrix::new_unchecked(axes.transpose());
        let position = aim - boresight * distance;
        pose = RigidTransform::new(rotation, -rotation.rotate(&position));
        if all_corners_visible(camera, board, &pose) {
            break;
        }
    }
    pose
}

fn full_orientation<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64), max_off_axis: f64) -> RigidTransform<f64> {
    let rotation = uniform_rotation(rng);
    let direction = cap_direction(rng, &Vector3::z(), max_off_axis);
    let distance: f64 = rng.random_range(range.0..=range.1);
    RigidTransform::new(rotation, direction * distance)
}

/// One reference camera-from-target pose `T_TC`.
pub fn sample_pose<R: Rng + ?Sized>(
    rng: &mut R,
    sampler: &PoseSampler,
    camera: &CameraModel<f64>,
    board: &BoardSpec<f64>,
) -> RigidTransform<f64> {
    match *sampler {
        PoseSampler::BoardFacing {
            min_range,
            max_range,
            max_tilt_deg,
            aim_jitter,
        } => board_facing(
            rng,
            camera,
            board,
            (min_range, max_range),
            max_tilt_deg.to_radians(),
            aim_jitter,
        ),
        PoseSampler::FullOrientation {
            min_range,
            max_range,
            max_off_axis_deg,
        } => full_orientation(rng, (min_range, max_range), max_off_axis_deg.to_radians()),
    }
}
