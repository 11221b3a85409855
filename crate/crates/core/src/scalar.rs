//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;

/// Floating point scalar usable by the calibration math: `f32` or `f64`.
///
/// All tolerances quoted in the documentation assume `f64`; `f32` works but
/// loses roughly eight digits.
pub trait Real: RealField + Copy {}

impl<T: RealField + Copy> Real for T {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lossy conversion back to `f64`, used for error payloads and reports.
#[inline]
pub(crate) fn to_f64<T: Real>(x: T) -> f64 {
    nalgebra::try_convert(x).unwrap_or(f64::NAN)
}
