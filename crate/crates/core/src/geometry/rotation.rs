//! Rotation angle, random rotation sampling and Z-Y-X Euler angles.

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::seed::RngSeed;
use crate::error::{RegError, Result};
use crate::scalar::Real;

/// `acos` with the argument clamped to `[-1, 1]`.
#[inline]
pub fn clamped_acos<T: Real>(x: T) -> T {
    x.clamp(-T::one(), T::one()).acos()
}

/// Rotation angle of `r` in degrees, in `[0, 180]`.
///
/// Equals `acos((tr R - 1) / 2)`; evaluated as `atan2(sin, cos)` with the sine
/// taken from the skew part of `R`, which keeps full precision near 0° and 180°.
pub fn rotation_angle_deg<T: Real>(r: &Matrix3<T>) -> T {
    rotation_angle_rad(r).to_degrees()
}

pub fn rotation_angle_rad<T: Real>(r: &Matrix3<T>) -> T {
    let cos = ((r.trace() - T::one()) / T::lit(2.0)).clamp(-T::one(), T::one());
    let axis = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = (axis.norm() / T::lit(2.0)).min(T::one());
    sin.atan2(cos)
}

/// Samples a random rotation.
///
/// `max_angle_deg >= 360` means unrestricted: the result is Haar-uniform on
/// SO(3) (normalized Gaussian quaternion). Otherwise the axis is uniform on
/// the sphere and the angle uniform in `[0, min(max_angle_deg, 180)]`.
pub fn random_rotation<T: Real>(max_angle_deg: f64, seed: RngSeed) -> Result<Matrix3<T>> {
    if !(0.0..=360.0).contains(&max_angle_deg) {
        return Err(RegError::InvalidInput(format!(
            "max rotation angle must be in [0, 360], got {max_angle_deg}"
        )));
    }
    let mut rng = seed.rng();
    if max_angle_deg >= 360.0 {
        return Ok(haar_rotation(&mut rng).map(|c| T::lit(c)));
    }
    if max_angle_deg == 0.0 {
        return Ok(Matrix3::identity());
    }
    let axis = unit_sphere(&mut rng);
    let angle = rng.random_range(0.0..=max_angle_deg.min(180.0)).to_radians();
    let r = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle);
    Ok(r.matrix().map(|c| T::lit(c)))
}

pub(crate) fn unit_sphere<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn haar_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: Quaternion<f64> = Quaternion::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if q.norm() > 1e-12 {
            return *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        }
    }
}

/// Intrinsic Z-Y-X Euler angles in degrees: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerZyx<T: Real> {
    pub yaw: T,
    pub pitch: T,
    pub roll: T,
    /// Pitch within 1e-6 degrees of ±90°. Roll is pinned to 0 on this branch.
    pub gimbal_lock: bool,
}

impl<T: Real> EulerZyx<T> {
    pub fn as_array(&self) -> [T; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

pub fn euler_from_rotation<T: Real>(r: &Matrix3<T>) -> EulerZyx<T> {
    let s = (-r[(2, 0)]).clamp(-T::one(), T::one());
    let pitch = s.asin();
    let gimbal_lock = (pitch.to_degrees().abs() - T::lit(90.0)).abs() <= T::lit(1e-6);
    let (yaw, roll) = if gimbal_lock {
        // Only yaw - roll (or yaw + roll) is observable; report it all as yaw.
        (
            (-r[(0, 1)]).atan2(r[(1, 1)]),
            T::zero(),
        )
    } else {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    };
    EulerZyx {
        yaw: yaw.to_degrees(),
        pitch: pitch.to_degrees(),
        roll: roll.to_degrees(),
        gimbal_lock,
    }
}

pub fn rotation_from_euler<T: Real>(yaw_deg: T, pitch_deg: T, roll_deg: T) -> Matrix3<T> {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians());
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch_deg.to_radians());
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), roll_deg.to_radians());
    (rz * ry * rx).into_inner()
}
