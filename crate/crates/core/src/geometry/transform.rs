use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};

use super::cloud::{Point3, PointCloud};
use crate::error::{RegError, Result};
use crate::scalar::Real;

/// Per-entry tolerance for the SO(3) membership checks.
///
/// `1e-9` for `f64`; widened to a few thousand ulps for `f32`.
pub fn so3_tolerance<T: Real>() -> T {
    let eps = T::default_epsilon() * T::lit(1000.0);
    eps.max(T::lit(1e-9))
}

pub fn is_rotation<T: Real>(r: &Matrix3<T>) -> bool {
    let tol = so3_tolerance::<T>();
    let gram = r.transpose() * r;
    let ortho = (gram - Matrix3::identity()).iter().all(|e| e.abs() <= tol);
    ortho && (r.determinant() - T::one()).abs() <= tol
}

/// Element of SE(3): `x -> R x + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|c| c.is_finite()) {
            return Err(RegError::InvalidInput("transform has non-finite entries".into()));
        }
        if !is_rotation(&rotation) {
            return Err(RegError::InvalidInput(
                "rotation is not an element of SO(3)".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Caller guarantees `rotation` is in SO(3) (e.g. an SVD product with the
    /// determinant fixed).
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        debug_assert!(is_rotation(&rotation), "not a rotation: {rotation:?}");
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about `axis` (need not be unit length) by `angle_deg`.
    pub fn from_axis_angle_deg(axis: Vector3<T>, angle_deg: T, translation: Vector3<T>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_deg.to_radians());
        Self {
            rotation: rot.into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    #[inline]
    pub fn apply_point(&self, p: &Point3<T>) -> Point3<T> {
        self.rotation * p + self.translation
    }

    /// `out[i] = R cloud[i] + t`, order and cardinality preserved.
    pub fn apply(&self, cloud: &PointCloud<T>) -> PointCloud<T> {
        PointCloud::from_vec_unchecked(cloud.iter().map(|p| self.apply_point(p)).collect())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<T>) -> Result<Self> {
        let tol = so3_tolerance::<T>();
        let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - T::one()];
        if last.iter().any(|e| e.abs() > tol) {
            return Err(RegError::InvalidInput(
                "last row of a homogeneous transform must be 0 0 0 1".into(),
            ));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|c| U::lit(c.to_f64_lossy())),
            translation: self.translation.map(|c| U::lit(c.to_f64_lossy())),
        }
    }
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn apply_transform<T: Real>(cloud: &PointCloud<T>, t: &RigidTransform<T>) -> PointCloud<T> {
    t.apply(cloud)
}

pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    a.compose(b)
}

pub fn invert<T: Real>(t: &RigidTransform<T>) -> RigidTransform<T> {
    t.inverse()
}
