//! Points, rigid transforms, rotation utilities and seeded randomness.

mod cloud;
mod rotation;
mod seed;
mod transform;

pub use cloud::{Point3, PointCloud};
pub use rotation::{
    clamped_acos, euler_from_rotation, random_rotation, rotation_angle_deg, rotation_angle_rad, rotation_from_euler,
    EulerZyx,
};
pub(crate) use rotation::unit_sphere;
pub use seed::RngSeed;
pub use transform::{apply_transform, compose, invert, is_rotation, so3_tolerance, RigidTransform};
