//! Partial-overlap point cloud registration: two independent pipelines
//! (soft-correspondence refinement and descriptor RANSAC) plus a rule-based
//! fusion step that picks between them per pair.
//!
//! Numeric code is generic over [`scalar::Real`]; the aliases below fix the
//! common cases.

pub mod alignment;
pub mod batch;
pub mod config;
pub mod correspondence;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod pipeline_a;
pub mod pipeline_b;
pub mod scalar;

pub type PointCloudF64 = geometry::PointCloud<f64>;
pub type PointCloudF32 = geometry::PointCloud<f32>;
pub type TransformF64 = geometry::RigidTransform<f64>;
pub type TransformF32 = geometry::RigidTransform<f32>;
