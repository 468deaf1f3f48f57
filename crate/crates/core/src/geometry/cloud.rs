use std::ops::Index;

use nalgebra::Vector3;

use crate::error::{RegError, Result};
use crate::scalar::Real;

pub type Point3<T> = Vector3<T>;

/// Ordered, non-empty set of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    points: Vec<Point3<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(RegError::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(RegError::InvalidInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[T; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect())
    }

    /// Wraps points already known to be finite and non-empty.
    pub(crate) fn from_vec_unchecked(points: Vec<Point3<T>>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3<T>> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point3<T>> {
        self.points
    }

    pub fn centroid(&self) -> Point3<T> {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p);
        sum / T::from_usize_lossy(self.points.len())
    }

    /// New cloud holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(RegError::InvalidInput("empty selection".into()));
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or_else(|| {
                RegError::InvalidInput(format!("index {i} out of range ({})", self.len()))
            })?;
            out.push(*p);
        }
        Ok(Self { points: out })
    }

    pub fn require_at_least(&self, n: usize, what: &str) -> Result<()> {
        if self.len() < n {
            return Err(RegError::InvalidInput(format!(
                "{what} needs at least {n} points, got {}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.map(|c| U::lit(c.to_f64_lossy())))
                .collect(),
        }
    }
}

impl<T: Real> Index<usize> for PointCloud<T> {
    type Output = Point3<T>;

    fn index(&self, i: usize) -> &Point3<T> {
        &self.points[i]
    }
}

impl<'a, T: Real> IntoIterator for &'a PointCloud<T> {
    type Item = &'a Point3<T>;
    type IntoIter = std::slice::Iter<'a, Point3<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}
