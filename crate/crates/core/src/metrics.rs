//! Registration error metrics and their dataset-level aggregation.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{RegError, Result};
use crate::geometry::{euler_from_rotation, rotation_angle_deg, PointCloud, RigidTransform};
use crate::kdtree::KdTree;
use crate::scalar::Real;

/// Geodesic angle between two rotations, `acos((tr(R_gt⁻¹ R_pred) - 1) / 2)`, in degrees.
pub fn error_rot_isotropic<T: Real>(r_pred: &Matrix3<T>, r_gt: &Matrix3<T>) -> T {
    rotation_angle_deg(&(r_gt.transpose() * r_pred))
}

/// `‖R_gt⁻¹ (t_pred - t_gt)‖₁`.
pub fn error_trans_isotropic<T: Real>(
    t_pred: &Vector3<T>,
    r_gt: &Matrix3<T>,
    t_gt: &Vector3<T>,
) -> T {
    (r_gt.transpose() * (t_pred - t_gt)).lp_norm(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerMae<T> {
    pub degrees: T,
    /// Either rotation sat at the Z-Y-X gimbal lock.
    pub gimbal_lock: bool,
}

/// Mean absolute difference of the Z-Y-X Euler angles, in degrees.
pub fn mae_euler<T: Real>(r_pred: &Matrix3<T>, r_gt: &Matrix3<T>) -> EulerMae<T> {
    let a = euler_from_rotation(r_pred);
    let b = euler_from_rotation(r_gt);
    let sum = a
        .as_array()
        .iter()
        .zip(b.as_array())
        .fold(T::zero(), |acc, (x, y)| acc + (*x - y).abs());
    EulerMae {
        degrees: sum / T::lit(3.0),
        gimbal_lock: a.gimbal_lock || b.gimbal_lock,
    }
}

pub fn mae_trans<T: Real>(t_pred: &Vector3<T>, t_gt: &Vector3<T>) -> T {
    (t_pred - t_gt).lp_norm(1) / T::lit(3.0)
}

/// Composite challenge score: rotation error in radians plus translation error.
pub fn challenge_mse<T: Real>(error_r_deg: T, error_t: T) -> T {
    error_r_deg.to_radians() + error_t
}

/// Symmetric chamfer distance with squared nearest-neighbour distances.
pub fn chamfer_distance<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(RegError::InvalidInput("chamfer distance of an empty cloud".into()));
    }
    let ta = KdTree::build(a);
    let tb = KdTree::build(b);
    Ok(chamfer_with_trees(a, &ta, b, &tb))
}

pub(crate) fn one_sided_chamfer<T: Real>(from: &PointCloud<T>, to: &KdTree<T>) -> T {
    let sum = from
        .iter()
        .map(|p| to.nearest(p).map(|n| n.dist2).unwrap_or_else(T::zero))
        .fold(T::zero(), |acc, d| acc + d);
    sum / T::from_usize_lossy(from.len())
}

pub(crate) fn chamfer_with_trees<T: Real>(
    a: &PointCloud<T>,
    ta: &KdTree<T>,
    b: &PointCloud<T>,
    tb: &KdTree<T>,
) -> T {
    one_sided_chamfer(a, tb) + one_sided_chamfer(b, ta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics<T> {
    pub error_r_deg: T,
    pub error_t: T,
    pub mae_r_deg: T,
    pub mae_t: T,
    pub mse: T,
    pub gimbal_lock: bool,
}

impl<T: Real> PairMetrics<T> {
    pub fn evaluate(pred: &RigidTransform<T>, gt: &RigidTransform<T>) -> Self {
        let error_r_deg = error_rot_isotropic(pred.rotation(), gt.rotation());
        let error_t = error_trans_isotropic(pred.translation(), gt.rotation(), gt.translation());
        let mae = mae_euler(pred.rotation(), gt.rotation());
        Self {
            error_r_deg,
            error_t,
            mae_r_deg: mae.degrees,
            mae_t: mae_trans(pred.translation(), gt.translation()),
            mse: challenge_mse(error_r_deg, error_t),
            gimbal_lock: mae.gimbal_lock,
        }
    }

    fn columns(&self) -> [T; 5] {
        [self.error_r_deg, self.error_t, self.mae_r_deg, self.mae_t, self.mse]
    }
}

/// One evaluated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord<T> {
    pub category: u32,
    pub pair_id: String,
    pub metrics: PairMetrics<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SummaryKey {
    Category(u32),
    Total,
}

impl std::fmt::Display for SummaryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SummaryKey::Category(c) => write!(f, "{c}"),
            SummaryKey::Total => f.write_str("total"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow<T> {
    pub key: SummaryKey,
    pub count: usize,
    pub error_r_deg: T,
    pub error_t: T,
    pub mae_r_deg: T,
    pub mae_t: T,
    pub mse: T,
}

/// Arithmetic means per category (ascending) followed by a `total` row.
///
/// Records are summed in (category, pair_id) order so the result does not
/// depend on the order they were produced in.
pub fn summarize<T: Real>(records: &[MetricsRecord<T>]) -> Vec<SummaryRow<T>> {
    let mut sorted: Vec<&MetricsRecord<T>> = records.iter().collect();
    sorted.sort_by(|a, b| (a.category, &a.pair_id).cmp(&(b.category, &b.pair_id)));

    let mut groups: BTreeMap<u32, Vec<&MetricsRecord<T>>> = BTreeMap::new();
    for r in &sorted {
        groups.entry(r.category).or_default().push(r);
    }
    let mut rows: Vec<SummaryRow<T>> = groups
        .into_iter()
        .map(|(cat, recs)| mean_row(SummaryKey::Category(cat), &recs))
        .collect();
    if !sorted.is_empty() {
        rows.push(mean_row(SummaryKey::Total, &sorted));
    }
    rows
}

fn mean_row<T: Real>(key: SummaryKey, recs: &[&MetricsRecord<T>]) -> SummaryRow<T> {
    let mut acc = [T::zero(); 5];
    for r in recs {
        for (a, v) in acc.iter_mut().zip(r.metrics.columns()) {
            *a += v;
        }
    }
    let n = T::from_usize_lossy(recs.len().max(1));
    let [error_r_deg, error_t, mae_r_deg, mae_t, mse] = acc.map(|s| s / n);
    SummaryRow {
        key,
        count: recs.len(),
        error_r_deg,
        error_t,
        mae_r_deg,
        mae_t,
        mse,
    }
}

/// Median of a slice of finite values (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}
