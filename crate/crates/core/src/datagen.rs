//! Synthetic partial-view pair generation with planted ground truth.
//!
//! A complete shape is sampled procedurally, two partial views are cut from
//! it by half-space crops along two view directions, and the source view is
//! moved by the inverse of a random ground-truth pose. Both views share the
//! underlying surface samples, so the overlap mask is exact.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::geometry::{random_rotation, unit_sphere, PointCloud, RigidTransform, RngSeed};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    RandomBlob,
    /// Flat rectangular patch.
    Plane,
    /// Capped cylinder, rotationally symmetric about its axis.
    Cylinder,
    /// Box with a square cross-section, 4-fold symmetric about its long axis.
    Box,
    /// Blob with an attached box and handle; no symmetry.
    Composite,
}

impl ShapeKind {
    pub fn is_ambiguous(self) -> bool {
        matches!(self, ShapeKind::Plane | ShapeKind::Cylinder | ShapeKind::Box)
    }
}

/// Rotation regime: level 0 draws angles in [0°, 45°], level 1 is unrestricted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RotLevel {
    #[serde(rename = "0")]
    Bounded,
    #[serde(rename = "1")]
    Unrestricted,
}

impl RotLevel {
    pub fn max_angle_deg(self) -> f64 {
        match self {
            RotLevel::Bounded => 45.0,
            RotLevel::Unrestricted => 360.0,
        }
    }

    pub fn from_index(level: u8) -> Result<Self> {
        match level {
            0 => Ok(RotLevel::Bounded),
            1 => Ok(RotLevel::Unrestricted),
            other => Err(RegError::InvalidInput(format!("rot_level must be 0 or 1, got {other}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            RotLevel::Bounded => 0,
            RotLevel::Unrestricted => 1,
        }
    }
}

/// Shape assigned to each of the 16 synthetic categories.
///
/// Category 1 is planar, 4 and 9 rotationally symmetric, 6 and 15
/// axisymmetric; the rest are asymmetric blobs and composites.
pub const CATEGORY_SHAPES: [ShapeKind; 16] = [
    ShapeKind::RandomBlob,
    ShapeKind::Plane,
    ShapeKind::RandomBlob,
    ShapeKind::Composite,
    ShapeKind::Cylinder,
    ShapeKind::RandomBlob,
    ShapeKind::Box,
    ShapeKind::Composite,
    ShapeKind::RandomBlob,
    ShapeKind::Cylinder,
    ShapeKind::RandomBlob,
    ShapeKind::Composite,
    ShapeKind::RandomBlob,
    ShapeKind::RandomBlob,
    ShapeKind::Composite,
    ShapeKind::Box,
];

pub const DEFAULT_NOISE_CLIP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub shape: ShapeKind,
    pub rot_level: RotLevel,
    pub overlap_target: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub points_per_cloud: usize,
    /// Half-width of the uniform translation box.
    pub translation_range: f64,
    pub category_id: u32,
    pub seed: RngSeed,
}

impl PairSpec {
    pub fn new(shape: ShapeKind, rot_level: RotLevel, seed: RngSeed) -> Self {
        Self {
            shape,
            rot_level,
            overlap_target: 0.7,
            noise_sigma: 0.0,
            noise_clip: DEFAULT_NOISE_CLIP,
            points_per_cloud: 512,
            translation_range: 0.5,
            category_id: CATEGORY_SHAPES.iter().position(|s| *s == shape).unwrap_or(0) as u32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_target > 0.0 && self.overlap_target <= 1.0) {
            return Err(RegError::InvalidInput(format!(
                "overlap_target must be in (0, 1], got {}",
                self.overlap_target
            )));
        }
        if self.points_per_cloud < 32 {
            return Err(RegError::InvalidInput(format!(
                "points_per_cloud must be >= 32, got {}",
                self.points_per_cloud
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(RegError::InvalidInput("noise_sigma must be >= 0".into()));
        }
        if !(self.noise_clip > 0.0) {
            return Err(RegError::InvalidInput("noise_clip must be > 0".into()));
        }
        if !(self.translation_range >= 0.0 && self.translation_range.is_finite()) {
            return Err(RegError::InvalidInput("translation_range must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair<T: Real> {
    pub src: PointCloud<T>,
    pub tgt: PointCloud<T>,
    /// Maps the source onto the target: `tgt ≈ T_gt · src`.
    pub t_gt: RigidTransform<T>,
    /// Source points whose underlying surface sample is also in the target view.
    pub overlap_mask_src: Vec<bool>,
    pub category_id: u32,
    /// Fraction of masked source points.
    pub planted_overlap: f64,
}

/// Maximum number of crop-angle evaluations when tuning the overlap.
const MAX_ATTEMPTS: usize = 100;
const OVERLAP_TOLERANCE: f64 = 0.05;

pub fn generate_pair<T: Real>(spec: &PairSpec) -> Result<GeneratedPair<T>> {
    spec.validate()?;
    let n = spec.points_per_cloud;
    // Full-shape size: each view keeps `keep` of it, so antipodal views still
    // share 2·keep − 1 < target of their points.
    let keep = if spec.overlap_target >= 1.0 {
        0.9
    } else {
        ((1.0 + spec.overlap_target) / 2.0 - 0.1).clamp(0.3, 0.9)
    };
    let n_full = ((n as f64) / keep).ceil() as usize;

    let mut shape_rng = spec.seed.derive_str("shape").rng();
    let full = sample_shape(spec.shape, spec.category_id, n_full, &mut shape_rng);

    let mut view_rng = spec.seed.derive_str("views").rng();
    let v_src = unit_sphere(&mut view_rng);
    let perp = any_perpendicular(&v_src, &mut view_rng);
    let src_idx = crop_view(&full, &v_src, n);

    let overlap_of = |theta: f64| -> (Vec<usize>, f64) {
        let axis = Unit::new_normalize(v_src.cross(&perp));
        let v_tgt = Rotation3::from_axis_angle(&axis, theta) * v_src;
        let tgt_idx = crop_view(&full, &v_tgt, n);
        let shared = count_shared(&src_idx, &tgt_idx);
        (tgt_idx, shared as f64 / n as f64)
    };

    // Overlap decreases (weakly) with the angle between the two views.
    let (mut lo, mut hi) = (0.0f64, std::f64::consts::PI);
    let (mut best_idx, mut best_ov) = overlap_of(0.0);
    let mut attempts = 1;
    while (best_ov - spec.overlap_target).abs() > 0.25 / n as f64 && attempts < MAX_ATTEMPTS {
        let mid = 0.5 * (lo + hi);
        let (idx, ov) = overlap_of(mid);
        attempts += 1;
        if (ov - spec.overlap_target).abs() < (best_ov - spec.overlap_target).abs() {
            best_idx = idx;
            best_ov = ov;
        }
        if ov > spec.overlap_target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    if (best_ov - spec.overlap_target).abs() > OVERLAP_TOLERANCE {
        return Err(RegError::OverlapUnreachable {
            target: spec.overlap_target,
            best: best_ov,
        });
    }
    let tgt_idx = best_idx;

    let mut in_tgt = vec![false; full.len()];
    for &i in &tgt_idx {
        in_tgt[i] = true;
    }
    let mask: Vec<bool> = src_idx.iter().map(|&i| in_tgt[i]).collect();

    let src_view: Vec<Vector3<f64>> = src_idx.iter().map(|&i| full[i]).collect();
    let tgt_view: Vec<Vector3<f64>> = tgt_idx.iter().map(|&i| full[i]).collect();
    let src_view = PointCloud::from_vec_unchecked(src_view);
    let tgt_view = PointCloud::from_vec_unchecked(tgt_view);
    let (src_view, tgt_view) = if spec.noise_sigma > 0.0 {
        (
            add_noise(&src_view, spec.noise_sigma, spec.noise_clip, spec.seed.derive_str("noise-src"))?,
            add_noise(&tgt_view, spec.noise_sigma, spec.noise_clip, spec.seed.derive_str("noise-tgt"))?,
        )
    } else {
        (src_view, tgt_view)
    };

    let rotation = random_rotation::<f64>(spec.rot_level.max_angle_deg(), spec.seed.derive_str("rotation"))?;
    let mut trng = spec.seed.derive_str("translation").rng();
    let r = spec.translation_range;
    let translation = if r > 0.0 {
        Vector3::new(
            trng.random_range(-r..=r),
            trng.random_range(-r..=r),
            trng.random_range(-r..=r),
        )
    } else {
        Vector3::zeros()
    };
    let t_gt = RigidTransform::new(rotation, translation)?;
    let src = t_gt.inverse().apply(&src_view);

    let planted = mask.iter().filter(|m| **m).count() as f64 / n as f64;
    Ok(GeneratedPair {
        src: src.cast(),
        tgt: tgt_view.cast(),
        t_gt: t_gt.cast(),
        overlap_mask_src: mask,
        category_id: spec.category_id,
        planted_overlap: planted,
    })
}

fn any_perpendicular(v: &Vector3<f64>, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let w = unit_sphere(rng);
        let p = w - v * v.dot(&w);
        if p.norm() > 1e-6 {
            return p.normalize();
        }
    }
}

/// Indices of the `n` points furthest along `dir`, returned in ascending index order.
fn crop_view(points: &[Vector3<f64>], dir: &Vector3<f64>, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .dot(dir)
            .total_cmp(&points[a].dot(dir))
            .then(a.cmp(&b))
    });
    let mut kept = order[..n.min(points.len())].to_vec();
    kept.sort_unstable();
    kept
}

fn count_shared(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut c) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                c += 1;
                i += 1;
                j += 1;
            }
        }
    }
    c
}

/// Samples `n` surface points of a shape, centred and scaled into the unit cube.
pub fn sample_shape(kind: ShapeKind, category: u32, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut pts = match kind {
        ShapeKind::RandomBlob => sample_blob(category, n, rng),
        ShapeKind::Plane => (0..n)
            .map(|_| Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3), 0.0))
            .collect(),
        ShapeKind::Cylinder => sample_cylinder(n, 0.25, 0.8, rng),
        ShapeKind::Box => sample_box(n, Vector3::new(0.8, 0.35, 0.35), rng),
        ShapeKind::Composite => sample_composite(category, n, rng),
    };
    normalize_into_unit_cube(&mut pts);
    pts
}

fn normalize_into_unit_cube(pts: &mut [Vector3<f64>]) {
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
    let r = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    let s = if r > 0.0 { 0.5 / r } else { 1.0 };
    for p in pts.iter_mut() {
        *p = (*p - c) * s;
    }
}

/// Tapered, bent, bumpy superellipsoid with no rotational symmetry. Axis
/// lengths, exponent, taper and bend depend on the category so shapes within
/// a category look alike; bumps vary per pair.
fn sample_blob(category: u32, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut crng = RngSeed(0xB10B).derive(u64::from(category)).rng();
    let axes = Vector3::new(
        crng.random_range(0.8..1.0),
        crng.random_range(0.5..0.7),
        crng.random_range(0.3..0.45),
    );
    let exponent = crng.random_range(0.6..1.2);
    let taper = crng.random_range(0.35..0.6);
    let bend = crng.random_range(0.25..0.45);
    let bumps: Vec<(Vector3<f64>, f64, f64)> = (0..6)
        .map(|_| {
            (
                unit_sphere(rng),
                rng.random_range(0.2..0.45),
                rng.random_range(3.0..8.0),
            )
        })
        .collect();
    (0..n)
        .map(|_| {
            let d = unit_sphere(rng);
            // superellipsoid radius along d
            let f = (d.x.abs() / axes.x).powf(2.0 / exponent)
                + (d.y.abs() / axes.y).powf(2.0 / exponent)
                + (d.z.abs() / axes.z).powf(2.0 / exponent);
            let base = f.powf(-exponent / 2.0);
            let bump: f64 = bumps
                .iter()
                .map(|(dir, amp, sharp)| amp * (sharp * (d.dot(dir) - 1.0)).exp())
                .sum();
            let p = d * base * (1.0 + bump);
            // taper the cross-section along x and bend the long axis
            let s = 1.0 + taper * p.x / axes.x;
            Vector3::new(p.x, p.y * s, p.z * s + bend * p.x * p.x)
        })
        .collect()
}

fn sample_cylinder(n: usize, radius: f64, height: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let side = 2.0 * std::f64::consts::PI * radius * height;
    let cap = std::f64::consts::PI * radius * radius;
    (0..n)
        .map(|_| {
            let u = rng.random_range(0.0..side + 2.0 * cap);
            if u < side {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                Vector3::new(
                    radius * phi.cos(),
                    radius * phi.sin(),
                    rng.random_range(-height / 2.0..height / 2.0),
                )
            } else {
                let z = if u < side + cap { height / 2.0 } else { -height / 2.0 };
                let rr = radius * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                Vector3::new(rr * phi.cos(), rr * phi.sin(), z)
            }
        })
        .collect()
}

fn sample_box(n: usize, dims: Vector3<f64>, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let h = dims / 2.0;
    let areas = [dims.y * dims.z, dims.x * dims.z, dims.x * dims.y];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    (0..n)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && u >= 2.0 * areas[axis] {
                u -= 2.0 * areas[axis];
                axis += 1;
            }
            let sign = if u < areas[axis] { 1.0 } else { -1.0 };
            let mut p = Vector3::new(
                rng.random_range(-h.x..h.x),
                rng.random_range(-h.y..h.y),
                rng.random_range(-h.z..h.z),
            );
            p[axis] = sign * h[axis];
            p
        })
        .collect()
}

fn sample_composite(category: u32, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n_blob = n * 6 / 10;
    let n_box = n * 25 / 100;
    let n_handle = n - n_blob - n_box;
    let mut pts = sample_blob(category, n_blob, rng);
    pts.extend(
        sample_box(n_box, Vector3::new(0.5, 0.25, 0.15), rng)
            .into_iter()
            .map(|p| p + Vector3::new(0.55, 0.2, 0.1)),
    );
    pts.extend(
        sample_cylinder(n_handle, 0.07, 0.6, rng)
            .into_iter()
            .map(|p| Vector3::new(p.z, p.x, p.y) + Vector3::new(-0.3, -0.45, 0.25)),
    );
    pts
}

/// Independent per-coordinate Gaussian noise, clamped to `[-clip, clip]`.
pub fn add_noise<T: Real>(cloud: &PointCloud<T>, sigma: f64, clip: f64, seed: RngSeed) -> Result<PointCloud<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(RegError::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    if !(clip > 0.0) {
        return Err(RegError::InvalidInput(format!("clip must be > 0, got {clip}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| RegError::InvalidInput(e.to_string()))?;
    let mut rng = seed.rng();
    let pts = cloud
        .iter()
        .map(|p| p.map(|c| c + T::lit(normal.sample(&mut rng).clamp(-clip, clip))))
        .collect();
    PointCloud::new(pts)
}

/// Uniform random subset of size `n` without replacement (in sampled order).
pub fn subsample<T: Real>(cloud: &PointCloud<T>, n: usize, seed: RngSeed) -> Result<PointCloud<T>> {
    if n == 0 || n > cloud.len() {
        return Err(RegError::InvalidInput(format!(
            "cannot subsample {n} points from {}",
            cloud.len()
        )));
    }
    let mut rng = seed.rng();
    let idx = index::sample(&mut rng, cloud.len(), n).into_vec();
    cloud.select(&idx)
}

/// Standard normal draw; shared with tests that need raw Gaussian samples.
#[cfg(test)]
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}
