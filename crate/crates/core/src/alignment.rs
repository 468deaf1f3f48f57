//! Closed-form rigid alignment, principal-axes coarse initialization and
//! overlap measures between aligned clouds.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{RegError, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::kdtree::KdTree;
use crate::metrics::chamfer_with_trees;
use crate::scalar::Real;

/// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Real> {
    pub source_index: usize,
    pub target: Vector3<T>,
    pub weight: T,
}

/// Weighted source-index to target-point pairings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet<T: Real> {
    pub pairs: Vec<Correspondence<T>>,
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn new(pairs: Vec<Correspondence<T>>) -> Self {
        Self { pairs }
    }

    /// Pairs `src[i] -> tgt_points[i]` with unit weight.
    pub fn from_matched(targets: &[Vector3<T>]) -> Self {
        Self {
            pairs: targets
                .iter()
                .enumerate()
                .map(|(i, t)| Correspondence {
                    source_index: i,
                    target: *t,
                    weight: T::one(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.weight > T::zero()).count()
    }

    pub fn validate(&self, source_len: usize) -> Result<()> {
        for (k, p) in self.pairs.iter().enumerate() {
            if !(p.weight.is_finite() && p.weight >= T::zero()) {
                return Err(RegError::InvalidWeights(format!(
                    "pair {k} has weight {:?}",
                    p.weight
                )));
            }
            if p.source_index >= source_len {
                return Err(RegError::InvalidInput(format!(
                    "pair {k} references source point {} of {source_len}",
                    p.source_index
                )));
            }
            if !p.target.iter().all(|c| c.is_finite()) {
                return Err(RegError::InvalidInput(format!("pair {k} target is not finite")));
            }
        }
        Ok(())
    }

    /// Weighted mean squared residual of `t` over the pairs.
    pub fn weighted_residual(&self, src: &PointCloud<T>, t: &RigidTransform<T>) -> T {
        let (mut num, mut den) = (T::zero(), T::zero());
        for p in &self.pairs {
            num += p.weight * (t.apply_point(&src[p.source_index]) - p.target).norm_squared();
            den += p.weight;
        }
        if den > T::zero() {
            num / den
        } else {
            T::zero()
        }
    }
}

/// Minimizer over SE(3) of `Σ wᵢ ‖R xᵢ + t − yᵢ‖²`.
///
/// Needs at least 3 positively weighted pairs whose points are not all
/// collinear. Planar configurations (including exactly three points) are fine.
pub fn weighted_kabsch<T: Real>(
    src: &PointCloud<T>,
    corr: &CorrespondenceSet<T>,
) -> Result<RigidTransform<T>> {
    corr.validate(src.len())?;
    let total: T = corr.pairs.iter().fold(T::zero(), |a, p| a + p.weight);
    if total <= T::zero() {
        return Err(RegError::InvalidWeights("all weights are zero".into()));
    }
    if corr.positive_count() < 3 {
        return Err(RegError::DegenerateGeometry(format!(
            "need at least 3 positively weighted pairs, got {}",
            corr.positive_count()
        )));
    }

    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for p in &corr.pairs {
        let w = p.weight / total;
        mu_s += src[p.source_index] * w;
        mu_t += p.target * w;
    }

    // H = Σ w (x - μx)(y - μy)ᵀ
    let mut h = Matrix3::zeros();
    for p in &corr.pairs {
        let w = p.weight / total;
        let xs = src[p.source_index] - mu_s;
        let yt = p.target - mu_t;
        h += xs * (yt * w).transpose();
    }

    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let (s_max, s_mid) = sorted_top_two(&sv);
    if s_max <= T::zero() || s_mid < T::lit(RANK_TOLERANCE) * s_max {
        return Err(RegError::DegenerateGeometry(
            "weighted cross-covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < T::zero() {
        // flip the direction of the smallest singular value
        let k = argmin(&sv);
        d[(k, k)] = -T::one();
    }
    let r = v * d * u.transpose();
    let t = mu_t - r * mu_s;
    Ok(RigidTransform::from_parts_unchecked(r, t))
}

fn sorted_top_two<T: Real>(sv: &Vector3<T>) -> (T, T) {
    let mut v = [sv[0], sv[1], sv[2]];
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    (v[0], v[1])
}

fn argmin<T: Real>(sv: &Vector3<T>) -> usize {
    let mut k = 0;
    for i in 1..3 {
        if sv[i] < sv[k] {
            k = i;
        }
    }
    k
}

/// Result of the principal-axes initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseAlignment<T: Real> {
    pub transform: RigidTransform<T>,
    /// Index into the four proper sign hypotheses; `None` on the degenerate fallback.
    pub hypothesis: Option<usize>,
    /// Chamfer distance of each hypothesis (empty when degenerate).
    pub chamfers: Vec<T>,
    /// Two principal variances coincide; rotation fell back to identity.
    pub degenerate: bool,
}

/// Principal axes of a cloud: centroid, eigenvalues (descending) and the
/// matching unit eigenvectors as columns.
fn principal_axes<T: Real>(cloud: &PointCloud<T>) -> (Vector3<T>, Vector3<T>, Matrix3<T>) {
    let c = cloud.centroid();
    let mut cov = Matrix3::zeros();
    for p in cloud {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= T::from_usize_lossy(cloud.len());
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vals = Vector3::new(
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    );
    let mut vecs = Matrix3::zeros();
    for (col, &i) in idx.iter().enumerate() {
        vecs.set_column(col, &eig.eigenvectors.column(i));
    }
    (c, vals, vecs)
}

fn has_repeated_eigenvalue<T: Real>(vals: &Vector3<T>) -> bool {
    let tol = T::lit(1e-9) * vals[0].abs().max(T::lit(f64::MIN_POSITIVE));
    (vals[0] - vals[1]).abs() <= tol || (vals[1] - vals[2]).abs() <= tol
}

/// Sign patterns `diag(s)` tried by the coarse initializer, in evaluation order.
const SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, -1.0, -1.0],
];

/// The four proper rotations mapping source principal axes onto target axes,
/// in fixed order.
pub fn principal_axis_hypotheses<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
) -> Vec<RigidTransform<T>> {
    let (cs, _, es) = principal_axes(src);
    let (ct, _, et) = principal_axes(tgt);
    hypotheses_from_axes(&cs, &es, &ct, &et)
}

fn hypotheses_from_axes<T: Real>(
    cs: &Vector3<T>,
    es: &Matrix3<T>,
    ct: &Vector3<T>,
    et: &Matrix3<T>,
) -> Vec<RigidTransform<T>> {
    let mut out = Vec::with_capacity(4);
    for s in SIGNS {
        let d = Matrix3::from_diagonal(&Vector3::new(T::lit(s[0]), T::lit(s[1]), T::lit(s[2])));
        let r = et * d * es.transpose();
        if r.determinant() > T::zero() {
            // Re-orthonormalize away eigen-solver round-off.
            let r = nearest_rotation(&r);
            out.push(RigidTransform::from_parts_unchecked(r, ct - r * cs));
        }
    }
    out
}

/// Projection of a near-rotation onto SO(3).
pub(crate) fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("U");
    let v_t = svd.v_t.expect("Vᵀ");
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u2 = u;
        let k = argmin(&svd.singular_values);
        let col = -u2.column(k);
        u2.set_column(k, &col);
        r = u2 * v_t;
    }
    r
}

/// Centroid plus principal-axes initializer scored by chamfer distance.
pub fn coarse_align<T: Real>(src: &PointCloud<T>, tgt: &PointCloud<T>) -> Result<CoarseAlignment<T>> {
    src.require_at_least(3, "coarse alignment source")?;
    tgt.require_at_least(3, "coarse alignment target")?;
    let tgt_tree = KdTree::build(tgt);
    Ok(coarse_align_with_tree(src, tgt, &tgt_tree))
}

pub(crate) fn coarse_align_with_tree<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
) -> CoarseAlignment<T> {
    let (cs, vs, es) = principal_axes(src);
    let (ct, vt, et) = principal_axes(tgt);
    if has_repeated_eigenvalue(&vs) || has_repeated_eigenvalue(&vt) {
        return CoarseAlignment {
            transform: RigidTransform::from_translation(ct - cs),
            hypothesis: None,
            chamfers: Vec::new(),
            degenerate: true,
        };
    }
    let hyps = hypotheses_from_axes(&cs, &es, &ct, &et);
    let chamfers: Vec<T> = hyps
        .iter()
        .map(|h| {
            let moved = h.apply(src);
            let moved_tree = KdTree::build(&moved);
            chamfer_with_trees(&moved, &moved_tree, tgt, tgt_tree)
        })
        .collect();
    let mut best = 0;
    for (i, c) in chamfers.iter().enumerate() {
        if *c < chamfers[best] {
            best = i;
        }
    }
    CoarseAlignment {
        transform: hyps[best],
        hypothesis: Some(best),
        chamfers,
        degenerate: false,
    }
}

/// Per-source-point overlap likelihood in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapScores<T> {
    pub scores: Vec<T>,
}

impl<T: Real> OverlapScores<T> {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `exp(-dᵢ / σ)` with `dᵢ` the distance from aligned source point `i` to the
/// nearest target point.
pub fn overlap_scores<T: Real>(
    src_aligned: &PointCloud<T>,
    tgt: &PointCloud<T>,
    sigma: T,
) -> Result<OverlapScores<T>> {
    if !(sigma > T::zero()) {
        return Err(RegError::InvalidInput(format!("sigma must be > 0, got {sigma:?}")));
    }
    if tgt.is_empty() {
        return Err(RegError::InvalidInput("empty target".into()));
    }
    Ok(overlap_scores_with_tree(src_aligned, &KdTree::build(tgt), sigma))
}

pub(crate) fn overlap_scores_with_tree<T: Real>(
    src_aligned: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    sigma: T,
) -> OverlapScores<T> {
    OverlapScores {
        scores: src_aligned
            .iter()
            .map(|p| {
                let d = tgt_tree.nearest(p).map(|n| n.dist2.sqrt()).unwrap_or_else(T::zero);
                (-d / sigma).exp()
            })
            .collect(),
    }
}

/// Fraction of `T·src` points whose nearest target point lies within `tau`.
pub fn overlap_ratio<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    transform: &RigidTransform<T>,
    tau: T,
) -> Result<T> {
    if !(tau > T::zero()) {
        return Err(RegError::InvalidInput(format!("tau must be > 0, got {tau:?}")));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(RegError::InvalidInput("empty cloud".into()));
    }
    Ok(overlap_ratio_with_tree(src, &KdTree::build(tgt), transform, tau))
}

pub(crate) fn overlap_ratio_with_tree<T: Real>(
    src: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    transform: &RigidTransform<T>,
    tau: T,
) -> T {
    let tau2 = tau * tau;
    let hits = src
        .iter()
        .filter(|p| {
            tgt_tree
                .nearest(&transform.apply_point(p))
                .is_some_and(|n| n.dist2 <= tau2)
        })
        .count();
    T::from_usize_lossy(hits) / T::from_usize_lossy(src.len())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::geometry::{random_rotation, RngSeed};
    use crate::metrics::{error_rot_isotropic, error_trans_isotropic};

    fn random_cloud(seed: u64, n: usize) -> PointCloud<f64> {
        let mut rng = RngSeed(seed).rng();
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.1..0.1),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_transform(seed: u64) -> RigidTransform<f64> {
        let mut rng = RngSeed(seed).derive(9).rng();
        RigidTransform::new(
            random_rotation(360.0, RngSeed(seed)).unwrap(),
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
        )
        .unwrap()
    }

    fn exact_corr(src: &PointCloud<f64>, t: &RigidTransform<f64>) -> CorrespondenceSet<f64> {
        CorrespondenceSet::from_matched(t.apply(src).points())
    }

    #[test]
    fn self_correspondence_gives_identity() {
        let src = random_cloud(1, 40);
        let t = weighted_kabsch(&src, &CorrespondenceSet::from_matched(src.points())).unwrap();
        assert!((t.rotation() - Matrix3::identity()).amax() < 1e-9);
        assert!(t.translation().amax() < 1e-9);
    }

    #[test]
    fn recovers_known_transform() {
        for s in 0..100 {
            let src = random_cloud(s, 64);
            let gt = random_transform(s + 1000);
            let est = weighted_kabsch(&src, &exact_corr(&src, &gt)).unwrap();
            let e = error_rot_isotropic(est.rotation(), gt.rotation());
            assert!(e < 1e-6, "seed {s}: {e}");
            assert!(error_trans_isotropic(est.translation(), gt.rotation(), gt.translation()) < 1e-9);
        }
    }

    #[test]
    fn zero_weight_outliers_are_ignored() {
        let src = random_cloud(3, 25);
        let gt = random_transform(4);
        let mut corr = exact_corr(&src, &gt);
        for p in corr.pairs.iter_mut().skip(20) {
            p.target += Vector3::new(3.0, -2.0, 1.0);
            p.weight = 0.0;
        }
        let est = weighted_kabsch(&src, &corr).unwrap();
        assert!(error_rot_isotropic(est.rotation(), gt.rotation()) < 1e-6);
        assert!(error_trans_isotropic(est.translation(), gt.rotation(), gt.translation()) < 1e-9);
    }

    #[test]
    fn three_points_and_planar_input_solve() {
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let gt = random_transform(8);
        let est = weighted_kabsch(&src, &exact_corr(&src, &gt)).unwrap();
        assert!(error_rot_isotropic(est.rotation(), gt.rotation()) < 1e-6);
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_reported() {
        let line = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
            .unwrap();
        let corr = CorrespondenceSet::from_matched(line.points());
        assert!(matches!(
            weighted_kabsch(&line, &corr),
            Err(RegError::DegenerateGeometry(_))
        ));
        let src = random_cloud(2, 10);
        let mut zero = CorrespondenceSet::from_matched(src.points());
        zero.pairs.iter_mut().for_each(|p| p.weight = 0.0);
        assert!(matches!(weighted_kabsch(&src, &zero), Err(RegError::InvalidWeights(_))));
        let mut neg = CorrespondenceSet::from_matched(src.points());
        neg.pairs[0].weight = -1.0;
        assert!(matches!(weighted_kabsch(&src, &neg), Err(RegError::InvalidWeights(_))));
        let mut two = CorrespondenceSet::from_matched(src.points());
        two.pairs.iter_mut().skip(2).for_each(|p| p.weight = 0.0);
        assert!(matches!(weighted_kabsch(&src, &two), Err(RegError::DegenerateGeometry(_))));
    }

    #[test]
    fn uniform_weight_scaling_is_invisible() {
        let mut rng = RngSeed(77).rng();
        for s in 0..50 {
            let src = random_cloud(s, 30);
            let gt = random_transform(s + 7);
            let mut corr = exact_corr(&src, &gt);
            for p in corr.pairs.iter_mut() {
                p.target += Vector3::new(rng.random(), rng.random(), rng.random()) * 0.05;
                p.weight = rng.random_range(0.1..2.0);
            }
            let a = weighted_kabsch(&src, &corr).unwrap();
            let mut scaled = corr.clone();
            scaled.pairs.iter_mut().for_each(|p| p.weight *= 37.5);
            let b = weighted_kabsch(&src, &scaled).unwrap();
            assert!((a.rotation() - b.rotation()).amax() < 1e-12);
            assert!((a.translation() - b.translation()).amax() < 1e-12);
        }
    }

    #[test]
    fn near_planar_noisy_input_keeps_proper_rotation() {
        let mut rng = RngSeed(5).rng();
        for s in 0..200 {
            let mut pts: Vec<_> = random_cloud(s, 20).into_points();
            pts.iter_mut().for_each(|p| p.z *= 1e-7);
            let src = PointCloud::new(pts).unwrap();
            let gt = random_transform(s + 3);
            let mut corr = exact_corr(&src, &gt);
            corr.pairs
                .iter_mut()
                .for_each(|p| p.target += Vector3::new(rng.random(), rng.random(), rng.random()) * 0.2);
            let est = weighted_kabsch(&src, &corr).unwrap();
            assert!((est.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn coarse_align_identical_clouds() {
        let c = random_cloud(11, 200);
        let ca = coarse_align(&c, &c).unwrap();
        assert!(!ca.degenerate);
        assert_eq!(ca.chamfers.len(), 4);
        let moved = ca.transform.apply(&c);
        assert!(crate::metrics::chamfer_distance(&moved, &c).unwrap() < 1e-20);
    }

    #[test]
    fn coarse_align_picks_minimum_chamfer_hypothesis() {
        for s in 0..20 {
            let src = random_cloud(s, 150);
            let gt = random_transform(s + 50);
            let tgt = gt.apply(&src);
            let ca = coarse_align(&src, &tgt).unwrap();
            // enumerate hypotheses independently and score them
            let scores: Vec<f64> = principal_axis_hypotheses(&src, &tgt)
                .iter()
                .map(|h| crate::metrics::chamfer_distance(&h.apply(&src), &tgt).unwrap())
                .collect();
            let best = ca.hypothesis.unwrap();
            for (i, sc) in scores.iter().enumerate() {
                if i != best {
                    assert!(scores[best] < *sc, "seed {s}: hyp {best} vs {i}");
                }
            }
            assert!(error_rot_isotropic(ca.transform.rotation(), gt.rotation()) < 1e-6);
        }
    }

    #[test]
    fn coarse_align_flags_isotropic_cloud() {
        // All signed permutations of (0.1, 0.2, 0.3): an exactly isotropic
        // spherical point design.
        let base = [0.1, 0.2, 0.3];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut pts = Vec::new();
        for p in perms {
            for s in SIGNS {
                pts.push(Vector3::new(s[0] * base[p[0]], s[1] * base[p[1]], s[2] * base[p[2]]));
            }
        }
        let sphere = PointCloud::new(pts).unwrap();
        let offset = Vector3::new(0.2, -0.1, 0.4);
        let tgt = RigidTransform::from_translation(offset).apply(&sphere);
        let ca = coarse_align(&sphere, &tgt).unwrap();
        assert!(ca.degenerate);
        assert!(ca.hypothesis.is_none());
        assert!((ca.transform.translation() - offset).amax() < 1e-12);
        assert_eq!(*ca.transform.rotation(), Matrix3::identity());
    }

    #[test]
    fn overlap_score_formula() {
        let tgt = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]).unwrap();
        let src = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]]).unwrap();
        let s = overlap_scores(&src, &tgt, 0.05).unwrap();
        assert_eq!(s.scores[0], 1.0);
        assert!((s.scores[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!(overlap_scores(&src, &tgt, 0.0).is_err());
    }

    #[test]
    fn overlap_ratio_bounds_and_monotonicity() {
        let c = random_cloud(21, 300);
        let gt = random_transform(22);
        let tgt = gt.apply(&c);
        assert_eq!(overlap_ratio(&c, &tgt, &gt, 0.05).unwrap(), 1.0);
        let far = RigidTransform::from_translation(Vector3::new(10.0, 0.0, 0.0)).compose(&gt);
        assert_eq!(overlap_ratio(&c, &tgt, &far, 0.05).unwrap(), 0.0);
        let off = RigidTransform::from_translation(Vector3::new(0.03, 0.0, 0.0)).compose(&gt);
        let mut prev = f64::INFINITY;
        for k in (1..=40).rev() {
            let r = overlap_ratio(&c, &tgt, &off, k as f64 * 0.005).unwrap();
            assert!(r <= prev);
            prev = r;
        }
        assert!(overlap_ratio(&c, &tgt, &gt, -1.0).is_err());
    }
}
