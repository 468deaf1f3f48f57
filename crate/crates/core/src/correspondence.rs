//! Local shape descriptors, feature-space search, partial-to-complete soft
//! matching and false-match removal.
//!
//! Descriptors are FPFH-style angular histograms built only from dot products
//! between unit normals and neighbour offsets, so they are invariant to rigid
//! motion. Radial weights and linear bin interpolation keep them continuous in
//! the point positions.

use nalgebra::{SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::alignment::{Correspondence, CorrespondenceSet, OverlapScores};
use crate::error::{RegError, Result};
use crate::geometry::{Point3, PointCloud};
use crate::kdtree::{KdTree, Neighbor};
use crate::scalar::Real;

pub const BINS_PER_FEATURE: usize = 11;
pub const DESCRIPTOR_DIM: usize = 3 * BINS_PER_FEATURE;
pub const DEFAULT_RADIUS: f64 = 0.15;
pub const DEFAULT_TEMPERATURE: f64 = 0.02;
pub const DEFAULT_RATIO: f64 = 0.9;
/// Minimum neighbour count (excluding the point itself) for a real descriptor.
const MIN_NEIGHBORS: usize = 3;

/// Unit-norm descriptors, one row per point of some cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T: Real> {
    dim: usize,
    data: Vec<T>,
    indices: Vec<usize>,
    /// Rows that fell back to the uniform descriptor.
    flagged: Vec<bool>,
}

impl<T: Real> FeatureSet<T> {
    /// Builds a set from raw rows, normalizing each to unit length.
    pub fn from_rows(rows: Vec<Vec<T>>, indices: Vec<usize>) -> Result<Self> {
        if rows.len() != indices.len() {
            return Err(RegError::InvalidInput(format!(
                "{} descriptors for {} indices",
                rows.len(),
                indices.len()
            )));
        }
        let dim = rows.first().map_or(DESCRIPTOR_DIM, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != dim || dim == 0 {
                return Err(RegError::InvalidInput(format!("descriptor {k} has dimension {}", row.len())));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(RegError::InvalidInput(format!("descriptor {k} is not finite")));
            }
            let norm = row.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
            if norm <= T::zero() {
                return Err(RegError::InvalidInput(format!("descriptor {k} is zero")));
            }
            data.extend(row.iter().map(|v| *v / norm));
        }
        let flagged = vec![false; indices.len()];
        Ok(Self {
            dim,
            data,
            indices,
            flagged,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Descriptor of row `row` (not point index).
    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Point index of each row.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_flagged(&self, row: usize) -> bool {
        self.flagged[row]
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }

    /// Rows whose point index is in `point_indices`, in that order.
    pub fn select_points(&self, point_indices: &[usize]) -> Result<Self> {
        let lookup = self.row_lookup();
        let mut out = Self {
            dim: self.dim,
            data: Vec::with_capacity(point_indices.len() * self.dim),
            indices: Vec::with_capacity(point_indices.len()),
            flagged: Vec::with_capacity(point_indices.len()),
        };
        for &p in point_indices {
            let row = lookup
                .get(p)
                .copied()
                .flatten()
                .ok_or_else(|| RegError::InvalidInput(format!("no descriptor for point {p}")))?;
            out.data.extend_from_slice(self.row(row));
            out.indices.push(p);
            out.flagged.push(self.flagged[row]);
        }
        Ok(out)
    }

    fn row_lookup(&self) -> Vec<Option<usize>> {
        let max = self.indices.iter().copied().max().map_or(0, |m| m + 1);
        let mut lookup = vec![None; max];
        for (row, &p) in self.indices.iter().enumerate() {
            lookup[p].get_or_insert(row);
        }
        lookup
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y))
}

/// Exact nearest neighbours in descriptor space by linear scan.
///
/// At the cloud sizes used here a scan over 33-dimensional rows is cheaper
/// than building a tree; ties go to the lower row.
#[derive(Debug, Clone, Copy)]
pub struct FeatureIndex<'a, T: Real> {
    feats: &'a FeatureSet<T>,
}

impl<'a, T: Real> FeatureIndex<'a, T> {
    pub fn new(feats: &'a FeatureSet<T>) -> Self {
        Self { feats }
    }

    /// Up to `k` rows nearest to `q`, sorted by (squared distance, row).
    pub fn knn(&self, q: &[T], k: usize) -> Vec<Neighbor<T>> {
        let mut best: Vec<Neighbor<T>> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        for row in 0..self.feats.len() {
            let d = dist2(q, self.feats.row(row));
            if best.len() < k || d < best[best.len() - 1].dist2 {
                let pos = best.partition_point(|n| n.dist2 <= d);
                best.insert(pos, Neighbor { index: row, dist2: d });
                best.truncate(k);
            }
        }
        best
    }

    pub fn nearest(&self, q: &[T]) -> Option<Neighbor<T>> {
        self.knn(q, 1).into_iter().next()
    }
}

/// Radial weight `1 − d²/r²`: vanishes at the ball boundary so neighbourhoods
/// change continuously.
fn radial_weight<T: Real>(d2: T, r2: T) -> T {
    (T::one() - d2 / r2).max(T::zero())
}

/// Weighted-PCA normal (unit, arbitrary sign).
fn estimate_normal<T: Real>(p: &Point3<T>, cloud: &PointCloud<T>, nbrs: &[Neighbor<T>], r2: T) -> Vector3<T> {
    let mut wsum = T::one();
    let mut mean = *p;
    for n in nbrs {
        let w = radial_weight(n.dist2, r2);
        mean += cloud[n.index] * w;
        wsum += w;
    }
    mean /= wsum;
    let mut cov = (p - mean) * (p - mean).transpose();
    for n in nbrs {
        let d = cloud[n.index] - mean;
        cov += d * d.transpose() * radial_weight(n.dist2, r2);
    }
    let eig = SymmetricEigen::new(cov);
    let mut k = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[k] {
            k = i;
        }
    }
    eig.eigenvectors.column(k).normalize()
}

fn neighborhoods<T: Real>(cloud: &PointCloud<T>, tree: &KdTree<T>, radius: T) -> Vec<Vec<Neighbor<T>>> {
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            tree.within_radius(&cloud[i], radius)
                .into_iter()
                .filter(|nb| nb.index != i && nb.dist2 > T::zero())
                .collect()
        })
        .collect()
}

fn normals_from_neighborhoods<T: Real>(
    cloud: &PointCloud<T>,
    neighborhoods: &[Vec<Neighbor<T>>],
    r2: T,
) -> Vec<Vector3<T>> {
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if neighborhoods[i].len() < MIN_NEIGHBORS {
                Vector3::z()
            } else {
                estimate_normal(&cloud[i], cloud, &neighborhoods[i], r2)
            }
        })
        .collect()
}

/// Unit surface normals (arbitrary sign) from weighted local PCA; points
/// with fewer than 3 neighbours get `+z`.
pub fn estimate_normals<T: Real>(cloud: &PointCloud<T>, tree: &KdTree<T>, radius: T) -> Vec<Vector3<T>> {
    normals_from_neighborhoods(cloud, &neighborhoods(cloud, tree, radius), radius * radius)
}

/// Adds `weight` to the histogram at continuous position `x ∈ [lo, hi]`,
/// split linearly between the two nearest bin centres.
fn soft_bin<T: Real>(hist: &mut [T], x: T, lo: T, hi: T, weight: T) {
    let n = hist.len();
    let pos = ((x - lo) / (hi - lo)).max(T::zero()).min(T::one()) * T::from_usize_lossy(n) - T::lit(0.5);
    let pos = pos.max(T::zero()).min(T::from_usize_lossy(n - 1));
    let i0 = pos.floor().to_f64_lossy() as usize;
    let i0 = i0.min(n - 1);
    let frac = pos - T::from_usize_lossy(i0);
    hist[i0] += weight * (T::one() - frac);
    if i0 + 1 < n {
        hist[i0 + 1] += weight * frac;
    }
}

/// Pair features between `p` (normal `np`) and neighbour `q` (normal `nq`),
/// invariant to the sign of either normal.
fn pair_features<T: Real>(p: &Point3<T>, np: &Vector3<T>, q: &Point3<T>, nq: &Vector3<T>) -> [T; 3] {
    let d = q - p;
    let len = d.norm();
    let dh = d / len;
    let v = dh.cross(np);
    let c = np.dot(nq);
    [
        // angle between the offset and the local normal
        np.dot(&dh).abs(),
        // twist of the neighbour normal around the offset; the product with
        // `c` cancels both sign ambiguities and vanishes where they meet
        v.dot(nq) * c,
        // angle between the two normals
        c.abs(),
    ]
}

const FEATURE_RANGES: [(f64, f64); 3] = [(0.0, 1.0), (-0.5, 0.5), (0.0, 1.0)];

/// Per-point histogram descriptors within `radius`.
pub fn compute_descriptors<T: Real>(cloud: &PointCloud<T>, radius: T) -> Result<FeatureSet<T>> {
    if !(radius > T::zero()) || !radius.is_finite() {
        return Err(RegError::InvalidInput(format!("radius must be > 0, got {radius:?}")));
    }
    cloud.require_at_least(10, "descriptor cloud")?;
    let tree = KdTree::build(cloud);
    compute_descriptors_with_tree(cloud, &tree, radius)
}

pub(crate) fn compute_descriptors_with_tree<T: Real>(
    cloud: &PointCloud<T>,
    tree: &KdTree<T>,
    radius: T,
) -> Result<FeatureSet<T>> {
    let r2 = radius * radius;
    let n = cloud.len();
    let neighborhoods = neighborhoods(cloud, tree, radius);
    let sparse: Vec<bool> = neighborhoods.iter().map(|nb| nb.len() < MIN_NEIGHBORS).collect();
    let normals = normals_from_neighborhoods(cloud, &neighborhoods, r2);

    // simplified histogram of each point against its own neighbourhood
    let spfh: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut h = vec![T::zero(); DESCRIPTOR_DIM];
            if sparse[i] {
                return h;
            }
            let mut wsum = T::zero();
            // sparse neighbours have no reliable normal
            for nb in neighborhoods[i].iter().filter(|nb| !sparse[nb.index]) {
                let w = radial_weight(nb.dist2, r2);
                let f = pair_features(&cloud[i], &normals[i], &cloud[nb.index], &normals[nb.index]);
                for (k, (lo, hi)) in FEATURE_RANGES.iter().enumerate() {
                    let range = k * BINS_PER_FEATURE..(k + 1) * BINS_PER_FEATURE;
                    soft_bin(&mut h[range], f[k], T::lit(*lo), T::lit(*hi), w);
                }
                wsum += w;
            }
            if wsum > T::zero() {
                h.iter_mut().for_each(|v| *v /= wsum);
            }
            h
        })
        .collect();

    // fast-PFH aggregation: own histogram plus the weighted mean of neighbours'
    let rows: Vec<(Vec<T>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            if sparse[i] {
                return (vec![T::one(); DESCRIPTOR_DIM], true);
            }
            let mut h = spfh[i].clone();
            let mut acc = vec![T::zero(); DESCRIPTOR_DIM];
            let mut wsum = T::zero();
            for nb in &neighborhoods[i] {
                if sparse[nb.index] {
                    continue;
                }
                let w = radial_weight(nb.dist2, r2);
                for (a, s) in acc.iter_mut().zip(&spfh[nb.index]) {
                    *a += *s * w;
                }
                wsum += w;
            }
            if wsum > T::zero() {
                for (v, a) in h.iter_mut().zip(&acc) {
                    *v += *a / wsum;
                }
            }
            if h.iter().all(|v| *v <= T::zero()) {
                return (vec![T::one(); DESCRIPTOR_DIM], true);
            }
            (h, false)
        })
        .collect();

    let flags: Vec<bool> = rows.iter().map(|(_, f)| *f).collect();
    let mut set = FeatureSet::from_rows(rows.into_iter().map(|(h, _)| h).collect(), (0..n).collect())?;
    set.flagged = flags;
    Ok(set)
}

/// Indices of the `⌈keep_fraction·n⌉` highest-scoring points, ascending.
/// Equal scores prefer the lower index.
pub fn select_representative<T: Real>(
    src: &PointCloud<T>,
    scores: &OverlapScores<T>,
    keep_fraction: f64,
) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(RegError::InvalidInput(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    if scores.len() != src.len() {
        return Err(RegError::InvalidInput(format!(
            "{} scores for {} points",
            scores.len(),
            src.len()
        )));
    }
    let n = src.len();
    // guard against products like (2/3)·3 = 2.0000000000000004
    let keep = ((keep_fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Softmax weights of one source descriptor over all target rows.
pub fn similarity_row_weights<T: Real>(f: &[T], tgt_all: &FeatureSet<T>, temperature: T) -> Vec<T> {
    let sims: Vec<T> = (0..tgt_all.len()).map(|j| dot(f, tgt_all.row(j))).collect();
    softmax(&sims, temperature)
}

fn softmax<T: Real>(logits: &[T], temperature: T) -> Vec<T> {
    let max = logits.iter().copied().fold(T::lit(f64::NEG_INFINITY), T::max);
    let mut w: Vec<T> = logits.iter().map(|s| ((*s - max) / temperature).exp()).collect();
    let sum = w.iter().fold(T::zero(), |a, v| a + *v);
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Cosine similarity in `[-1, 1]` mapped to a pair weight in `[0, 1]`.
fn similarity_weight<T: Real>(s: T) -> T {
    ((s + T::one()) * T::lit(0.5)).max(T::zero()).min(T::one())
}

fn check_match_inputs<T: Real>(
    src_sel: &FeatureSet<T>,
    tgt_all: &FeatureSet<T>,
    tgt_points: &PointCloud<T>,
    temperature: T,
) -> Result<()> {
    if !(temperature > T::zero()) {
        return Err(RegError::InvalidInput(format!("temperature must be > 0, got {temperature:?}")));
    }
    if src_sel.is_empty() {
        return Err(RegError::InvalidInput("no source points selected".into()));
    }
    if tgt_all.is_empty() || src_sel.dim() != tgt_all.dim() {
        return Err(RegError::InvalidInput("target features missing or of mismatched dimension".into()));
    }
    if tgt_all.indices().iter().any(|&j| j >= tgt_points.len()) {
        return Err(RegError::InvalidInput("target feature index out of range".into()));
    }
    Ok(())
}

/// Soft correspondences from each selected source descriptor to the complete
/// target: the target point is the similarity-softmax average of all target
/// points, and the pair weight is the best similarity mapped to `[0, 1]`.
pub fn match_partial_to_complete<T: Real>(
    src_sel: &FeatureSet<T>,
    tgt_all: &FeatureSet<T>,
    tgt_points: &PointCloud<T>,
    temperature: T,
) -> Result<CorrespondenceSet<T>> {
    check_match_inputs(src_sel, tgt_all, tgt_points, temperature)?;
    let pairs = (0..src_sel.len())
        .into_par_iter()
        .map(|i| {
            let f = src_sel.row(i);
            let sims: Vec<T> = (0..tgt_all.len()).map(|j| dot(f, tgt_all.row(j))).collect();
            let w = softmax(&sims, temperature);
            let mut target = Vector3::zeros();
            for (j, wj) in w.iter().enumerate() {
                target += tgt_points[tgt_all.indices()[j]] * *wj;
            }
            let best = sims.iter().copied().fold(T::lit(f64::NEG_INFINITY), T::max);
            Correspondence {
                source_index: src_sel.indices()[i],
                target,
                weight: similarity_weight(best),
            }
        })
        .collect();
    Ok(CorrespondenceSet::new(pairs))
}

/// Spatially-conditioned variant of [`match_partial_to_complete`] for use
/// after an initial alignment: each source point only considers the
/// `candidates` target points nearest its current position, and the logit of
/// candidate `j` is `cos(f, g_j) / temperature − ‖x − y_j‖² / (2·bandwidth²)`.
///
/// `src_aligned` holds the current source positions indexed by point index.
pub fn match_partial_to_complete_local<T: Real>(
    src_sel: &FeatureSet<T>,
    src_aligned: &PointCloud<T>,
    tgt_all: &FeatureSet<T>,
    tgt_points: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    temperature: T,
    bandwidth: T,
    candidates: usize,
) -> Result<CorrespondenceSet<T>> {
    check_match_inputs(src_sel, tgt_all, tgt_points, temperature)?;
    if !(bandwidth > T::zero()) || candidates == 0 {
        return Err(RegError::InvalidInput("bandwidth and candidate count must be positive".into()));
    }
    if tgt_all.len() != tgt_points.len() || tgt_tree.len() != tgt_points.len() {
        return Err(RegError::InvalidInput("local matching needs a feature row per target point".into()));
    }
    let row_of = tgt_all.row_lookup();
    let two_h2 = T::lit(2.0) * bandwidth * bandwidth;
    let pairs = (0..src_sel.len())
        .into_par_iter()
        .map(|i| {
            let f = src_sel.row(i);
            let x = src_aligned[src_sel.indices()[i]];
            let nbrs = tgt_tree.knn(&x, candidates);
            let sims: Vec<T> = nbrs
                .iter()
                .map(|nb| dot(f, tgt_all.row(row_of[nb.index].unwrap_or(nb.index))))
                .collect();
            let logits: Vec<T> = nbrs
                .iter()
                .zip(&sims)
                .map(|(nb, s)| *s / temperature - nb.dist2 / two_h2)
                .collect();
            let w = softmax(&logits, T::one());
            let mut target = Vector3::zeros();
            let mut best = T::lit(f64::NEG_INFINITY);
            for ((nb, wj), s) in nbrs.iter().zip(&w).zip(&sims) {
                target += tgt_points[nb.index] * *wj;
                best = best.max(*s);
            }
            let spread = nbrs
                .iter()
                .zip(&w)
                .fold(T::zero(), |a, (nb, wj)| a + (tgt_points[nb.index] - target).norm_squared() * *wj);
            // confident pairs are similar in descriptor space and spatially concentrated
            let weight = similarity_weight(best) * (-spread / two_h2).exp();
            Correspondence {
                source_index: src_sel.indices()[i],
                target,
                weight,
            }
        })
        .collect();
    Ok(CorrespondenceSet::new(pairs))
}

/// Removes correspondences whose source descriptor fails the ratio test
/// (nearest / second-nearest target descriptor distance `< ratio`) or, when
/// `require_mutual`, is not the mutual nearest neighbour of its best target.
///
/// Fewer than 3 survivors is a degenerate-set error; the caller decides the
/// fallback.
pub fn fmr_filter<T: Real>(
    corr: &CorrespondenceSet<T>,
    src_feats: &FeatureSet<T>,
    tgt_feats: &FeatureSet<T>,
    ratio: f64,
    require_mutual: bool,
) -> Result<CorrespondenceSet<T>> {
    let mask = FmrMask::new(src_feats, tgt_feats, ratio, require_mutual)?;
    mask.apply(corr)
}

/// The false-match decision of every source descriptor. It depends only on
/// the two feature sets, so it can be computed once and applied to any number
/// of correspondence sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmrMask {
    /// Indexed by source point index.
    passes: Vec<bool>,
}

impl FmrMask {
    pub fn new<T: Real>(
        src_feats: &FeatureSet<T>,
        tgt_feats: &FeatureSet<T>,
        ratio: f64,
        require_mutual: bool,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(RegError::InvalidInput(format!("ratio must be in (0, 1), got {ratio}")));
        }
        if tgt_feats.len() < 2 {
            return Err(RegError::InvalidInput("ratio test needs at least 2 target descriptors".into()));
        }
        let tgt_index = FeatureIndex::new(tgt_feats);
        let src_index = FeatureIndex::new(src_feats);
        let ratio2 = T::lit(ratio * ratio);
        let row_ok: Vec<bool> = (0..src_feats.len())
            .into_par_iter()
            .map(|row| {
                let nn = tgt_index.knn(src_feats.row(row), 2);
                // squared distances compare like distances
                if !(nn[0].dist2 < ratio2 * nn[1].dist2) {
                    return false;
                }
                !require_mutual
                    || src_index
                        .nearest(tgt_feats.row(nn[0].index))
                        .is_some_and(|b| b.index == row)
            })
            .collect();
        let lookup = src_feats.row_lookup();
        let passes = lookup.iter().map(|r| r.is_some_and(|row| row_ok[row])).collect();
        Ok(Self { passes })
    }

    pub fn passes(&self, source_index: usize) -> bool {
        self.passes.get(source_index).copied().unwrap_or(false)
    }

    pub fn pass_count(&self) -> usize {
        self.passes.iter().filter(|p| **p).count()
    }

    /// Keeps the pairs whose source passes; errors below 3 survivors.
    pub fn apply<T: Real>(&self, corr: &CorrespondenceSet<T>) -> Result<CorrespondenceSet<T>> {
        let pairs: Vec<_> = corr.pairs.iter().filter(|p| self.passes(p.source_index)).copied().collect();
        if pairs.len() < 3 {
            return Err(RegError::DegenerateSet { survivors: pairs.len() });
        }
        Ok(CorrespondenceSet::new(pairs))
    }
}

/// Hard mutual-nearest-neighbour matches in descriptor space, as
/// `(source point index, target point index)` pairs ordered by source row.
pub fn mutual_feature_matches<T: Real>(src_feats: &FeatureSet<T>, tgt_feats: &FeatureSet<T>) -> Vec<(usize, usize)> {
    if src_feats.is_empty() || tgt_feats.is_empty() {
        return Vec::new();
    }
    let tgt_index = FeatureIndex::new(tgt_feats);
    let src_index = FeatureIndex::new(src_feats);
    let forward: Vec<usize> = (0..src_feats.len())
        .into_par_iter()
        .map(|i| tgt_index.nearest(src_feats.row(i)).map_or(usize::MAX, |n| n.index))
        .collect();
    let backward: Vec<usize> = (0..tgt_feats.len())
        .into_par_iter()
        .map(|j| src_index.nearest(tgt_feats.row(j)).map_or(usize::MAX, |n| n.index))
        .collect();
    forward
        .iter()
        .enumerate()
        .filter(|(i, &j)| j != usize::MAX && backward[j] == *i)
        .map(|(i, &j)| (src_feats.indices()[i], tgt_feats.indices()[j]))
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use rand::Rng;

    use super::*;
    use crate::alignment::{overlap_scores, weighted_kabsch};
    use crate::datagen::{generate_pair, standard_normal, GeneratedPair, PairSpec, RotLevel, ShapeKind};
    use crate::geometry::{random_rotation, RigidTransform, RngSeed};
    use crate::metrics::error_rot_isotropic;

    fn blob(seed: u64, n: usize) -> PointCloud<f64> {
        let mut s = PairSpec::new(ShapeKind::Composite, RotLevel::Bounded, RngSeed(seed));
        s.overlap_target = 1.0;
        s.points_per_cloud = n;
        generate_pair::<f64>(&s).unwrap().tgt
    }

    fn random_unit_rows(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = RngSeed(seed).rng();
        (0..n)
            .map(|_| (0..DESCRIPTOR_DIM).map(|_| standard_normal(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let f = compute_descriptors(&blob(1, 512), 0.15).unwrap();
        assert_eq!(f.len(), 512);
        assert_eq!(f.dim(), DESCRIPTOR_DIM);
        for i in 0..f.len() {
            let n: f64 = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn descriptors_are_rotation_invariant() {
        let cloud = blob(2, 512);
        let base = compute_descriptors(&cloud, 0.15).unwrap();
        for seed in 0..5 {
            let r = random_rotation::<f64>(360.0, RngSeed(seed)).unwrap();
            let t = RigidTransform::new(r, Vector3::new(0.3, -1.0, 2.0)).unwrap();
            let moved = compute_descriptors(&t.apply(&cloud), 0.15).unwrap();
            let dev = base
                .data
                .iter()
                .zip(&moved.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-6, "seed {seed}: {dev}");
        }
    }

    #[test]
    fn plane_interior_descriptors_agree() {
        let mut rng = RngSeed(3).rng();
        let pts: Vec<_> = (0..800)
            .map(|_| Vector3::<f64>::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let f = compute_descriptors(&cloud, 0.15).unwrap();
        let interior: Vec<usize> = (0..cloud.len())
            .filter(|&i| cloud[i].x.abs() < 0.3 && cloud[i].y.abs() < 0.3)
            .collect();
        for &i in &interior {
            for &j in &interior {
                assert!(dot(f.row(i), f.row(j)) > 0.99);
            }
        }
    }

    #[test]
    fn isolated_points_get_flagged_uniform_descriptor() {
        let mut pts: Vec<_> = blob(4, 100).into_points();
        pts.push(Vector3::new(10.0, 10.0, 10.0));
        let f = compute_descriptors(&PointCloud::new(pts).unwrap(), 0.15).unwrap();
        let last = f.len() - 1;
        assert!(f.is_flagged(last));
        let u = 1.0 / (DESCRIPTOR_DIM as f64).sqrt();
        assert!(f.row(last).iter().all(|v| (v - u).abs() < 1e-12));
    }

    #[test]
    fn descriptor_preconditions() {
        assert!(compute_descriptors(&blob(5, 64), 0.0).is_err());
        let small = PointCloud::new(vec![Vector3::<f64>::zeros(); 9]).unwrap();
        assert!(compute_descriptors(&small, 0.15).is_err());
    }

    #[test]
    fn feature_index_matches_scan() {
        let f = FeatureSet::from_rows(random_unit_rows(6, 300), (0..300).collect()).unwrap();
        let q = FeatureSet::from_rows(random_unit_rows(7, 50), (0..50).collect()).unwrap();
        let idx = FeatureIndex::new(&f);
        for i in 0..q.len() {
            let mut all: Vec<(f64, usize)> = (0..f.len()).map(|j| (dist2(q.row(i), f.row(j)), j)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = idx.knn(q.row(i), 5);
            assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), all[..5].iter().map(|a| a.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn select_representative_examples() {
        let src = blob(8, 64).select(&[0, 1, 2]).unwrap();
        let scores = OverlapScores { scores: vec![0.9, 0.1, 0.5] };
        assert_eq!(select_representative(&src, &scores, 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_representative(&src, &scores, 2.0 / 3.0).unwrap(), vec![0, 2]);
        let ties = OverlapScores { scores: vec![0.5, 0.5, 0.5] };
        assert_eq!(select_representative(&src, &ties, 0.5).unwrap(), vec![0, 1]);
        assert!(select_representative(&src, &scores, 0.0).is_err());
        assert!(select_representative(&src, &scores, 1.1).is_err());
    }

    #[test]
    fn selection_concentrates_on_true_overlap() {
        for seed in 0..20 {
            let p: GeneratedPair<f64> =
                generate_pair(&PairSpec::new(ShapeKind::RandomBlob, RotLevel::Bounded, RngSeed(seed))).unwrap();
            let aligned = p.t_gt.apply(&p.src);
            let scores = overlap_scores(&aligned, &p.tgt, 0.05).unwrap();
            let kept = select_representative(&p.src, &scores, 0.5).unwrap();
            let inside = kept.iter().filter(|&&i| p.overlap_mask_src[i]).count();
            assert!(inside as f64 >= 0.8 * kept.len() as f64, "seed {seed}");
        }
    }

    #[test]
    fn identical_features_match_themselves_at_low_temperature() {
        let cloud = blob(9, 64);
        let distinct = FeatureSet::from_rows(random_unit_rows(9, 20), (0..20).collect()).unwrap();
        let corr = match_partial_to_complete(&distinct, &distinct, &cloud, 1e-4).unwrap();
        for p in &corr.pairs {
            assert!((p.target - cloud[p.source_index]).norm() < 1e-6);
            assert!((p.weight - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_similarity_row_maps_to_centroid() {
        let cloud = blob(10, 64);
        let rows: Vec<Vec<f64>> = (0..cloud.len())
            .map(|j| {
                let mut r = vec![0.0; DESCRIPTOR_DIM];
                r[j % DESCRIPTOR_DIM] = 1.0;
                r
            })
            .collect();
        let tgt = FeatureSet::from_rows(rows, (0..cloud.len()).collect()).unwrap();
        // the uniform row has equal cosine with every one-hot target row
        let src = FeatureSet::from_rows(vec![vec![1.0; DESCRIPTOR_DIM]], vec![0]).unwrap();
        let corr = match_partial_to_complete(&src, &tgt, &cloud, 0.02).unwrap();
        assert!((corr.pairs[0].target - cloud.centroid()).norm() < 1e-12);
    }

    #[test]
    fn row_weights_sum_to_one() {
        let f = compute_descriptors(&blob(11, 300), 0.15).unwrap();
        for i in 0..f.len() {
            let w = similarity_row_weights(f.row(i), &f, 0.02);
            assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn exact_descriptors_recover_ground_truth() {
        // distinctive exact features: the transform-pair oracle
        let src = blob(12, 200);
        let rows = random_unit_rows(13, src.len());
        let feats = FeatureSet::from_rows(rows, (0..src.len()).collect()).unwrap();
        let t = RigidTransform::new(random_rotation(360.0, RngSeed(14)).unwrap(), Vector3::new(0.2, 0.1, -0.3)).unwrap();
        let tgt = t.apply(&src);
        let corr = match_partial_to_complete(&feats, &feats, &tgt, DEFAULT_TEMPERATURE).unwrap();
        let est = weighted_kabsch(&src, &corr).unwrap();
        assert!(error_rot_isotropic(est.rotation(), t.rotation()) < 0.5);
    }

    #[test]
    fn local_matching_with_exact_alignment_is_exact() {
        let cloud = blob(15, 300);
        let f = compute_descriptors(&cloud, 0.15).unwrap();
        let tree = KdTree::build(&cloud);
        let corr = match_partial_to_complete_local(&f, &cloud, &f, &cloud, &tree, 0.02, 0.004, 8).unwrap();
        let errs: Vec<f64> = corr.pairs.iter().map(|p| (p.target - cloud[p.source_index]).norm()).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        // a few points have a near-duplicate neighbour closer than the bandwidth
        assert!(mean < 1e-3, "{mean}");
        assert!(errs.iter().all(|e| *e < 5e-3));
        let sum: f64 = corr.pairs.iter().map(|p| p.weight).sum();
        assert!(sum > 0.0);
    }

    #[test]
    fn fmr_keeps_exact_duplicates() {
        let f = FeatureSet::from_rows(random_unit_rows(16, 100), (0..100).collect()).unwrap();
        let pts: Vec<_> = (0..100).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let corr = CorrespondenceSet::from_matched(&pts);
        let out = fmr_filter(&corr, &f, &f, 0.9, true).unwrap();
        assert_eq!(out, corr);
    }

    #[test]
    fn fmr_rejects_matches_into_noise() {
        let mut rejected = 0;
        for trial in 0..1000u64 {
            let src = FeatureSet::from_rows(random_unit_rows(trial, 1), vec![0]).unwrap();
            let tgt = FeatureSet::from_rows(random_unit_rows(trial + 1_000_000, 200), (0..200).collect()).unwrap();
            let corr = CorrespondenceSet::from_matched(&[Vector3::zeros()]);
            match fmr_filter(&corr, &src, &tgt, 0.8, false) {
                Err(RegError::DegenerateSet { survivors: 0 }) => rejected += 1,
                Err(RegError::DegenerateSet { survivors: 1 }) => {}
                other => panic!("unexpected {other:?}"),
            }
        }
        assert!(rejected >= 950, "{rejected}");
    }

    #[test]
    fn fmr_is_a_subset_and_idempotent() {
        let p: GeneratedPair<f64> =
            generate_pair(&PairSpec::new(ShapeKind::RandomBlob, RotLevel::Bounded, RngSeed(18))).unwrap();
        let fs = compute_descriptors(&p.src, 0.15).unwrap();
        let ft = compute_descriptors(&p.tgt, 0.15).unwrap();
        let corr = match_partial_to_complete(&fs, &ft, &p.tgt, 0.02).unwrap();
        for mutual in [false, true] {
            let once = fmr_filter(&corr, &fs, &ft, 0.9, mutual).unwrap();
            assert!(once.len() <= corr.len());
            assert!(once.pairs.iter().all(|q| corr.pairs.contains(q)));
            assert_eq!(fmr_filter(&once, &fs, &ft, 0.9, mutual).unwrap(), once);
        }
        assert!(fmr_filter(&corr, &fs, &ft, 1.0, true).is_err());
    }

    #[test]
    fn mutual_matches_are_one_to_one() {
        let f = FeatureSet::from_rows(random_unit_rows(19, 50), (0..50).collect()).unwrap();
        let m = mutual_feature_matches(&f, &f);
        assert_eq!(m, (0..50).map(|i| (i, i)).collect::<Vec<_>>());
    }
}
