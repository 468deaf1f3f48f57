//! Model B: hard descriptor correspondences with RANSAC over minimal
//! three-point samples, after dropping the source points least likely to
//! overlap the target.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    coarse_align_with_tree, overlap_ratio_with_tree, overlap_scores_with_tree, weighted_kabsch, Correspondence,
    CorrespondenceSet,
};
use crate::correspondence::{compute_descriptors_with_tree, mutual_feature_matches, select_representative, FeatureSet};
use crate::error::{RegError, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform, RngSeed};
use crate::kdtree::KdTree;
use crate::pipeline_a::RegistrationResult;
use crate::scalar::Real;

pub const SAMPLE_SIZE: usize = 3;

/// Iterations are evaluated in blocks of this size; early exit is only
/// checked between blocks so the outcome never depends on scheduling.
const BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Number of correspondences within `inlier_tau`.
    InlierCount,
    /// Fraction of all source points with a target point within
    /// `inlier_tau`; rewards poses that merely cover a lot of target.
    OverlapFitness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_tau: f64,
    pub objective: Objective,
    pub source_keep_fraction: f64,
    /// Stop once this fraction of correspondences are inliers; `None`
    /// always runs the full budget.
    pub early_exit_ratio: Option<f64>,
    pub descriptor_radius: f64,
    /// Length scale of the overlap scores used to filter the source.
    pub overlap_sigma: f64,
    /// Re-estimations of the winning hypothesis on its inlier set; later
    /// rounds recompute the inliers under the refitted pose.
    pub refit_rounds: usize,
    /// The refit threshold shrinks geometrically from `inlier_tau` to
    /// `inlier_tau · refit_tau_scale` over the refit rounds.
    pub refit_tau_scale: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            inlier_tau: 0.05,
            objective: Objective::InlierCount,
            source_keep_fraction: 0.7,
            early_exit_ratio: Some(0.95),
            descriptor_radius: 0.15,
            overlap_sigma: 0.05,
            refit_rounds: 10,
            refit_tau_scale: 0.5,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegError::Config(m));
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        if !(self.source_keep_fraction > 0.0 && self.source_keep_fraction <= 1.0) {
            return bad(format!("source_keep_fraction must be in (0, 1], got {}", self.source_keep_fraction));
        }
        for (name, v) in [
            ("inlier_tau", self.inlier_tau),
            ("descriptor_radius", self.descriptor_radius),
            ("overlap_sigma", self.overlap_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.refit_tau_scale > 0.0 && self.refit_tau_scale <= 1.0) {
            return bad(format!("refit_tau_scale must be in (0, 1], got {}", self.refit_tau_scale));
        }
        if self.refit_rounds == 0 {
            return bad("refit_rounds must be >= 1".into());
        }
        if let Some(r) = self.early_exit_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("early_exit_ratio must be in (0, 1], got {r}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisScore<T> {
    pub inlier_count: usize,
    pub fitness: T,
}

/// Scores `t` against hard correspondences. `fitness` is the geometric
/// overlap of the whole source (via `tgt_tree`), independent of `corr`.
pub fn score_hypothesis<T: Real>(
    t: &RigidTransform<T>,
    src: &PointCloud<T>,
    corr: &CorrespondenceSet<T>,
    tgt_tree: &KdTree<T>,
    cfg: &RansacConfig,
) -> HypothesisScore<T> {
    let tau = T::lit(cfg.inlier_tau);
    HypothesisScore {
        inlier_count: count_inliers(t, src, corr, tau * tau),
        fitness: overlap_ratio_with_tree(src, tgt_tree, t, tau),
    }
}

fn count_inliers<T: Real>(t: &RigidTransform<T>, src: &PointCloud<T>, corr: &CorrespondenceSet<T>, tau2: T) -> usize {
    corr.pairs
        .iter()
        .filter(|p| (t.apply_point(&src[p.source_index]) - p.target).norm_squared() <= tau2)
        .count()
}

fn inlier_set<T: Real>(t: &RigidTransform<T>, src: &PointCloud<T>, corr: &CorrespondenceSet<T>, tau2: T) -> CorrespondenceSet<T> {
    CorrespondenceSet::new(
        corr.pairs
            .iter()
            .filter(|p| (t.apply_point(&src[p.source_index]) - p.target).norm_squared() <= tau2)
            .copied()
            .collect(),
    )
}

/// A minimal sample is usable when its source points are pairwise at least
/// `2·tau` apart and no point lies within `tau / 2` of the line through the
/// other two.
pub fn sample_is_well_spread<T: Real>(pts: &[Point3<T>; 3], tau: T) -> bool {
    let min_sep2 = T::lit(4.0) * tau * tau;
    let edges = [pts[1] - pts[0], pts[2] - pts[1], pts[0] - pts[2]];
    if edges.iter().any(|e| e.norm_squared() < min_sep2) {
        return false;
    }
    let longest = edges.iter().map(|e| e.norm()).fold(T::zero(), T::max);
    let height = edges[0].cross(&edges[2]).norm() / longest;
    height >= tau * T::lit(0.5)
}

/// Hypothesis from one iteration; score ties go to the lower iteration.
#[derive(Clone, Copy)]
struct Candidate<T: Real> {
    iteration: usize,
    inliers: usize,
    fitness: T,
    transform: RigidTransform<T>,
}

impl<T: Real> Candidate<T> {
    fn better_than(&self, other: &Self, objective: Objective) -> bool {
        let ord = match objective {
            Objective::InlierCount => self.inliers.cmp(&other.inliers),
            Objective::OverlapFitness => self
                .fitness
                .partial_cmp(&other.fitness)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.inliers.cmp(&other.inliers)),
        };
        ord.then(other.iteration.cmp(&self.iteration)).is_gt()
    }
}

/// Registers `src` onto `tgt`. The target is used whole; the source keeps
/// its `source_keep_fraction` highest overlap scores after coarse alignment.
pub fn ransac_register<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    cfg: &RansacConfig,
    seed: RngSeed,
) -> Result<RegistrationResult<T>> {
    cfg.validate()?;
    src.require_at_least(10, "source")?;
    tgt.require_at_least(10, "target")?;
    let tgt_tree = KdTree::build(tgt);
    let radius = T::lit(cfg.descriptor_radius);
    let src_feats = compute_descriptors_with_tree(src, &KdTree::build(src), radius)?;
    let tgt_feats = compute_descriptors_with_tree(tgt, &tgt_tree, radius)?;
    Ok(register_with_features(src, tgt, &tgt_tree, &src_feats, &tgt_feats, cfg, seed))
}

pub(crate) fn register_with_features<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    src_feats: &FeatureSet<T>,
    tgt_feats: &FeatureSet<T>,
    cfg: &RansacConfig,
    seed: RngSeed,
) -> RegistrationResult<T> {
    // only the source is filtered; every target point stays a candidate
    let coarse = coarse_align_with_tree(src, tgt, tgt_tree);
    let scores = overlap_scores_with_tree(&coarse.transform.apply(src), tgt_tree, T::lit(cfg.overlap_sigma));
    let kept = select_representative(src, &scores, cfg.source_keep_fraction).expect("validated keep fraction");
    let kept_feats = src_feats.select_points(&kept).expect("descriptor per source point");
    let corr = CorrespondenceSet::new(
        mutual_feature_matches(&kept_feats, tgt_feats)
            .into_iter()
            .map(|(i, j)| Correspondence {
                source_index: i,
                target: tgt[j],
                weight: T::one(),
            })
            .collect(),
    );

    solve(src, tgt, tgt_tree, &corr, cfg, seed)
}

/// RANSAC over given hard correspondences (unit weights are assumed), for
/// callers with their own matching. `tgt` is only used for scoring overlap.
pub fn ransac_on_correspondences<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    corr: &CorrespondenceSet<T>,
    cfg: &RansacConfig,
    seed: RngSeed,
) -> Result<RegistrationResult<T>> {
    cfg.validate()?;
    corr.validate(src.len())?;
    if tgt.is_empty() {
        return Err(RegError::InvalidInput("empty target".into()));
    }
    Ok(solve(src, tgt, &KdTree::build(tgt), corr, cfg, seed))
}

fn solve<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    corr: &CorrespondenceSet<T>,
    cfg: &RansacConfig,
    seed: RngSeed,
) -> RegistrationResult<T> {
    let mut flags = BTreeSet::new();
    let transform = match search(src, tgt_tree, corr, cfg, seed) {
        Some(c) if c.inliers >= SAMPLE_SIZE => {
            refit(src, corr, c.transform, cfg.inlier_tau, cfg.refit_tau_scale, cfg.refit_rounds)
        }
        other => {
            flags.insert("ransac_degenerate".to_string());
            other.map_or_else(
                || RigidTransform::from_translation(tgt.centroid() - src.centroid()),
                |c| c.transform,
            )
        }
    };
    let overlap = overlap_ratio_with_tree(src, tgt_tree, &transform, T::lit(cfg.inlier_tau));
    RegistrationResult {
        transform,
        overlap,
        degenerate_flags: flags,
        per_iteration_residuals: Vec::new(),
    }
}

/// Kabsch on the inliers of `t`, repeated while the threshold shrinks
/// towards `tau · scale`; stops early once the threshold has reached its
/// final value and the inlier set no longer changes.
fn refit<T: Real>(
    src: &PointCloud<T>,
    corr: &CorrespondenceSet<T>,
    mut t: RigidTransform<T>,
    tau: f64,
    scale: f64,
    rounds: usize,
) -> RigidTransform<T> {
    let tau_at = |k: usize| {
        let s = if rounds > 1 { (k as f64 / (rounds - 1) as f64).min(1.0) } else { 1.0 };
        let v = tau * scale.powf(s);
        T::lit(v * v)
    };
    let mut inliers = inlier_set(&t, src, corr, tau_at(0));
    for k in 0..rounds {
        let Ok(next) = weighted_kabsch(src, &inliers) else { break };
        t = next;
        let updated = inlier_set(&t, src, corr, tau_at(k + 1));
        if updated == inliers && k + 1 >= rounds - 1 {
            break;
        }
        if updated.positive_count() < SAMPLE_SIZE {
            break;
        }
        inliers = updated;
    }
    t
}

fn search<T: Real>(
    src: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    corr: &CorrespondenceSet<T>,
    cfg: &RansacConfig,
    seed: RngSeed,
) -> Option<Candidate<T>> {
    let m = corr.len();
    if m < SAMPLE_SIZE {
        return None;
    }
    let tau = T::lit(cfg.inlier_tau);
    let tau2 = tau * tau;
    let evaluate = |iteration: usize| -> Option<Candidate<T>> {
        let mut rng = seed.derive(iteration as u64).rng();
        let idx = sample(&mut rng, m, SAMPLE_SIZE);
        let picked: [&Correspondence<T>; 3] = [&corr.pairs[idx.index(0)], &corr.pairs[idx.index(1)], &corr.pairs[idx.index(2)]];
        let pts = picked.map(|p| src[p.source_index]);
        if !sample_is_well_spread(&pts, tau) {
            return None;
        }
        let minimal = CorrespondenceSet::new(picked.iter().map(|p| **p).collect());
        let transform = weighted_kabsch(src, &minimal).ok()?;
        let inliers = count_inliers(&transform, src, corr, tau2);
        let fitness = match cfg.objective {
            Objective::InlierCount => T::zero(),
            Objective::OverlapFitness => overlap_ratio_with_tree(src, tgt_tree, &transform, tau),
        };
        Some(Candidate {
            iteration,
            inliers,
            fitness,
            transform,
        })
    };
    let pick = |a: Option<Candidate<T>>, b: Option<Candidate<T>>| match (a, b) {
        (Some(a), Some(b)) => Some(if b.better_than(&a, cfg.objective) { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    };

    let mut best: Option<Candidate<T>> = None;
    let mut start = 0;
    while start < cfg.max_iterations {
        let end = (start + BLOCK).min(cfg.max_iterations);
        let block_best = (start..end).into_par_iter().map(evaluate).reduce(|| None, pick);
        best = pick(best, block_best);
        if let (Some(ratio), Some(b)) = (cfg.early_exit_ratio, &best) {
            if b.inliers as f64 > ratio * m as f64 {
                break;
            }
        }
        start = end;
    }
    best
}
