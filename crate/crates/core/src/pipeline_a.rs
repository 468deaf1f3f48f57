//! Correspondence-refinement registration: coarse principal-axes alignment
//! followed by rounds of overlap-driven point selection, partial-to-complete
//! soft matching, false-match removal and weighted SVD.
//!
//! Learned point features in this design are conditioned on the current
//! alignment, so matching here combines rotation-invariant descriptors with
//! the current spatial position of each source point.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    coarse_align_with_tree, overlap_ratio_with_tree, principal_axis_hypotheses, overlap_scores_with_tree, weighted_kabsch, CorrespondenceSet,
};
use crate::correspondence::{
    compute_descriptors_with_tree, estimate_normals, FmrMask, match_partial_to_complete_local, select_representative, FeatureSet,
};
use crate::error::{RegError, Result};
use crate::geometry::{rotation_angle_rad, PointCloud, RigidTransform, RngSeed};
use crate::kdtree::KdTree;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineAConfig {
    /// Outer refinement iterations; one residual is reported per iteration.
    pub refine_iterations: usize,
    /// Matching rounds inside each iteration.
    pub steps_per_iteration: usize,
    /// Fraction of source points kept by overlap score before matching.
    pub keep_fraction: f64,
    /// Overlap-score length scale.
    pub sigma: f64,
    /// Distance threshold of the final overlap ratio.
    pub tau: f64,
    pub ratio: f64,
    pub require_mutual: bool,
    pub temperature: f64,
    pub descriptor_radius: f64,
    /// Spatial kernel width of the first and last matching rounds; rounds in
    /// between interpolate geometrically.
    pub bandwidth_start: f64,
    pub bandwidth_end: f64,
    /// Target candidates considered per source point.
    pub match_candidates: usize,
    /// Disables false-match removal (for ablations).
    pub use_fmr: bool,
    /// Matching rounds spent on each candidate start pose; 0 keeps the
    /// coarse initializer's choice.
    pub screen_rounds: usize,
    /// Fraction of best-aligned source points entering the trimmed residual.
    pub trim_fraction: f64,
    /// Screened starts whose trimmed residual is within this (squared
    /// length) of the best count as ties, resolved by smallest rotation.
    pub screen_tolerance: f64,
    /// Relative part of the tie tolerance, as a multiple of the best residual.
    pub screen_relative_tolerance: f64,
    /// Share of the tangential offset kept in refinement targets: 1 is a
    /// point-to-point update, 0 a point-to-plane one.
    pub tangent_weight: f64,
    /// When fewer than this fraction of matches survive false-match removal
    /// the round uses the unfiltered matches.
    pub fmr_min_fraction: f64,
    /// Final rounds with a near-hard spatial kernel (`bandwidth_end / 20`),
    /// which removes the small bias of soft assignments.
    pub polish_steps: usize,
}

impl Default for PipelineAConfig {
    fn default() -> Self {
        Self {
            refine_iterations: 2,
            steps_per_iteration: 15,
            keep_fraction: 0.7,
            sigma: 0.05,
            tau: 0.05,
            ratio: 0.9,
            require_mutual: true,
            temperature: 0.02,
            descriptor_radius: 0.15,
            bandwidth_start: 0.1,
            bandwidth_end: 0.005,
            match_candidates: 16,
            use_fmr: true,
            screen_rounds: 6,
            trim_fraction: 0.5,
            screen_tolerance: 2.5e-4,
            screen_relative_tolerance: 2.0,
            tangent_weight: 1.0,
            fmr_min_fraction: 0.25,
            polish_steps: 3,
        }
    }
}

impl PipelineAConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegError::Config(m));
        if self.refine_iterations < 1 {
            return bad("refine_iterations must be >= 1".into());
        }
        if self.steps_per_iteration < 1 {
            return bad("steps_per_iteration must be >= 1".into());
        }
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return bad(format!("trim_fraction must be in (0, 1], got {}", self.trim_fraction));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("keep_fraction must be in (0, 1], got {}", self.keep_fraction));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("ratio must be in (0, 1), got {}", self.ratio));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("tau", self.tau),
            ("temperature", self.temperature),
            ("descriptor_radius", self.descriptor_radius),
            ("bandwidth_start", self.bandwidth_start),
            ("bandwidth_end", self.bandwidth_end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.screen_relative_tolerance >= 0.0 && self.screen_relative_tolerance.is_finite()) {
            return bad(format!(
                "screen_relative_tolerance must be >= 0, got {}",
                self.screen_relative_tolerance
            ));
        }
        if !(self.screen_tolerance >= 0.0 && self.screen_tolerance.is_finite()) {
            return bad(format!("screen_tolerance must be >= 0, got {}", self.screen_tolerance));
        }
        if !(0.0..=1.0).contains(&self.tangent_weight) {
            return bad(format!("tangent_weight must be in [0, 1], got {}", self.tangent_weight));
        }
        if !(0.0..=1.0).contains(&self.fmr_min_fraction) {
            return bad(format!("fmr_min_fraction must be in [0, 1], got {}", self.fmr_min_fraction));
        }
        if self.match_candidates < 1 {
            return bad("match_candidates must be >= 1".into());
        }
        Ok(())
    }

    /// Screening narrows the kernel from the start width halfway (in log
    /// scale) towards the final width.
    fn screen_bandwidth(&self, round: usize) -> f64 {
        let s = if self.screen_rounds > 1 {
            round as f64 / (self.screen_rounds - 1) as f64
        } else {
            0.0
        };
        self.bandwidth_start * (self.bandwidth_end / self.bandwidth_start).powf(0.5 * s)
    }

    fn bandwidth(&self, round: usize) -> f64 {
        let total = self.refine_iterations * self.steps_per_iteration;
        if total <= 1 {
            return self.bandwidth_end;
        }
        let s = round as f64 / (total - 1) as f64;
        self.bandwidth_start * (self.bandwidth_end / self.bandwidth_start).powf(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult<T: Real> {
    pub transform: RigidTransform<T>,
    /// Overlap ratio of the transformed source under the final transform.
    pub overlap: T,
    pub degenerate_flags: BTreeSet<String>,
    pub per_iteration_residuals: Vec<T>,
}

/// Mean squared nearest-target distance over the best-aligned
/// `keep_fraction` of source points.
fn trimmed_residual<T: Real>(src: &PointCloud<T>, tgt_tree: &KdTree<T>, t: &RigidTransform<T>, keep: f64) -> T {
    let mut d: Vec<T> = src
        .iter()
        .map(|p| tgt_tree.nearest(&t.apply_point(p)).map_or(T::zero(), |n| n.dist2))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((keep * d.len() as f64).ceil() as usize).clamp(1, d.len());
    d[..k].iter().fold(T::zero(), |a, v| a + *v) / T::from_usize_lossy(k)
}

/// Registers `src` onto `tgt`. Never fails on degenerate geometry: problems
/// are reported in `degenerate_flags` and the last valid transform is kept.
pub fn register_a<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    cfg: &PipelineAConfig,
    seed: RngSeed,
) -> Result<RegistrationResult<T>> {
    cfg.validate()?;
    src.require_at_least(10, "source")?;
    tgt.require_at_least(10, "target")?;
    let tgt_tree = KdTree::build(tgt);
    let src_feats = compute_descriptors_with_tree(src, &KdTree::build(src), T::lit(cfg.descriptor_radius))?;
    let tgt_feats = compute_descriptors_with_tree(tgt, &tgt_tree, T::lit(cfg.descriptor_radius))?;
    Ok(register_with_features(src, tgt, &tgt_tree, &src_feats, &tgt_feats, cfg, seed))
}

/// Shared state of one registration run.
struct Refiner<'a, T: Real> {
    src: &'a PointCloud<T>,
    tgt: &'a PointCloud<T>,
    tgt_tree: &'a KdTree<T>,
    src_feats: &'a FeatureSet<T>,
    tgt_feats: &'a FeatureSet<T>,
    cfg: &'a PipelineAConfig,
    tgt_normals: Vec<Vector3<T>>,
    fmr: Option<FmrMask>,
    flags: BTreeSet<String>,
}

impl<T: Real> Refiner<'_, T> {
    /// One match → filter → solve round; returns the updated transform and
    /// the unfiltered matches for the next round's fallback.
    fn round(
        &mut self,
        transform: &RigidTransform<T>,
        bandwidth: f64,
        tangent_weight: f64,
        previous: Option<&CorrespondenceSet<T>>,
    ) -> (RigidTransform<T>, CorrespondenceSet<T>) {
        let cfg = self.cfg;
        let aligned = transform.apply(self.src);
        let scores = overlap_scores_with_tree(&aligned, self.tgt_tree, T::lit(cfg.sigma));
        let selected = select_representative(self.src, &scores, cfg.keep_fraction).expect("validated keep_fraction");
        let sel_feats = self.src_feats.select_points(&selected).expect("descriptor per source point");
        let matched = match_partial_to_complete_local(
            &sel_feats,
            &aligned,
            self.tgt_feats,
            self.tgt,
            self.tgt_tree,
            T::lit(cfg.temperature),
            T::lit(bandwidth),
            cfg.match_candidates,
        )
        .expect("validated matching inputs");
        let corr = if let Some(fmr) = &self.fmr {
            match fmr.apply(&matched) {
                Ok(c) if (c.len() as f64) >= cfg.fmr_min_fraction * matched.len() as f64 => c,
                Ok(_) => {
                    self.flags.insert("fmr_sparse".to_string());
                    matched.clone()
                }
                Err(_) => {
                    self.flags.insert("fmr_degenerate".to_string());
                    previous.cloned().unwrap_or_else(|| matched.clone())
                }
            }
        } else {
            matched.clone()
        };
        let corr = self.project_to_tangent(&aligned, corr, tangent_weight);
        let next = match weighted_kabsch(&aligned, &corr) {
            Ok(delta) => delta.compose(transform),
            Err(_) => {
                self.flags.insert("kabsch_degenerate".to_string());
                *transform
            }
        };
        (next, matched)
    }

    /// Replaces each target `y` by `x + n nᵀ(y − x) + λ (I − n nᵀ)(y − x)`,
    /// with `n` the normal of the target point nearest `y`; `λ = 1` leaves
    /// point-to-point pairs untouched, `λ = 0` is a point-to-plane step.
    fn project_to_tangent(
        &self,
        aligned: &PointCloud<T>,
        mut corr: CorrespondenceSet<T>,
        tangent_weight: f64,
    ) -> CorrespondenceSet<T> {
        if tangent_weight >= 1.0 {
            return corr;
        }
        let lambda = T::lit(tangent_weight);
        for p in &mut corr.pairs {
            let x = aligned[p.source_index];
            let Some(nb) = self.tgt_tree.nearest(&p.target) else { continue };
            let n = self.tgt_normals[nb.index];
            let d = p.target - x;
            let normal_part = n * n.dot(&d);
            p.target = x + normal_part + (d - normal_part) * lambda;
        }
        corr
    }

    fn residual(&self, t: &RigidTransform<T>) -> T {
        trimmed_residual(self.src, self.tgt_tree, t, self.cfg.trim_fraction)
    }
}

/// Lowest-residual candidate; candidates within `tolerance` (squared length)
/// of the best are treated as geometrically equivalent, and the one with the
/// smallest rotation wins, mirroring a small-rotation training regime.
fn pick_start<T: Real>(screened: &[(T, RigidTransform<T>)], tolerance: T, relative: T) -> RigidTransform<T> {
    let best = screened.iter().map(|(s, _)| *s).fold(T::lit(f64::INFINITY), T::min);
    let mut chosen: Option<(T, RigidTransform<T>)> = None;
    for (score, t) in screened {
        if *score > best * (T::one() + relative) + tolerance {
            continue;
        }
        let angle = rotation_angle_rad(t.rotation());
        if chosen.as_ref().is_none_or(|(a, _)| angle < *a) {
            chosen = Some((angle, *t));
        }
    }
    chosen.expect("at least one candidate").1
}

pub(crate) fn register_with_features<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    tgt_tree: &KdTree<T>,
    src_feats: &FeatureSet<T>,
    tgt_feats: &FeatureSet<T>,
    cfg: &PipelineAConfig,
    // every step is deterministic; the seed is accepted for interface symmetry
    _seed: RngSeed,
) -> RegistrationResult<T> {
    let mut r = Refiner {
        src,
        tgt,
        tgt_tree,
        src_feats,
        tgt_feats,
        cfg,
        tgt_normals: estimate_normals(tgt, tgt_tree, T::lit(cfg.descriptor_radius)),
        fmr: cfg
            .use_fmr
            .then(|| FmrMask::new(src_feats, tgt_feats, cfg.ratio, cfg.require_mutual).expect("validated ratio")),
        flags: BTreeSet::new(),
    };
    let coarse = coarse_align_with_tree(src, tgt, tgt_tree);
    if coarse.degenerate {
        r.flags.insert("coarse_degenerate".to_string());
    }

    // Chamfer between two partial views often prefers a wrong principal-axes
    // hypothesis, so every hypothesis and the plain centroid alignment get a
    // short refinement and the lowest trimmed residual wins (ties: first).
    let mut starts = vec![coarse.transform];
    if cfg.screen_rounds > 0 {
        starts.extend(
            principal_axis_hypotheses(src, tgt)
                .into_iter()
                .filter(|h| *h != coarse.transform),
        );
        starts.push(RigidTransform::from_translation(tgt.centroid() - src.centroid()));
    }
    let screened: Vec<(T, RigidTransform<T>)> = starts
        .into_iter()
        .map(|start| {
            let mut t = start;
            let mut prev = None;
            for k in 0..cfg.screen_rounds {
                let (next, matched) = r.round(&t, cfg.screen_bandwidth(k), 1.0, prev.as_ref());
                t = next;
                prev = Some(matched);
            }
            (r.residual(&t), t)
        })
        .collect();
    let mut transform = pick_start(&screened, T::lit(cfg.screen_tolerance), T::lit(cfg.screen_relative_tolerance));

    let mut residuals = Vec::with_capacity(cfg.refine_iterations);
    let mut previous: Option<CorrespondenceSet<T>> = None;
    for it in 0..cfg.refine_iterations {
        let polish = if it + 1 == cfg.refine_iterations { cfg.polish_steps } else { 0 };
        for step in 0..cfg.steps_per_iteration + polish {
            let bw = if step < cfg.steps_per_iteration {
                cfg.bandwidth(it * cfg.steps_per_iteration + step)
            } else {
                cfg.bandwidth_end / 20.0
            };
            let (next, matched) = r.round(&transform, bw, cfg.tangent_weight, previous.as_ref());
            transform = next;
            previous = Some(matched);
        }
        residuals.push(r.residual(&transform));
    }

    let overlap = overlap_ratio_with_tree(src, tgt_tree, &transform, T::lit(cfg.tau));
    RegistrationResult {
        transform,
        overlap,
        degenerate_flags: r.flags,
        per_iteration_residuals: residuals,
    }
}

/// Runs [`register_a`] in both directions: `T1` maps source onto target and
/// `T2` target onto source. No consistency is imposed between them.
pub fn register_a_bidirectional<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    cfg: &PipelineAConfig,
    seed: RngSeed,
) -> Result<(RegistrationResult<T>, RegistrationResult<T>)> {
    cfg.validate()?;
    src.require_at_least(10, "source")?;
    tgt.require_at_least(10, "target")?;
    let src_tree = KdTree::build(src);
    let tgt_tree = KdTree::build(tgt);
    let radius = T::lit(cfg.descriptor_radius);
    let src_feats = compute_descriptors_with_tree(src, &src_tree, radius)?;
    let tgt_feats = compute_descriptors_with_tree(tgt, &tgt_tree, radius)?;
    let forward = register_with_features(src, tgt, &tgt_tree, &src_feats, &tgt_feats, cfg, seed);
    let backward = register_with_features(tgt, src, &src_tree, &tgt_feats, &src_feats, cfg, seed);
    Ok((forward, backward))
}
