//! Dataset-level commands: generate pairs, register them, evaluate.
//!
//! Layout under a dataset directory: `pairs/<category>/<pair_id>/` holding
//! `src.xyz`, `tgt.xyz`, `gt.txt` and `mask.txt`. Results mirror it with
//! `pred.txt` per pair (plus `t1.txt`, `t2.txt`, `t3.txt` and
//! `decision.csv` when fusing) and a run-level `fusion_trace.csv`.
//!
//! Work is parallel over pairs, every file is written atomically, and each
//! pair's randomness is derived from the run seed and the pair id, so outputs
//! do not depend on the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;

use crate::alignment::overlap_ratio;
use crate::config::{ModelChoice, RunConfig};
use crate::datagen::{generate_pair, GeneratedPair, PairSpec, RotLevel, CATEGORY_SHAPES};
use crate::error::{RegError, Result};
use crate::fusion::{fuse, trace_row, FusionInput, ThresholdTable, TRACE_HEADER};
use crate::geometry::{RigidTransform, RngSeed};
use crate::io::{
    fmt_sig, format_cloud, format_mask, format_transform, read_cloud, read_to_string, read_transform, write_atomic,
};
use crate::metrics::{summarize, MetricsRecord, PairMetrics, SummaryRow};
use crate::pipeline_a::{register_a, register_a_bidirectional};
use crate::pipeline_b::ransac_register;

pub const METRICS_HEADER: &str = "category,pair_id,error_r_deg,error_t,mae_r_deg,mae_t,mse";
pub const SUMMARY_HEADER: &str = "category,count,error_r_deg,error_t,mae_r_deg,mae_t,mse";
const PAIRS_DIR: &str = "pairs";
const DATA_FILES: [&str; 4] = ["src.xyz", "tgt.xyz", "gt.txt", "mask.txt"];

/// Identifier of one pair within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairRef {
    pub category: u32,
    pub pair_id: String,
}

impl PairRef {
    pub fn new(category: u32, index: usize) -> Self {
        Self {
            category,
            pair_id: format!("{category:02}_{index:04}"),
        }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(PAIRS_DIR).join(self.category.to_string()).join(&self.pair_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairFailure {
    pub pair_id: String,
    pub message: String,
}

/// Outcome of a batch command. Failed pairs do not stop the run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchReport {
    pub processed: usize,
    pub skipped: usize,
    pub failures: Vec<PairFailure>,
}

impl BatchReport {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }

    fn collect(outcomes: Vec<(PairRef, Result<bool>)>) -> Self {
        let mut report = BatchReport::default();
        for (pair, outcome) in outcomes {
            match outcome {
                Ok(true) => report.processed += 1,
                Ok(false) => report.skipped += 1,
                Err(e) => {
                    warn!("pair {}: {e}", pair.pair_id);
                    report.failures.push(PairFailure {
                        pair_id: pair.pair_id,
                        message: e.to_string(),
                    });
                }
            }
        }
        report
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RegError::Config(format!("cannot start {workers} workers: {e}")))
}

fn run_pairs<F>(workers: usize, pairs: &[PairRef], f: F) -> Result<BatchReport>
where
    F: Fn(usize, &PairRef) -> Result<bool> + Sync,
{
    let outcomes = pool(workers)?.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), f(i, p)))
            .collect::<Vec<_>>()
    });
    Ok(BatchReport::collect(outcomes))
}

/// Pairs present under `root`, sorted by category then pair id.
pub fn list_pairs(root: &Path) -> Result<Vec<PairRef>> {
    let base = root.join(PAIRS_DIR);
    let read = |d: &Path| fs::read_dir(d).map_err(|e| RegError::io(d, e));
    let mut pairs = Vec::new();
    for cat in read(&base)? {
        let cat = cat.map_err(|e| RegError::io(&base, e))?;
        let Some(category) = cat.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        if !cat.path().is_dir() {
            continue;
        }
        for p in read(&cat.path())? {
            let p = p.map_err(|e| RegError::io(cat.path(), e))?;
            if p.path().is_dir() {
                if let Some(id) = p.file_name().to_str() {
                    pairs.push(PairRef {
                        category,
                        pair_id: id.to_string(),
                    });
                }
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Generation spec of pair `index` in `category`.
pub fn pair_spec(cfg: &RunConfig, category: u32, index: usize) -> Result<PairSpec> {
    let g = &cfg.gen;
    let level = RotLevel::from_index(g.rot_levels[index % g.rot_levels.len()])?;
    let seed = RngSeed(cfg.seed).derive_str("gen").derive(u64::from(category)).derive(index as u64);
    let mut spec = PairSpec::new(CATEGORY_SHAPES[category as usize % CATEGORY_SHAPES.len()], level, seed);
    spec.category_id = category;
    spec.overlap_target = g.overlap_target;
    spec.noise_sigma = g.noise_sigma;
    spec.noise_clip = g.noise_clip;
    spec.points_per_cloud = g.points_per_cloud;
    spec.translation_range = g.translation_range;
    Ok(spec)
}

pub fn write_pair(dir: &Path, pair: &GeneratedPair<f64>) -> Result<()> {
    write_atomic(&dir.join("src.xyz"), &format_cloud(&pair.src))?;
    write_atomic(&dir.join("tgt.xyz"), &format_cloud(&pair.tgt))?;
    write_atomic(&dir.join("gt.txt"), &format_transform(&pair.t_gt))?;
    write_atomic(&dir.join("mask.txt"), &format_mask(&pair.overlap_mask_src))
}

/// Writes `gen.categories × gen.pairs_per_category` pairs under `out`.
/// With `resume`, pairs whose four files already exist are left alone.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, resume: bool) -> Result<BatchReport> {
    cfg.validate()?;
    let per_category = cfg.gen.pairs_per_category;
    let pairs: Vec<PairRef> = cfg
        .gen
        .categories
        .iter()
        .flat_map(|&c| (0..per_category).map(move |i| PairRef::new(c, i)))
        .collect();
    fs::create_dir_all(out.join(PAIRS_DIR)).map_err(|e| RegError::io(out, e))?;
    let report = run_pairs(cfg.workers, &pairs, |k, p| {
        let dir = p.dir(out);
        if resume && DATA_FILES.iter().all(|f| dir.join(f).is_file()) {
            return Ok(false);
        }
        let index = k % per_category;
        let pair = generate_pair::<f64>(&pair_spec(cfg, p.category, index)?)?;
        write_pair(&dir, &pair)?;
        debug!("generated {} (overlap {:.3})", p.pair_id, pair.planted_overlap);
        Ok(true)
    })?;
    info!("gen: {} written, {} kept, {} failed", report.processed, report.skipped, report.failures.len());
    Ok(report)
}

fn pair_seed(cfg: &RunConfig, pair: &PairRef) -> RngSeed {
    RngSeed(cfg.seed).derive_str("register").derive_str(&pair.pair_id)
}

fn register_one(cfg: &RunConfig, thresholds: &ThresholdTable, dataset: &Path, out_dir: &Path, pair: &PairRef) -> Result<()> {
    let dir = pair.dir(dataset);
    let src = read_cloud(&dir.join("src.xyz"))?;
    let tgt = read_cloud(&dir.join("tgt.xyz"))?;
    let seed = pair_seed(cfg, pair);
    match cfg.register.model {
        ModelChoice::A => {
            let r = register_a(&src, &tgt, &cfg.pipeline_a, seed)?;
            write_atomic(&out_dir.join("pred.txt"), &format_transform(&r.transform))
        }
        ModelChoice::B => {
            let r = ransac_register(&src, &tgt, &cfg.pipeline_b, seed)?;
            write_atomic(&out_dir.join("pred.txt"), &format_transform(&r.transform))
        }
        ModelChoice::Fuse => {
            let (a1, a2) = register_a_bidirectional(&src, &tgt, &cfg.pipeline_a, seed)?;
            let b = ransac_register(&src, &tgt, &cfg.pipeline_b, seed)?;
            let tau = cfg.register.tau;
            let input = FusionInput {
                t1: a1.transform,
                t2: a2.transform,
                t3: b.transform,
                ol1: overlap_ratio(&src, &tgt, &a1.transform, tau)?,
                ol3: overlap_ratio(&src, &tgt, &b.transform, tau)?,
            };
            let decision = fuse(&input, thresholds.get(pair.category))?;
            write_atomic(&out_dir.join("t1.txt"), &format_transform(&input.t1))?;
            write_atomic(&out_dir.join("t2.txt"), &format_transform(&input.t2))?;
            write_atomic(&out_dir.join("t3.txt"), &format_transform(&input.t3))?;
            write_atomic(&out_dir.join("decision.csv"), &(trace_row(&pair.pair_id, &decision) + "\n"))?;
            // written last: its presence marks the pair as complete
            write_atomic(&out_dir.join("pred.txt"), &format_transform(&decision.transform))
        }
    }
}

fn register_done(out_dir: &Path, model: ModelChoice) -> bool {
    out_dir.join("pred.txt").is_file() && (model != ModelChoice::Fuse || out_dir.join("decision.csv").is_file())
}

/// Registers every pair of `dataset` with the configured model and writes
/// predictions under `out`. With `resume`, pairs that already have outputs
/// are skipped. Per-pair failures are reported, not fatal; the list is also
/// written to `failures.csv`.
pub fn cmd_register(cfg: &RunConfig, dataset: &Path, out: &Path, resume: bool) -> Result<BatchReport> {
    cfg.validate()?;
    let thresholds = cfg.thresholds()?;
    let pairs = list_pairs(dataset)?;
    if pairs.is_empty() {
        warn!("no pairs under {}", dataset.display());
    }
    let model = cfg.register.model;
    let report = run_pairs(cfg.workers, &pairs, |_, p| {
        let out_dir = p.dir(out);
        if resume && register_done(&out_dir, model) {
            return Ok(false);
        }
        register_one(cfg, &thresholds, dataset, &out_dir, p)?;
        debug!("registered {}", p.pair_id);
        Ok(true)
    })?;

    if model == ModelChoice::Fuse {
        let mut trace = String::from(TRACE_HEADER);
        trace.push('\n');
        for p in &pairs {
            let path = p.dir(out).join("decision.csv");
            if let Ok(row) = fs::read_to_string(&path) {
                trace.push_str(&row);
            }
        }
        write_atomic(&out.join("fusion_trace.csv"), &trace)?;
    }
    let mut failures = String::from("pair_id,error\n");
    for f in &report.failures {
        let _ = writeln!(failures, "{},\"{}\"", f.pair_id, f.message.replace('"', "'"));
    }
    write_atomic(&out.join("failures.csv"), &failures)?;
    info!(
        "register: {} done, {} resumed, {} failed",
        report.processed,
        report.skipped,
        report.failures.len()
    );
    Ok(report)
}

/// Per-pair metrics and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord<f64>>,
    pub summary: Vec<SummaryRow<f64>>,
    /// Pair ids present on only one side, or whose files could not be read.
    pub excluded: Vec<String>,
}

pub fn metrics_csv(records: &[MetricsRecord<f64>]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.category,
            r.pair_id,
            fmt_sig(m.error_r_deg),
            fmt_sig(m.error_t),
            fmt_sig(m.mae_r_deg),
            fmt_sig(m.mae_t),
            fmt_sig(m.mse)
        );
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow<f64>]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.key,
            r.count,
            fmt_sig(r.error_r_deg),
            fmt_sig(r.error_t),
            fmt_sig(r.mae_r_deg),
            fmt_sig(r.mae_t),
            fmt_sig(r.mse)
        );
    }
    s
}

fn evaluate_one(dataset: &Path, results: &Path, pair: &PairRef) -> Result<MetricsRecord<f64>> {
    let gt = read_transform(&pair.dir(dataset).join("gt.txt"))?;
    let pred = read_transform(&pair.dir(results).join("pred.txt"))?;
    Ok(MetricsRecord {
        category: pair.category,
        pair_id: pair.pair_id.clone(),
        metrics: PairMetrics::evaluate(&pred, &gt),
    })
}

/// Compares `results` against the dataset ground truth and writes
/// `metrics.csv` and `summary.csv` into `out`. Pairs missing on either side
/// are excluded with a warning.
pub fn cmd_eval(dataset: &Path, results: &Path, out: &Path) -> Result<EvalReport> {
    let truth = list_pairs(dataset)?;
    let predicted: std::collections::BTreeSet<PairRef> = list_pairs(results)?.into_iter().collect();
    let mut excluded: Vec<String> = Vec::new();
    let mut records = Vec::new();
    for p in &truth {
        if !predicted.contains(p) || !p.dir(results).join("pred.txt").is_file() {
            warn!("no prediction for {}; excluded", p.pair_id);
            excluded.push(p.pair_id.clone());
            continue;
        }
        match evaluate_one(dataset, results, p) {
            Ok(r) => records.push(r),
            Err(e) => {
                warn!("pair {}: {e}; excluded", p.pair_id);
                excluded.push(p.pair_id.clone());
            }
        }
    }
    let truth_set: std::collections::BTreeSet<&PairRef> = truth.iter().collect();
    for p in &predicted {
        if !truth_set.contains(p) {
            warn!("prediction {} has no ground truth; excluded", p.pair_id);
            excluded.push(p.pair_id.clone());
        }
    }
    let summary = summarize(&records);
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&records))?;
    write_atomic(&out.join("summary.csv"), &summary_csv(&summary))?;
    info!("eval: {} pairs scored, {} excluded", records.len(), excluded.len());
    Ok(EvalReport {
        records,
        summary,
        excluded,
    })
}

/// Reads the rows of a fusion trace written by [`cmd_register`].
pub fn read_trace(results: &Path) -> Result<Vec<String>> {
    let path = results.join("fusion_trace.csv");
    Ok(read_to_string(&path)?.lines().skip(1).map(str::to_string).collect())
}

/// Ground-truth transform of a generated pair, for callers that score
/// predictions themselves.
pub fn read_ground_truth(dataset: &Path, pair: &PairRef) -> Result<RigidTransform<f64>> {
    read_transform(&pair.dir(dataset).join("gt.txt"))
}
