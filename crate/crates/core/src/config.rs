//! Run configuration for the batch commands, read from TOML.
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{RotLevel, CATEGORY_SHAPES};
use crate::error::{RegError, Result};
use crate::fusion::{FusionThresholds, ThresholdTable};
use crate::pipeline_a::PipelineAConfig;
use crate::pipeline_b::RansacConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for pair-level parallelism; 0 uses every core.
    pub workers: usize,
    pub gen: GenConfig,
    pub register: RegisterConfig,
    pub pipeline_a: PipelineAConfig,
    pub pipeline_b: RansacConfig,
    pub fusion: FusionConfig,
    /// Directory of the file the config was loaded from; relative paths in
    /// the config resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            gen: GenConfig::default(),
            register: RegisterConfig::default(),
            pipeline_a: PipelineAConfig::default(),
            pipeline_b: RansacConfig::default(),
            fusion: FusionConfig::default(),
            base_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Category ids; each maps to a shape family by `id % 16`.
    pub categories: Vec<u32>,
    pub pairs_per_category: usize,
    /// Pair `k` of a category uses `rot_levels[k % len]`.
    pub rot_levels: Vec<u8>,
    pub overlap_target: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub points_per_cloud: usize,
    pub translation_range: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            categories: (0..CATEGORY_SHAPES.len() as u32).collect(),
            pairs_per_category: 10,
            rot_levels: vec![0],
            overlap_target: 0.7,
            noise_sigma: 0.01,
            noise_clip: 0.5,
            points_per_cloud: 512,
            translation_range: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    A,
    B,
    Fuse,
}

impl std::str::FromStr for ModelChoice {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(ModelChoice::A),
            "b" => Ok(ModelChoice::B),
            "fuse" => Ok(ModelChoice::Fuse),
            other => Err(RegError::Config(format!("model must be a, b or fuse, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub model: ModelChoice,
    /// Distance under which a transformed source point counts as
    /// overlapping when computing OL1 and OL3.
    pub tau: f64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Fuse,
            tau: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Line-based threshold file; when set it replaces `default`.
    pub thresholds_file: Option<PathBuf>,
    pub default: FusionThresholds,
}

impl FusionConfig {
    /// Thresholds table; a relative `thresholds_file` is resolved against
    /// `base` (the config file's directory).
    pub fn table(&self, base: Option<&Path>) -> Result<ThresholdTable> {
        match &self.thresholds_file {
            Some(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                ThresholdTable::load(&path)
            }
            None => Ok(ThresholdTable {
                default: self.default,
                ..Default::default()
            }),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RegError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&crate::io::read_to_string(path)?).map_err(|e| match e {
            RegError::Config(m) => RegError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn thresholds(&self) -> Result<ThresholdTable> {
        self.fusion.table(self.base_dir.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gen;
        let bad = |m: String| Err(RegError::Config(m));
        if g.categories.is_empty() || g.pairs_per_category == 0 {
            return bad("gen needs at least one category and one pair per category".into());
        }
        let mut cats = g.categories.clone();
        cats.sort_unstable();
        if cats.windows(2).any(|w| w[0] == w[1]) {
            return bad("gen.categories must not repeat".into());
        }
        if g.rot_levels.is_empty() {
            return bad("gen.rot_levels must not be empty".into());
        }
        for &l in &g.rot_levels {
            RotLevel::from_index(l).map_err(|e| RegError::Config(e.to_string()))?;
        }
        // the per-pair spec carries the remaining datagen invariants
        let mut spec = crate::datagen::PairSpec::new(CATEGORY_SHAPES[0], RotLevel::Bounded, crate::geometry::RngSeed(0));
        spec.overlap_target = g.overlap_target;
        spec.noise_sigma = g.noise_sigma;
        spec.noise_clip = g.noise_clip;
        spec.points_per_cloud = g.points_per_cloud;
        spec.translation_range = g.translation_range;
        spec.validate().map_err(|e| RegError::Config(format!("gen: {e}")))?;
        if !(self.register.tau > 0.0 && self.register.tau.is_finite()) {
            return bad(format!("register.tau must be > 0, got {}", self.register.tau));
        }
        self.pipeline_a.validate()?;
        self.pipeline_b.validate()?;
        self.fusion.default.validate()?;
        Ok(())
    }
}
