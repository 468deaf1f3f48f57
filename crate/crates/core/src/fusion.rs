//! Rule-based choice between the two registration models.
//!
//! Model A is kept when `(l1 ∧ l2 ∧ l3) ∨ l4`:
//! - `l1`: the two directions of model A agree, `∠(R1, R2ᵀ) < d1`;
//! - `l2`: the model A rotation is small, `∠R1 < d2`;
//! - `l3`: model A sees enough overlap, `OL1 ≥ d3`;
//! - `l4`: model B does not beat model A's overlap by `d4` or more,
//!   `OL1 + d4 > OL3`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::geometry::{rotation_angle_deg, RigidTransform};
use crate::io::fmt_sig;
use crate::metrics::error_rot_isotropic;

pub const TRACE_HEADER: &str = "pair_id,l1,l2,l3,l4,chosen,rot_consistency_deg,angle_r1_deg,ol1,ol3";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionThresholds {
    /// Degrees.
    pub d1: f64,
    /// Degrees.
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
}

impl Default for FusionThresholds {
    fn default() -> Self {
        Self {
            d1: 15.0,
            d2: 60.0,
            d3: 0.3,
            d4: 0.05,
        }
    }
}

impl FusionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.d1) || !(0.0..=180.0).contains(&self.d2) {
            return Err(RegError::Config(format!("d1 and d2 must be in [0, 180] degrees, got {} and {}", self.d1, self.d2)));
        }
        if !(0.0..=1.0).contains(&self.d3) {
            return Err(RegError::Config(format!("d3 must be in [0, 1], got {}", self.d3)));
        }
        if !self.d4.is_finite() {
            return Err(RegError::Config(format!("d4 must be finite, got {}", self.d4)));
        }
        Ok(())
    }
}

/// Per-category thresholds with a fallback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdTable {
    pub default: FusionThresholds,
    pub categories: BTreeMap<u32, FusionThresholds>,
}

impl ThresholdTable {
    pub fn get(&self, category: u32) -> &FusionThresholds {
        self.categories.get(&category).unwrap_or(&self.default)
    }

    /// Parses `category_id d1 d2 d3 d4` lines and at most one
    /// `default d1 d2 d3 d4` line; `#` starts a comment line.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| RegError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut table = ThresholdTable::default();
        let mut seen_default = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(line, format!("expected 5 fields, found {}", fields.len())));
            }
            let mut d = [0.0f64; 4];
            for (slot, tok) in d.iter_mut().zip(&fields[1..]) {
                *slot = tok.parse().map_err(|_| err(line, format!("not a number: {tok:?}")))?;
            }
            let th = FusionThresholds {
                d1: d[0],
                d2: d[1],
                d3: d[2],
                d4: d[3],
            };
            th.validate().map_err(|e| err(line, e.to_string()))?;
            if fields[0] == "default" {
                if std::mem::replace(&mut seen_default, true) {
                    return Err(err(line, "duplicate default record".into()));
                }
                table.default = th;
            } else {
                let cat: u32 = fields[0]
                    .parse()
                    .map_err(|_| err(line, format!("category must be an integer or 'default', got {:?}", fields[0])))?;
                if table.categories.insert(cat, th).is_some() {
                    return Err(err(line, format!("duplicate record for category {cat}")));
                }
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |key: &str, t: &FusionThresholds| {
            let _ = writeln!(s, "{key} {} {} {} {}", t.d1, t.d2, t.d3, t.d4);
        };
        line("default", &self.default);
        for (c, t) in &self.categories {
            line(&c.to_string(), t);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionInput {
    /// Model A, source onto target.
    pub t1: RigidTransform<f64>,
    /// Model A, target onto source.
    pub t2: RigidTransform<f64>,
    /// Model B, source onto target.
    pub t3: RigidTransform<f64>,
    pub ol1: f64,
    pub ol3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    A,
    B,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::A => "A",
            Model::B => "B",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleTrace {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
    pub l4: bool,
    pub rot_consistency_deg: f64,
    pub angle_r1_deg: f64,
    pub ol1: f64,
    pub ol3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionDecision {
    pub chosen: Model,
    pub transform: RigidTransform<f64>,
    pub rules: RuleTrace,
}

pub fn rule_l1(t1: &RigidTransform<f64>, t2: &RigidTransform<f64>, d1: f64) -> bool {
    rot_consistency_deg(t1, t2) < d1
}

pub fn rule_l2(t1: &RigidTransform<f64>, d2: f64) -> bool {
    rotation_angle_deg(t1.rotation()) < d2
}

pub fn rule_l3(ol1: f64, d3: f64) -> bool {
    ol1 >= d3
}

pub fn rule_l4(ol1: f64, ol3: f64, d4: f64) -> bool {
    ol1 + d4 > ol3
}

pub fn predicate(l1: bool, l2: bool, l3: bool, l4: bool) -> bool {
    (l1 && l2 && l3) || l4
}

fn rot_consistency_deg(t1: &RigidTransform<f64>, t2: &RigidTransform<f64>) -> f64 {
    error_rot_isotropic(t1.rotation(), &t2.rotation().transpose())
}

pub fn fuse(input: &FusionInput, th: &FusionThresholds) -> Result<FusionDecision> {
    for (name, v) in [("OL1", input.ol1), ("OL3", input.ol3)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(RegError::InvalidInput(format!("{name} must be in [0, 1], got {v}")));
        }
    }
    let rules = RuleTrace {
        l1: rule_l1(&input.t1, &input.t2, th.d1),
        l2: rule_l2(&input.t1, th.d2),
        l3: rule_l3(input.ol1, th.d3),
        l4: rule_l4(input.ol1, input.ol3, th.d4),
        rot_consistency_deg: rot_consistency_deg(&input.t1, &input.t2),
        angle_r1_deg: rotation_angle_deg(input.t1.rotation()),
        ol1: input.ol1,
        ol3: input.ol3,
    };
    let (chosen, transform) = if predicate(rules.l1, rules.l2, rules.l3, rules.l4) {
        (Model::A, input.t1)
    } else {
        (Model::B, input.t3)
    };
    Ok(FusionDecision {
        chosen,
        transform,
        rules,
    })
}

/// One trace CSV line (no trailing newline); booleans are written as 0/1.
pub fn trace_row(pair_id: &str, d: &FusionDecision) -> String {
    let b = |v: bool| if v { "1" } else { "0" };
    let r = &d.rules;
    format!(
        "{pair_id},{},{},{},{},{},{},{},{},{}",
        b(r.l1),
        b(r.l2),
        b(r.l3),
        b(r.l4),
        d.chosen.as_str(),
        fmt_sig(r.rot_consistency_deg),
        fmt_sig(r.angle_r1_deg),
        fmt_sig(r.ol1),
        fmt_sig(r.ol3),
    )
}
