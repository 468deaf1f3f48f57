//! Plain-text formats: `.xyz` clouds, 4×4 transforms and 0/1 masks.
//!
//! Data files are written with shortest round-trip precision so a cloud or
//! transform survives a write/read cycle bit-for-bit; reports use
//! [`fmt_sig`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};

use crate::alignment::nearest_rotation;
use crate::error::{RegError, Result};
use crate::geometry::{is_rotation, PointCloud, RigidTransform};

/// Hand-edited rotation blocks within this distance of SO(3) (entrywise) are
/// projected onto it instead of rejected.
const ROTATION_REPAIR_TOLERANCE: f64 = 1e-4;

/// Formats `v` with 6 significant digits, like C's `%g`.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let exp_sign = if exp < 0 { '-' } else { '+' };
        return format!("{}e{exp_sign}{:02}", trim_zeros(mantissa), exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> RegError {
    RegError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_floats<const N: usize>(path: &Path, line: usize, text: &str) -> Result<[f64; N]> {
    let mut out = [0.0f64; N];
    let mut fields = text.split_whitespace();
    for slot in out.iter_mut() {
        let tok = fields
            .next()
            .ok_or_else(|| parse_err(path, line, format!("expected {N} numbers")))?;
        *slot = tok
            .parse()
            .map_err(|_| parse_err(path, line, format!("not a number: {tok:?}")))?;
        if !slot.is_finite() {
            return Err(parse_err(path, line, format!("non-finite value {tok:?}")));
        }
    }
    if fields.next().is_some() {
        return Err(parse_err(path, line, format!("expected exactly {N} numbers")));
    }
    Ok(out)
}

pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud<f64>> {
    let pts = data_lines(text)
        .map(|(n, l)| parse_floats::<3>(path, n, l).map(|[x, y, z]| Vector3::new(x, y, z)))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(pts).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn format_cloud(cloud: &PointCloud<f64>) -> String {
    let mut s = String::with_capacity(cloud.len() * 60);
    for p in cloud.iter() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn parse_transform(text: &str, path: &Path) -> Result<RigidTransform<f64>> {
    let rows: Vec<(usize, &str)> = data_lines(text).collect();
    if rows.len() != 4 {
        return Err(parse_err(path, 0, format!("expected 4 matrix rows, found {}", rows.len())));
    }
    let mut m = Matrix4::zeros();
    for (r, (n, l)) in rows.iter().enumerate() {
        let vals = parse_floats::<4>(path, *n, l)?;
        for (c, v) in vals.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if last != [0.0, 0.0, 0.0, 1.0] {
        return Err(parse_err(path, rows[3].0, "last row must be 0 0 0 1"));
    }
    let mut rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    if !is_rotation(&rot) {
        let repaired = nearest_rotation(&rot);
        if (repaired - rot).amax() > ROTATION_REPAIR_TOLERANCE {
            return Err(parse_err(path, 0, "rotation block is not in SO(3)"));
        }
        rot = repaired;
    }
    RigidTransform::new(rot, m.fixed_view::<3, 1>(0, 3).into_owned()).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn format_transform(t: &RigidTransform<f64>) -> String {
    let m = t.to_homogeneous();
    let mut s = String::new();
    for r in 0..4 {
        let _ = writeln!(s, "{} {} {} {}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]);
    }
    s
}

pub fn parse_mask(text: &str, path: &Path) -> Result<Vec<bool>> {
    data_lines(text)
        .map(|(n, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_err(path, n, format!("mask entries are 0 or 1, got {other:?}"))),
        })
        .collect()
}

pub fn format_mask(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect()
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RegError::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud<f64>> {
    parse_cloud(&read_to_string(path)?, path)
}

pub fn read_transform(path: &Path) -> Result<RigidTransform<f64>> {
    parse_transform(&read_to_string(path)?, path)
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>> {
    parse_mask(&read_to_string(path)?, path)
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file and an interrupted run leaves either nothing or the whole
/// file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| RegError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| RegError::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents).map_err(|e| RegError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        RegError::io(path, e)
    })
}
