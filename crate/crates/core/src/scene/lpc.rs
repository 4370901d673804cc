//! ASCII labeled point cloud files.
//!
//! ```text
//! LPC 1
//! counts N G
//! prim <id> <type> <c1> ... <c10>     (G lines)
//! pt <x> <y> <z> <label>              (N lines)
//! ```
//!
//! Partial scans use G = 0 and label 0.

use std::fmt::Write as _;
use std::path::Path;

use super::{LabeledCloud, SceneError};
use crate::geometry::{PrimitiveType, Quadric, Vec3};

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn render(points: &[Vec3], labels: Option<&[usize]>, quadrics: &[Quadric]) -> String {
    let mut s = String::with_capacity(80 * (points.len() + 2));
    s.push_str("LPC 1\n");
    let _ = writeln!(s, "counts {} {}", points.len(), quadrics.len());
    for (g, q) in quadrics.iter().enumerate() {
        let _ = write!(s, "prim {} {}", g + 1, q.type_tag().name());
        for c in q.coeffs() {
            let _ = write!(s, " {}", real(*c));
        }
        s.push('\n');
    }
    for (i, p) in points.iter().enumerate() {
        let l = labels.map_or(0, |l| l[i]);
        let _ = writeln!(s, "pt {} {} {} {l}", real(p.x), real(p.y), real(p.z));
    }
    s
}

pub fn write_lpc(cloud: &LabeledCloud, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let quadrics: Vec<Quadric> = cloud.primitives.iter().map(|bp| bp.quadric).collect();
    std::fs::write(path, render(&cloud.points, Some(&cloud.labels), &quadrics))?;
    Ok(())
}

pub fn write_scan(points: &[Vec3], path: impl AsRef<Path>) -> Result<(), SceneError> {
    std::fs::write(path, render(points, None, &[]))?;
    Ok(())
}

struct Parsed {
    points: Vec<Vec3>,
    labels: Vec<usize>,
    quadrics: Vec<Quadric>,
}

fn err(line: usize, message: impl Into<String>) -> SceneError {
    SceneError::ParseError { line, message: message.into() }
}

fn parse(text: &str) -> Result<Parsed, SceneError> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));
    let (n, header) = next("header")?;
    if header.trim() != "LPC 1" {
        return Err(err(n, format!("bad magic {header:?}")));
    }
    let (n, counts) = next("counts")?;
    let f: Vec<&str> = counts.split_whitespace().collect();
    if f.len() != 3 || f[0] != "counts" {
        return Err(err(n, "expected `counts N G`"));
    }
    let num = |s: &str, n: usize| s.parse::<usize>().map_err(|_| err(n, format!("bad count {s:?}")));
    let (np, ng) = (num(f[1], n)?, num(f[2], n)?);
    // reject counts that cannot fit in the remaining text before allocating
    if np.saturating_add(ng) > text.len() {
        return Err(err(n, "counts exceed file size"));
    }
    let float = |s: &str, n: usize| match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(err(n, format!("bad real {s:?}"))),
    };
    let mut quadrics = Vec::with_capacity(ng);
    for g in 0..ng {
        let (n, l) = next("prim line")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 13 || f[0] != "prim" {
            return Err(err(n, "expected `prim <id> <type> <10 coefficients>`"));
        }
        if num(f[1], n)? != g + 1 {
            return Err(err(n, format!("primitive id {} out of order", f[1])));
        }
        let ty = PrimitiveType::from_name(f[2])
            .filter(|t| *t != PrimitiveType::Null)
            .ok_or_else(|| err(n, format!("unknown primitive type {:?}", f[2])))?;
        let mut c = [0.0; 10];
        for (k, v) in f[3..].iter().enumerate() {
            c[k] = float(v, n)?;
        }
        let q = Quadric::with_type(c, ty).map_err(|e| err(n, e.to_string()))?;
        quadrics.push(q);
    }
    let mut points = Vec::with_capacity(np);
    let mut labels = Vec::with_capacity(np);
    for _ in 0..np {
        let (n, l) = next("pt line")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 || f[0] != "pt" {
            return Err(err(n, "expected `pt <x> <y> <z> <label>`"));
        }
        points.push(Vec3::new(float(f[1], n)?, float(f[2], n)?, float(f[3], n)?));
        labels.push(num(f[4], n)?);
    }
    for (n, l) in lines {
        if !l.trim().is_empty() {
            return Err(err(n, "trailing content"));
        }
    }
    Ok(Parsed { points, labels, quadrics })
}

/// Reads a labeled cloud and validates all cloud invariants.
pub fn read_lpc(path: impl AsRef<Path>) -> Result<LabeledCloud, SceneError> {
    let p = parse(&std::fs::read_to_string(path)?)?;
    LabeledCloud::from_labels(p.points, p.labels, p.quadrics)
}

/// Reads an unlabeled scan (G = 0, every label 0).
pub fn read_scan(path: impl AsRef<Path>) -> Result<Vec<Vec3>, SceneError> {
    let p = parse(&std::fs::read_to_string(path)?)?;
    if !p.quadrics.is_empty() || p.labels.iter().any(|&l| l != 0) {
        return Err(SceneError::InvariantViolation("scan files carry no primitives or labels".into()));
    }
    if p.points.is_empty() {
        return Err(SceneError::InvariantViolation("scan has no points".into()));
    }
    Ok(p.points)
}
