//! Plain-text scene files.
//!
//! ```text
//! N C_in K
//! x y z f_1 … f_{C_in} label
//! …
//! ```
//! `label` is `-1` for unlabeled points. Reals are written in shortest
//! round-trip decimal form so identical clouds produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Label value meaning "unlabeled / ignore".
pub const IGNORE_LABEL: i64 = -1;

pub fn write_scene<T: Scalar>(path: &Path, cloud: &PointCloud<T>, num_classes: usize) -> Result<()> {
    std::fs::write(path, format_scene(cloud, num_classes))?;
    Ok(())
}

pub fn format_scene<T: Scalar>(cloud: &PointCloud<T>, num_classes: usize) -> String {
    let cin = cloud.features().cols();
    let mut s = String::new();
    writeln!(s, "{} {} {}", cloud.len(), cin, num_classes).unwrap();
    for (i, p) in cloud.positions().iter().enumerate() {
        write!(s, "{} {} {}", p[0].as_f64(), p[1].as_f64(), p[2].as_f64()).unwrap();
        for f in cloud.features().row(i) {
            write!(s, " {}", f.as_f64()).unwrap();
        }
        let label = cloud.labels().map_or(IGNORE_LABEL, |l| l[i]);
        writeln!(s, " {label}").unwrap();
    }
    s
}

/// Reads a scene; returns the cloud and the declared class count `K`.
pub fn read_scene<T: Scalar>(path: &Path) -> Result<(PointCloud<T>, usize)> {
    let text = std::fs::read_to_string(path)?;
    parse_scene(&text).map_err(|msg| Error::Parse { path: path.to_path_buf(), msg })
}

pub fn parse_scene<T: Scalar>(text: &str) -> std::result::Result<(PointCloud<T>, usize), String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or("missing header")?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("header `{header}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [n, cin, k] = head[..] else {
        return Err(format!("header `{header}` must be `N C_in K`"));
    };

    let mut positions = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * cin);
    let mut labels = Vec::with_capacity(n);
    for (lineno, line) in lines.by_ref().take(n) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 + cin {
            return Err(format!("line {}: expected {} fields, got {}", lineno + 1, 4 + cin, toks.len()));
        }
        let real = |t: &str| -> std::result::Result<T, String> {
            t.parse::<f64>().map(T::lit).map_err(|e| format!("line {}: `{t}`: {e}", lineno + 1))
        };
        positions.push([real(toks[0])?, real(toks[1])?, real(toks[2])?]);
        for t in &toks[3..3 + cin] {
            feats.push(real(t)?);
        }
        let label: i64 = toks[3 + cin].parse().map_err(|e| format!("line {}: label: {e}", lineno + 1))?;
        if label != IGNORE_LABEL && !(0..k as i64).contains(&label) {
            return Err(format!("line {}: label {label} outside [0, {k})", lineno + 1));
        }
        labels.push(label);
    }
    if positions.len() != n {
        return Err(format!("header declares {n} points, found {}", positions.len()));
    }
    if lines.next().is_some() {
        return Err(format!("more than {n} point lines"));
    }
    let features = Matrix::from_vec(n, cin, feats).map_err(|e| e.to_string())?;
    let cloud = PointCloud::new(positions, features, Some(labels)).map_err(|e| e.to_string())?;
    Ok((cloud, k))
}
