//! KITTI and TUM trajectory text formats.
//!
//! KITTI lines hold the row-major 3×4 `[R|t]` matrix; frame ids are implicit
//! (0, 1, ...) on read. TUM lines hold `frame_id tx ty tz qx qy qz qw`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::{read_text, write_file, IoError};
use crate::evaluation::TrajectoryEstimate;
use crate::sim3::Rotation3;

/// Rotations read from text may carry rounding; anything further than this
/// from orthonormal is rejected.
const ROTATION_READ_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Kitti,
    Tum,
}

impl FromStr for TrajectoryFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kitti" => Ok(Self::Kitti),
            "tum" => Ok(Self::Tum),
            other => Err(format!("unknown trajectory format '{other}' (kitti | tum)")),
        }
    }
}

/// Shortest decimal text that parses back to the same `f64` (at most 17
/// significant digits). Zero prints as `0`; very large or small magnitudes
/// switch to exponent notation.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub(crate) fn rotation_from_text(m: Matrix3<f64>) -> Result<Rotation3, String> {
    Rotation3::from_matrix(m)
        .or_else(|_| Rotation3::from_matrix_projected(m, ROTATION_READ_TOLERANCE))
        .map_err(|e| e.to_string())
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(format_number).collect::<Vec<_>>().join(" ")
}

pub fn kitti_line(r: &Rotation3, t: &Vector3<f64>) -> String {
    let m = r.matrix();
    join((0..3).flat_map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], t[i]]))
}

pub fn tum_line(frame_id: usize, r: &Rotation3, t: &Vector3<f64>) -> String {
    let q = quaternion_of(r);
    format!(
        "{frame_id} {}",
        join([t.x, t.y, t.z, q.i, q.j, q.k, q.w])
    )
}

/// Unit quaternion with non-negative real part.
fn quaternion_of(r: &Rotation3) -> Quaternion<f64> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r.matrix());
    let q = UnitQuaternion::from_rotation_matrix(&rot).into_inner();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

pub fn format_kitti(t: &TrajectoryEstimate) -> String {
    let mut out = String::new();
    for (r, p) in t.rotations().iter().zip(t.positions()) {
        let _ = writeln!(out, "{}", kitti_line(r, p));
    }
    out
}

pub fn format_tum(t: &TrajectoryEstimate) -> String {
    let mut out = String::new();
    for ((id, r), p) in t.frame_ids().iter().zip(t.rotations()).zip(t.positions()) {
        let _ = writeln!(out, "{}", tum_line(*id, r, p));
    }
    out
}

pub fn write_kitti(path: &Path, t: &TrajectoryEstimate) -> Result<(), IoError> {
    write_file(path, format_kitti(t).as_bytes())
}

pub fn write_tum(path: &Path, t: &TrajectoryEstimate) -> Result<(), IoError> {
    write_file(path, format_tum(t).as_bytes())
}

pub fn write_trajectory(
    path: &Path,
    t: &TrajectoryEstimate,
    format: TrajectoryFormat,
) -> Result<(), IoError> {
    match format {
        TrajectoryFormat::Kitti => write_kitti(path, t),
        TrajectoryFormat::Tum => write_tum(path, t),
    }
}

fn parse_numbers(line: &str, path: &Path, lineno: usize) -> Result<Vec<f64>, IoError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| IoError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                reason: format!("not a number: '{tok}'"),
            })
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_kitti(text: &str, path: &Path) -> Result<TrajectoryEstimate, IoError> {
    let mut rotations = Vec::new();
    let mut positions = Vec::new();
    for (lineno, line) in content_lines(text) {
        let parse_err = |reason: String| IoError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let v = parse_numbers(line, path, lineno)?;
        if v.len() != 12 {
            return Err(parse_err(format!("expected 12 values, found {}", v.len())));
        }
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        rotations.push(rotation_from_text(m).map_err(parse_err)?);
        positions.push(Vector3::new(v[3], v[7], v[11]));
    }
    let ids = (0..rotations.len()).collect();
    TrajectoryEstimate::new(ids, positions, rotations).map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn parse_tum(text: &str, path: &Path) -> Result<TrajectoryEstimate, IoError> {
    let mut ids = Vec::new();
    let mut rotations = Vec::new();
    let mut positions = Vec::new();
    for (lineno, line) in content_lines(text) {
        let parse_err = |reason: String| IoError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let v = parse_numbers(line, path, lineno)?;
        if v.len() != 8 {
            return Err(parse_err(format!("expected 8 values, found {}", v.len())));
        }
        if !(v[0] >= 0.0 && v[0].fract() == 0.0 && v[0] < u32::MAX as f64) {
            return Err(parse_err(format!("timestamp {} is not a frame index", v[0])));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if !(norm.is_finite() && (norm - 1.0).abs() < 1e-3) {
            return Err(parse_err(format!("quaternion norm {norm} is not 1")));
        }
        let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        ids.push(v[0] as usize);
        rotations.push(rotation_from_text(m).map_err(parse_err)?);
        positions.push(Vector3::new(v[1], v[2], v[3]));
    }
    TrajectoryEstimate::new(ids, positions, rotations).map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_kitti(path: &Path) -> Result<TrajectoryEstimate, IoError> {
    parse_kitti(&read_text(path)?, path)
}

pub fn read_tum(path: &Path) -> Result<TrajectoryEstimate, IoError> {
    parse_tum(&read_text(path)?, path)
}

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> Result<TrajectoryEstimate, IoError> {
    match format {
        TrajectoryFormat::Kitti => read_kitti(path),
        TrajectoryFormat::Tum => read_tum(path),
    }
}
