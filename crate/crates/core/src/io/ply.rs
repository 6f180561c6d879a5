//! Binary little-endian PLY with `float x y z` and optional `uchar red green blue`.

use std::path::Path;

use nalgebra::Vector3;

use super::{read_file, write_file, IoError};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            colors: None,
        }
    }

    pub fn with_colors(points: Vec<Vector3<f64>>, colors: Vec<[u8; 3]>) -> Result<Self, String> {
        if colors.len() != points.len() {
            return Err(format!("{} colors for {} points", colors.len(), points.len()));
        }
        Ok(Self {
            points,
            colors: Some(colors),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn record_size(&self) -> usize {
        if self.colors.is_some() {
            15
        } else {
            12
        }
    }
}

pub fn ply_header(n: usize, with_color: bool) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {n}\n"));
    h.push_str("property float x\nproperty float y\nproperty float z\n");
    if with_color {
        h.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    h.push_str("end_header\n");
    h
}

pub fn ply_bytes(cloud: &PointCloud) -> Result<Vec<u8>, IoError> {
    if cloud.is_empty() {
        return Err(IoError::EmptyCloud);
    }
    let header = ply_header(cloud.len(), cloud.colors.is_some());
    let mut out = Vec::with_capacity(header.len() + cloud.len() * cloud.record_size());
    out.extend_from_slice(header.as_bytes());
    for (k, p) in cloud.points.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(colors) = &cloud.colors {
            out.extend_from_slice(&colors[k]);
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    write_file(path, &ply_bytes(cloud)?)
}

/// Reads files in the layout produced by [`write_ply`].
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PointCloud, IoError> {
    let invalid = |reason: String| IoError::Invalid {
        path: path.to_path_buf(),
        reason,
    };
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| invalid("missing end_header".into()))?
        + END.len();
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| invalid("header is not text".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(invalid("missing ply signature".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(invalid(format!("unsupported format {other}"))),
            ["comment", ..] | ["end_header"] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| invalid(format!("bad count {n}")))?)
            }
            ["element", other, ..] => return Err(invalid(format!("unsupported element {other}"))),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => return Err(invalid(format!("unrecognized header line '{line}'"))),
        }
    }
    let n = count.ok_or_else(|| invalid("no vertex element".into()))?;
    let xyz = ["x", "y", "z"].map(|a| ("float".to_string(), a.to_string()));
    let rgb = ["red", "green", "blue"].map(|a| ("uchar".to_string(), a.to_string()));
    let with_color = if props == xyz {
        false
    } else if props.len() == 6 && props[..3] == xyz && props[3..] == rgb {
        true
    } else {
        return Err(invalid(format!("unsupported vertex properties {props:?}")));
    };
    let record = if with_color { 15 } else { 12 };
    let expected = n
        .checked_mul(record)
        .and_then(|b| b.checked_add(end))
        .ok_or_else(|| IoError::DimOverflow {
            path: path.to_path_buf(),
            reason: format!("{n} vertices"),
        })?;
    if bytes.len() < expected {
        return Err(IoError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IoError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - expected,
        });
    }
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(if with_color { n } else { 0 });
    for rec in bytes[end..].chunks_exact(record) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
        points.push(Vector3::new(f(0), f(4), f(8)));
        if with_color {
            colors.push([rec[12], rec[13], rec[14]]);
        }
    }
    Ok(PointCloud {
        points,
        colors: with_color.then_some(colors),
    })
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    parse_ply(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("cloud.ply")
    }

    #[test]
    fn single_point_header() {
        let bytes = ply_bytes(&PointCloud::new(vec![Vector3::zeros()])).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\nelement vertex 1\n"));
        assert!(text.contains("property float x\nproperty float y\nproperty float z\nend_header\n"));
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(ply_bytes(&PointCloud::new(vec![])), Err(IoError::EmptyCloud)));
    }

    #[test]
    fn roundtrip_with_and_without_color() {
        let pts = vec![Vector3::new(1.5, -2.0, 3.25), Vector3::new(0.0, 1e3, -7.125)];
        let plain = PointCloud::new(pts.clone());
        assert_eq!(parse_ply(&ply_bytes(&plain).unwrap(), &p()).unwrap(), plain);
        let colored = PointCloud::with_colors(pts, vec![[1, 2, 3], [255, 0, 128]]).unwrap();
        assert_eq!(parse_ply(&ply_bytes(&colored).unwrap(), &p()).unwrap(), colored);
    }

    #[test]
    fn file_size_matches_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..10_000)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&path, &PointCloud::new(pts.clone())).unwrap();
        let header = ply_header(10_000, false);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, header.len() + 10_000 * 12);
        let back = read_ply(&path).unwrap();
        for (a, b) in pts.iter().zip(&back.points) {
            assert_eq!(a.map(|v| v as f32 as f64), *b);
        }
    }

    #[test]
    fn truncated_body() {
        let bytes = ply_bytes(&PointCloud::new(vec![Vector3::zeros(); 3])).unwrap();
        assert!(matches!(
            parse_ply(&bytes[..bytes.len() - 2], &p()),
            Err(IoError::TruncatedPayload { .. })
        ));
    }
}
