//! Chunk scheduling, depth normalization, back-projection and the
//! reliability mask used to pick alignment points.

use std::ops::Range;

use log::warn;
use nalgebra::Vector3;
use thiserror::Error;

use crate::loops::PatchTokens;
use crate::sim3::Sim3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid chunk window: {n_frames} frames, chunk size {chunk_size}, overlap {overlap}")]
    InvalidWindow {
        n_frames: usize,
        chunk_size: usize,
        overlap: usize,
    },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth map: {0}")]
    InvalidDepth(String),
    #[error("invalid chunk {chunk_id}: {reason}")]
    InvalidChunk { chunk_id: usize, reason: String },
}

/// Frame ranges of the temporal chunks: windows of `chunk_size` frames
/// advancing by `chunk_size - overlap`. The last window is shifted back so it
/// ends on the final frame.
pub fn chunk_indices(
    n_frames: usize,
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<Range<usize>>, GeometryError> {
    if overlap == 0 || overlap >= chunk_size || chunk_size > n_frames {
        return Err(GeometryError::InvalidWindow {
            n_frames,
            chunk_size,
            overlap,
        });
    }
    let step = chunk_size - overlap;
    let mut ranges = Vec::new();
    let mut start = 0;
    while start + chunk_size < n_frames {
        ranges.push(start..start + chunk_size);
        start += step;
    }
    ranges.push(n_frames - chunk_size..n_frames);
    Ok(ranges)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Same principal point and image size, focal lengths of `reference`.
    /// Depths normalized to `reference` are back-projected through this.
    pub fn with_focal_of(&self, reference: &Intrinsics) -> Intrinsics {
        Intrinsics {
            fx: reference.fx,
            fy: reference.fy,
            ..*self
        }
    }

    /// Pixel `(u, v)` and depth of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        (p.z > 0.0).then(|| {
            (
                self.fx * p.x / p.z + self.cx,
                self.fy * p.y / p.z + self.cy,
                p.z,
            )
        })
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }
}

/// Per-pixel depth and confidence, row-major (`v * width + u`).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    confidence: Vec<f64>,
}

impl DepthMap {
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<f64>,
        confidence: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        let n = width * height;
        if depth.len() != n || confidence.len() != n {
            return Err(GeometryError::InvalidDepth(format!(
                "expected {n} values, got depth {} confidence {}",
                depth.len(),
                confidence.len()
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(GeometryError::InvalidDepth(format!("depth value {bad}")));
        }
        if let Some(bad) = confidence.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(GeometryError::InvalidDepth(format!("confidence value {bad}")));
        }
        Ok(Self {
            width,
            height,
            depth,
            confidence,
        })
    }

    /// Uniform confidence of 1.
    pub fn from_depth(width: usize, height: usize, depth: Vec<f64>) -> Result<Self, GeometryError> {
        let n = depth.len();
        Self::new(width, height, depth, vec![1.0; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn confidence_at(&self, u: usize, v: usize) -> f64 {
        self.confidence[v * self.width + u]
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidence.is_empty() {
            return 0.0;
        }
        self.confidence.iter().sum::<f64>() / self.confidence.len() as f64
    }

    pub fn scaled(&self, factor: f64) -> DepthMap {
        DepthMap {
            depth: self.depth.iter().map(|d| d * factor).collect(),
            ..self.clone()
        }
    }

    fn check_same_shape(&self, other: &DepthMap) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }
}

/// Rescales depth to a reference focal length by the mean of the x and y
/// focal ratios. Confidence is untouched.
pub fn normalize_depth(d: &DepthMap, src: &Intrinsics, reference: &Intrinsics) -> DepthMap {
    d.scaled(depth_normalization_factor(src, reference))
}

pub fn depth_normalization_factor(src: &Intrinsics, reference: &Intrinsics) -> f64 {
    0.5 * (reference.fx / src.fx + reference.fy / src.fy)
}

/// Lifts every pixel with positive depth through `k`, then through the
/// camera-to-world `pose`.
pub fn backproject(d: &DepthMap, k: &Intrinsics, pose: &Sim3) -> Vec<Vector3<f64>> {
    backproject_where(d, k, pose, |_| true)
}

/// As [`backproject`], restricted to pixels (flat index) accepted by `keep`.
pub fn backproject_where(
    d: &DepthMap,
    k: &Intrinsics,
    pose: &Sim3,
    keep: impl Fn(usize) -> bool,
) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for v in 0..d.height {
        for u in 0..d.width {
            let idx = v * d.width + u;
            let z = d.depth[idx];
            if z > 0.0 && keep(idx) {
                out.push(pose.apply(&k.unproject(u as f64, v as f64, z)));
            }
        }
    }
    out
}

/// Per-pixel selection over one frame seen by two chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl SamplingMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Keeps pixels where the two normalized depths agree within `lambda_d` and
/// both confidences exceed `lambda_gamma` times their frame mean.
///
/// A frame whose mean confidence is zero carries no confidence signal; its
/// confidence test is skipped and a warning is logged.
pub fn reliability_mask(
    d_t: &DepthMap,
    d_t1: &DepthMap,
    lambda_d: f64,
    lambda_gamma: f64,
) -> Result<SamplingMask, GeometryError> {
    d_t.check_same_shape(d_t1)?;
    let mean_t = d_t.mean_confidence();
    let mean_t1 = d_t1.mean_confidence();
    if mean_t == 0.0 || mean_t1 == 0.0 {
        warn!("zero mean confidence in overlap frame; reliability mask uses the depth test only");
    }
    let gate_t = lambda_gamma * mean_t;
    let gate_t1 = lambda_gamma * mean_t1;
    let bits = d_t
        .depth
        .iter()
        .zip(&d_t1.depth)
        .zip(d_t.confidence.iter().zip(&d_t1.confidence))
        .map(|((a, b), (ga, gb))| {
            (a - b).abs() < lambda_d
                && (mean_t == 0.0 || *ga > gate_t)
                && (mean_t1 == 0.0 || *gb > gate_t1)
        })
        .collect();
    Ok(SamplingMask {
        width: d_t.width,
        height: d_t.height,
        bits,
    })
}

/// Temporal chunks are contiguous sliding windows; loop chunks concatenate two
/// separated windows around a detected loop pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkKind {
    Temporal,
    Loop,
}

/// One reconstructed chunk: per-frame intrinsics, camera-to-chunk poses,
/// depth/confidence maps and encoder patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkArtifact {
    pub chunk_id: usize,
    pub kind: ChunkKind,
    pub frame_ids: Vec<usize>,
    pub intrinsics: Vec<Intrinsics>,
    pub poses: Vec<Sim3>,
    pub depths: Vec<DepthMap>,
    pub tokens: Vec<PatchTokens>,
}

impl ChunkArtifact {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Position of a global frame id inside this chunk.
    pub fn position_of(&self, frame_id: usize) -> Option<usize> {
        self.frame_ids.iter().position(|f| *f == frame_id)
    }

    pub fn contains(&self, frame_id: usize) -> bool {
        self.position_of(frame_id).is_some()
    }

    /// Frame ids present in both chunks, in this chunk's order.
    pub fn shared_frames(&self, other: &ChunkArtifact) -> Vec<usize> {
        self.frame_ids
            .iter()
            .copied()
            .filter(|f| other.contains(*f))
            .collect()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fail = |reason: String| GeometryError::InvalidChunk {
            chunk_id: self.chunk_id,
            reason,
        };
        let n = self.frame_ids.len();
        if n == 0 {
            return Err(fail("no frames".into()));
        }
        let lens = [
            self.intrinsics.len(),
            self.poses.len(),
            self.depths.len(),
            self.tokens.len(),
        ];
        if lens.iter().any(|l| *l != n) {
            return Err(fail(format!(
                "per-frame lists disagree: {n} frame ids, intrinsics/poses/depths/tokens {lens:?}"
            )));
        }
        match self.kind {
            ChunkKind::Temporal => {
                if self.frame_ids.windows(2).any(|w| w[1] != w[0] + 1) {
                    return Err(fail("temporal frame ids must be contiguous and increasing".into()));
                }
            }
            ChunkKind::Loop => {
                let mut seen = self.frame_ids.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != n {
                    return Err(fail("duplicate frame ids in loop chunk".into()));
                }
            }
        }
        for (k, d) in self.intrinsics.iter().zip(&self.depths) {
            k.validate()?;
            if d.width != k.width || d.height != k.height {
                return Err(fail(format!(
                    "depth map {}x{} does not match intrinsics {}x{}",
                    d.width, d.height, k.width, k.height
                )));
            }
        }
        Ok(())
    }
}

/// Checks that consecutive temporal chunks share exactly `overlap` frames
/// (the last pair may share more when the final window was shifted back).
pub fn check_chunk_sequence(chunks: &[ChunkArtifact], overlap: usize) -> Result<(), GeometryError> {
    for (idx, pair) in chunks.windows(2).enumerate() {
        let shared = pair[0].shared_frames(&pair[1]).len();
        let is_last = idx + 2 == chunks.len();
        if shared == 0 || (!is_last && shared != overlap) || (is_last && shared < overlap) {
            return Err(GeometryError::InvalidChunk {
                chunk_id: pair[1].chunk_id,
                reason: format!("shares {shared} frames with previous chunk, expected {overlap}"),
            });
        }
    }
    Ok(())
}
