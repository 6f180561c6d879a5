//! Per-chunk manifest files.
//!
//! A manifest is `key = value` text, `#` starts a comment:
//!
//! ```text
//! chunk_id = 3
//! kind = temporal            # or loop
//! frame_ids = 135 136 137 ...
//! depth = chunk_0003.depth.cst          # F×H×W
//! confidence = chunk_0003.conf.cst      # F×H×W
//! intrinsics = chunk_0003.intr.cst      # F×4: fx fy cx cy
//! extrinsics = chunk_0003.extr.cst      # F×3×4 [R|t]
//! tokens = chunk_0003.tokens.cst        # F×K×d
//! extrinsics_convention = camera_to_world   # optional, or world_to_camera
//! loop_pair = 100 500                   # loop chunks only
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use super::tensor::{read_tensor, write_tensor, DType, Tensor, TensorData};
use super::trajectory::rotation_from_text;
use super::{io_error, read_text, write_file, IoError};
use crate::geometry::{ChunkArtifact, ChunkKind, DepthMap, Intrinsics};
use crate::loops::PatchTokens;
use crate::sim3::Sim3;

pub const MANIFEST_EXTENSION: &str = "manifest";

/// A loop-centric chunk together with the frame pair it was built around.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopChunkEntry {
    pub chunk: ChunkArtifact,
    pub pair: (usize, usize),
}

/// Everything found in a manifest directory. Temporal chunks are sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ManifestSet {
    pub temporal: Vec<ChunkArtifact>,
    pub loops: Vec<LoopChunkEntry>,
}

impl ManifestSet {
    pub fn loop_chunk_for(&self, pair: (usize, usize)) -> Option<&ChunkArtifact> {
        self.loops.iter().find(|e| e.pair == pair).map(|e| &e.chunk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Convention {
    CameraToWorld,
    WorldToCamera,
}

struct ManifestFields {
    values: BTreeMap<String, String>,
    path: PathBuf,
}

impl ManifestFields {
    fn parse(text: &str, path: &Path) -> Result<Self, IoError> {
        let mut values = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| IoError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                reason: format!("expected 'key = value', found '{line}'"),
            })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(IoError::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    reason: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self {
            values,
            path: path.to_path_buf(),
        })
    }

    fn invalid(&self, reason: String) -> IoError {
        IoError::Invalid {
            path: self.path.clone(),
            reason,
        }
    }

    fn get(&self, key: &str) -> Result<&str, IoError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.invalid(format!("missing key '{key}'")))
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>, IoError> {
        self.get(key)?
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| self.invalid(format!("{key}: '{t}' is not a non-negative integer")))
            })
            .collect()
    }

    fn file(&self, key: &str) -> Result<PathBuf, IoError> {
        let rel = self.get(key)?;
        let base = self.path.parent().unwrap_or(Path::new("."));
        Ok(base.join(rel))
    }
}

fn expect_dims(t: &Tensor, expected: &[Option<u64>], path: &Path) -> Result<(), IoError> {
    let ok = t.dims().len() == expected.len()
        && t.dims().iter().zip(expected).all(|(d, e)| e.is_none_or(|e| e == *d));
    if ok {
        Ok(())
    } else {
        let want: Vec<String> = expected
            .iter()
            .map(|e| e.map_or("*".to_string(), |v| v.to_string()))
            .collect();
        Err(IoError::Invalid {
            path: path.to_path_buf(),
            reason: format!("shape {:?}, expected [{}]", t.dims(), want.join(", ")),
        })
    }
}

/// Reads one manifest and every tensor it references.
///
/// Returns the chunk plus its loop pair when the manifest declares one.
pub fn read_chunk_manifest(
    path: &Path,
) -> Result<(ChunkArtifact, Option<(usize, usize)>), IoError> {
    let fields = ManifestFields::parse(&read_text(path)?, path)?;
    let chunk_id: usize = fields
        .get("chunk_id")?
        .parse()
        .map_err(|_| fields.invalid("chunk_id is not an integer".into()))?;
    let kind = match fields.get("kind")? {
        "temporal" => ChunkKind::Temporal,
        "loop" => ChunkKind::Loop,
        other => return Err(fields.invalid(format!("unknown kind '{other}'"))),
    };
    let convention = match fields.values.get("extrinsics_convention").map(String::as_str) {
        None | Some("camera_to_world") => Convention::CameraToWorld,
        Some("world_to_camera") => Convention::WorldToCamera,
        Some(other) => return Err(fields.invalid(format!("unknown extrinsics_convention '{other}'"))),
    };
    let loop_pair = match fields.values.get("loop_pair") {
        None => None,
        Some(_) => {
            let v = fields.usize_list("loop_pair")?;
            if v.len() != 2 {
                return Err(fields.invalid("loop_pair needs two frame ids".into()));
            }
            Some((v[0], v[1]))
        }
    };
    if kind == ChunkKind::Loop && loop_pair.is_none() {
        return Err(fields.invalid("loop chunk without loop_pair".into()));
    }
    let frame_ids = fields.usize_list("frame_ids")?;
    let f = frame_ids.len() as u64;

    let depth_path = fields.file("depth")?;
    let conf_path = fields.file("confidence")?;
    let intr_path = fields.file("intrinsics")?;
    let extr_path = fields.file("extrinsics")?;
    let tok_path = fields.file("tokens")?;
    let depth = read_tensor(&depth_path)?;
    let conf = read_tensor(&conf_path)?;
    let intr = read_tensor(&intr_path)?;
    let extr = read_tensor(&extr_path)?;
    let tokens = read_tensor(&tok_path)?;

    expect_dims(&depth, &[Some(f), None, None], &depth_path)?;
    let (h, w) = (depth.dims()[1], depth.dims()[2]);
    expect_dims(&conf, &[Some(f), Some(h), Some(w)], &conf_path)?;
    expect_dims(&intr, &[Some(f), Some(4)], &intr_path)?;
    expect_dims(&extr, &[Some(f), Some(3), Some(4)], &extr_path)?;
    expect_dims(&tokens, &[Some(f), None, None], &tok_path)?;
    let (n_tok, dim) = (tokens.dims()[1] as usize, tokens.dims()[2] as usize);
    let (h, w) = (h as usize, w as usize);

    let depth = depth.to_f64();
    let conf = conf.to_f64();
    let intr = intr.to_f64();
    let extr = extr.to_f64();
    let tokens = tokens.to_f64();
    let px = h * w;
    let mut intrinsics = Vec::with_capacity(frame_ids.len());
    let mut poses = Vec::with_capacity(frame_ids.len());
    let mut depths = Vec::with_capacity(frame_ids.len());
    let mut token_sets = Vec::with_capacity(frame_ids.len());
    for k in 0..frame_ids.len() {
        let i = &intr[4 * k..4 * k + 4];
        intrinsics.push(
            Intrinsics::new(i[0], i[1], i[2], i[3], w, h).map_err(|e| IoError::Invalid {
                path: intr_path.clone(),
                reason: format!("frame {k}: {e}"),
            })?,
        );
        let e = &extr[12 * k..12 * k + 12];
        let m = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
        let rot = rotation_from_text(m).map_err(|reason| IoError::Invalid {
            path: extr_path.clone(),
            reason: format!("frame {k}: {reason}"),
        })?;
        let pose = Sim3::rigid(rot, Vector3::new(e[3], e[7], e[11]));
        poses.push(match convention {
            Convention::CameraToWorld => pose,
            Convention::WorldToCamera => pose.inverse(),
        });
        depths.push(
            DepthMap::new(
                w,
                h,
                depth[px * k..px * (k + 1)].to_vec(),
                conf[px * k..px * (k + 1)].to_vec(),
            )
            .map_err(|e| IoError::Invalid {
                path: depth_path.clone(),
                reason: format!("frame {k}: {e}"),
            })?,
        );
        let span = n_tok * dim;
        token_sets.push(
            PatchTokens::new(n_tok, dim, tokens[span * k..span * (k + 1)].to_vec()).map_err(
                |e| IoError::Invalid {
                    path: tok_path.clone(),
                    reason: format!("frame {k}: {e}"),
                },
            )?,
        );
    }
    let chunk = ChunkArtifact {
        chunk_id,
        kind,
        frame_ids,
        intrinsics,
        poses,
        depths,
        tokens: token_sets,
    };
    chunk.validate().map_err(|e| fields.invalid(e.to_string()))?;
    Ok((chunk, loop_pair))
}

/// Reads every `*.manifest` file in `dir`, in file-name order.
pub fn read_manifest_dir(dir: &Path) -> Result<ManifestSet, IoError> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| io_error(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(MANIFEST_EXTENSION) {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(IoError::MissingFile(dir.join(format!("*.{MANIFEST_EXTENSION}"))));
    }
    paths.sort();
    let mut set = ManifestSet::default();
    for p in &paths {
        let (chunk, pair) = read_chunk_manifest(p)?;
        match (chunk.kind, pair) {
            (ChunkKind::Loop, Some(pair)) => set.loops.push(LoopChunkEntry { chunk, pair }),
            _ => set.temporal.push(chunk),
        }
    }
    set.temporal.sort_by_key(|c| c.chunk_id);
    if let Some(w) = set.temporal.windows(2).find(|w| w[0].chunk_id == w[1].chunk_id) {
        return Err(IoError::Invalid {
            path: dir.to_path_buf(),
            reason: format!("temporal chunk id {} appears twice", w[0].chunk_id),
        });
    }
    if set.temporal.is_empty() {
        return Err(IoError::Invalid {
            path: dir.to_path_buf(),
            reason: "no temporal chunks".into(),
        });
    }
    Ok(set)
}

fn file_stem(chunk: &ChunkArtifact) -> String {
    match chunk.kind {
        ChunkKind::Temporal => format!("chunk_{:04}", chunk.chunk_id),
        ChunkKind::Loop => format!("loop_{:04}", chunk.chunk_id),
    }
}

fn tensor_of(dims: Vec<u64>, values: Vec<f64>, dtype: DType) -> Tensor {
    let data = match dtype {
        DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        DType::F64 => TensorData::F64(values),
        DType::U8 => unreachable!("chunk tensors are floating point"),
    };
    Tensor::new(dims, data).expect("dims computed from the chunk")
}

/// Writes a chunk's tensors and manifest into `dir`; returns the manifest path.
///
/// Poses are stored camera-to-world and must be rigid.
pub fn write_chunk(
    dir: &Path,
    chunk: &ChunkArtifact,
    loop_pair: Option<(usize, usize)>,
    dtype: DType,
) -> Result<PathBuf, IoError> {
    let stem = file_stem(chunk);
    let manifest_path = dir.join(format!("{stem}.{MANIFEST_EXTENSION}"));
    let invalid = |reason: String| IoError::Invalid {
        path: manifest_path.clone(),
        reason,
    };
    if dtype == DType::U8 {
        return Err(invalid("chunk tensors must be f32 or f64".into()));
    }
    chunk.validate().map_err(|e| invalid(e.to_string()))?;
    if chunk.kind == ChunkKind::Loop && loop_pair.is_none() {
        return Err(invalid("loop chunk without loop pair".into()));
    }
    let f = chunk.len();
    let (w, h) = (chunk.intrinsics[0].width, chunk.intrinsics[0].height);
    if chunk.intrinsics.iter().any(|k| k.width != w || k.height != h) {
        return Err(invalid("frames within a chunk must share an image size".into()));
    }
    let (n_tok, dim) = (chunk.tokens[0].n_tokens(), chunk.tokens[0].dim());
    if chunk.tokens.iter().any(|t| t.n_tokens() != n_tok || t.dim() != dim) {
        return Err(invalid("frames within a chunk must share a token shape".into()));
    }
    if let Some(k) = chunk.poses.iter().position(|p| (p.scale() - 1.0).abs() > 1e-12) {
        return Err(invalid(format!("pose {k} has scale {}", chunk.poses[k].scale())));
    }

    let mut depth = Vec::with_capacity(f * w * h);
    let mut conf = Vec::with_capacity(f * w * h);
    for d in &chunk.depths {
        depth.extend_from_slice(d.depth());
        conf.extend_from_slice(d.confidence());
    }
    let intr: Vec<f64> = chunk
        .intrinsics
        .iter()
        .flat_map(|k| [k.fx, k.fy, k.cx, k.cy])
        .collect();
    let extr: Vec<f64> = chunk
        .poses
        .iter()
        .flat_map(|p| {
            let (m, t) = (p.rotation().matrix(), p.translation());
            (0..3)
                .flat_map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], t[i]])
                .collect::<Vec<_>>()
        })
        .collect();
    let tokens: Vec<f64> = chunk.tokens.iter().flat_map(|t| t.data().to_vec()).collect();

    let (fu, hu, wu) = (f as u64, h as u64, w as u64);
    let files = [
        ("depth", tensor_of(vec![fu, hu, wu], depth, dtype)),
        ("confidence", tensor_of(vec![fu, hu, wu], conf, dtype)),
        ("intrinsics", tensor_of(vec![fu, 4], intr, dtype)),
        ("extrinsics", tensor_of(vec![fu, 3, 4], extr, dtype)),
        ("tokens", tensor_of(vec![fu, n_tok as u64, dim as u64], tokens, dtype)),
    ];
    let mut text = String::new();
    let _ = writeln!(text, "chunk_id = {}", chunk.chunk_id);
    let _ = writeln!(
        text,
        "kind = {}",
        match chunk.kind {
            ChunkKind::Temporal => "temporal",
            ChunkKind::Loop => "loop",
        }
    );
    let ids: Vec<String> = chunk.frame_ids.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(text, "frame_ids = {}", ids.join(" "));
    for (key, tensor) in &files {
        let name = format!("{stem}.{key}.cst");
        write_tensor(&dir.join(&name), tensor)?;
        let _ = writeln!(text, "{key} = {name}");
    }
    let _ = writeln!(text, "extrinsics_convention = camera_to_world");
    if let Some((i, j)) = loop_pair {
        let _ = writeln!(text, "loop_pair = {i} {j}");
    }
    write_file(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}
