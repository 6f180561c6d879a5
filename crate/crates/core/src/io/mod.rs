//! File formats: tensor container, chunk manifests, trajectories, point clouds.

pub mod manifest;
pub mod ply;
pub mod tensor;
pub mod trajectory;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{read_chunk_manifest, read_manifest_dir, write_chunk, LoopChunkEntry, ManifestSet};
pub use ply::{read_ply, write_ply, PointCloud};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TensorData};
pub use trajectory::{
    format_number, read_kitti, read_trajectory, read_tum, write_kitti, write_trajectory,
    write_tum, TrajectoryFormat,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}: not a tensor file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported tensor version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: dimension overflow ({reason})")]
    DimOverflow { path: PathBuf, reason: String },
    #[error("{path}: unknown dtype code {code}")]
    BadDType { path: PathBuf, code: u32 },
    #[error("{0}: file not found")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("point cloud is empty")]
    EmptyCloud,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn io_error(path: &Path, e: std::io::Error) -> IoError {
    if e.kind() == std::io::ErrorKind::NotFound {
        IoError::MissingFile(path.to_path_buf())
    } else {
        IoError::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}
