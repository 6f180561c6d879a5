//! Minimal n-dimensional array container.
//!
//! Layout, all little-endian: 8-byte magic `CSTENSR\0`, `u32` version (1),
//! `u32` rank (at most 8), `rank × u64` dims, `u32` dtype code
//! (1 = f32, 2 = f64, 3 = u8), then the row-major payload.

use std::path::Path;

use super::IoError;

pub const MAGIC: &[u8; 8] = b"CSTENSR\0";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u64>,
    data: TensorData,
}

fn element_count(dims: &[u64]) -> Option<usize> {
    dims.iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d))
        .and_then(|n| usize::try_from(n).ok())
}

impl Tensor {
    /// Fails when the element count does not match `dims` or the rank exceeds 8.
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self, String> {
        if dims.len() > MAX_RANK {
            return Err(format!("rank {} exceeds {MAX_RANK}", dims.len()));
        }
        match element_count(&dims) {
            Some(n) if n == data.len() => Ok(Self { dims, data }),
            _ => Err(format!("{} values for dims {dims:?}", data.len())),
        }
    }

    pub fn from_f64(dims: Vec<u64>, values: Vec<f64>) -> Result<Self, String> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn from_f32(dims: Vec<u64>, values: Vec<f32>) -> Result<Self, String> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|x| *x as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = 8 + 4 + 4 + 8 * self.dims.len() + 4;
        let mut out = Vec::with_capacity(header + self.data.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses a complete file image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, IoError> {
        let truncated = |expected: usize| IoError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 16 {
            if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                return Err(IoError::BadMagic(path.to_path_buf()));
            }
            return Err(truncated(16));
        }
        if &bytes[..8] != MAGIC {
            return Err(IoError::BadMagic(path.to_path_buf()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(IoError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let rank = u32_at(12) as usize;
        if rank > MAX_RANK {
            return Err(IoError::DimOverflow {
                path: path.to_path_buf(),
                reason: format!("rank {rank} exceeds {MAX_RANK}"),
            });
        }
        let header = 16 + 8 * rank + 4;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let dims: Vec<u64> = (0..rank)
            .map(|k| u64::from_le_bytes(bytes[16 + 8 * k..24 + 8 * k].try_into().unwrap()))
            .collect();
        let code = u32_at(16 + 8 * rank);
        let dtype = DType::from_code(code).ok_or_else(|| IoError::BadDType {
            path: path.to_path_buf(),
            code,
        })?;
        let count = element_count(&dims).ok_or_else(|| IoError::DimOverflow {
            path: path.to_path_buf(),
            reason: format!("element count of {dims:?} overflows"),
        })?;
        let payload_len = count.checked_mul(dtype.size()).ok_or_else(|| IoError::DimOverflow {
            path: path.to_path_buf(),
            reason: format!("payload size of {dims:?} overflows"),
        })?;
        let expected = header.checked_add(payload_len).ok_or_else(|| IoError::DimOverflow {
            path: path.to_path_buf(),
            reason: "file size overflows".into(),
        })?;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(IoError::TrailingBytes {
                path: path.to_path_buf(),
                extra: bytes.len() - expected,
            });
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    let bytes = super::read_file(path)?;
    Tensor::from_bytes(&bytes, path)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), IoError> {
    super::write_file(path, &t.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("t.cst")
    }

    #[test]
    fn f32_roundtrip_is_byte_identical() {
        let t = Tensor::from_f32(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, f32::MAX]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 + 4 + 16 + 4 + 24);
        let back = Tensor::from_bytes(&bytes, &p()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![3], TensorData::U8(vec![7, 8, 9])).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..8], b"CSTENSR\0");
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..24], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..28], &[3, 0, 0, 0]);
        assert_eq!(&b[28..], &[7, 8, 9]);
    }

    #[test]
    fn malformed_inputs() {
        let t = Tensor::from_f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&b[..b.len() - 1], &p()),
            Err(IoError::TruncatedPayload { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad, &p()), Err(IoError::BadMagic(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Tensor::from_bytes(&extra, &p()), Err(IoError::TrailingBytes { .. })));
        let mut huge = b.clone();
        huge[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&huge, &p()), Err(IoError::DimOverflow { .. })));
        let mut rank = b.clone();
        rank[12..16].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&rank, &p()), Err(IoError::DimOverflow { .. })));
        let mut dtype = b;
        dtype[32..36].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&dtype, &p()), Err(IoError::BadDType { code: 9, .. })));
    }

    #[test]
    fn error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.cst");
        let err = read_tensor(&missing).unwrap_err();
        assert!(matches!(&err, IoError::MissingFile(path) if *path == missing));
        assert!(err.to_string().contains("absent.cst"));
    }

    #[test]
    fn constructor_checks_shape() {
        assert!(Tensor::from_f64(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_f64(vec![1; 9], vec![1.0]).is_err());
        assert!(Tensor::from_f64(vec![], vec![1.0]).is_ok());
    }

    proptest! {
        #[test]
        fn f64_roundtrip(values in prop::collection::vec(any::<f64>(), 0..64)) {
            let n = values.len() as u64;
            let t = Tensor::from_f64(vec![n], values).unwrap();
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes, &p()).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
