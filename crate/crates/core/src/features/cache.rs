//! One-file-per-clip feature cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SSFC"
//! version u16 (1)
//! kind    u8   0 = dense vectors [n, width]
//!              1 = conv patches  [n, c, h, w]
//!              2 = log-mel spectrogram [frames, mels]
//! dtype   u8   0 = float32
//! rank    u32
//! dims    u32 x rank
//! payload float32 x prod(dims), row-major
//! ```
//!
//! Row provenance is not stored; a cached file describes exactly one clip.

use std::fs;
use std::path::Path;

use super::{FeatureError, FeatureKind, FeatureSet, MelSpectrogram};
use crate::autograd::Tensor;

const MAGIC: &[u8; 4] = b"SSFC";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum CachedFeatures {
    Features(FeatureSet),
    Spectrogram(MelSpectrogram),
}

fn bad(msg: impl Into<String>) -> FeatureError {
    FeatureError::Cache(msg.into())
}

pub fn encode(features: &CachedFeatures) -> Vec<u8> {
    let (kind, dims, payload): (u8, Vec<usize>, Vec<f32>) = match features {
        CachedFeatures::Features(set) => {
            let kind = match set.kind() {
                FeatureKind::DenseVectors => 0,
                FeatureKind::ConvPatches => 1,
            };
            (kind, set.data().shape().to_vec(), set.data().data().to_vec())
        }
        CachedFeatures::Spectrogram(spec) => (
            2,
            vec![spec.n_frames(), spec.n_mels()],
            spec.values().iter().map(|&v| v as f32).collect(),
        ),
    };
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], source: &str) -> Result<CachedFeatures, FeatureError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a feature cache file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported cache version {version}")));
    }
    let (kind, dtype) = (bytes[6], bytes[7]);
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype {dtype}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[12..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad(format!(
            "payload has {} bytes, shape {dims:?} needs {}",
            bytes.len() - header,
            4 * count
        )));
    }
    let payload: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    match kind {
        0 | 1 => {
            let kind = if kind == 0 {
                FeatureKind::DenseVectors
            } else {
                FeatureKind::ConvPatches
            };
            let rows = dims.first().copied().unwrap_or(0);
            let tensor = Tensor::new(dims, payload).map_err(|e| bad(e.to_string()))?;
            Ok(CachedFeatures::Features(FeatureSet::new(kind, tensor, vec![0; rows])?))
        }
        2 => {
            if dims.len() != 2 {
                return Err(bad(format!("spectrogram with shape {dims:?}")));
            }
            let values = payload.into_iter().map(f64::from).collect();
            Ok(CachedFeatures::Spectrogram(MelSpectrogram::new(dims[1], values, source)?))
        }
        other => Err(bad(format!("unknown feature kind {other}"))),
    }
}

pub fn write(path: impl AsRef<Path>, features: &CachedFeatures) -> Result<(), FeatureError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(features))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<CachedFeatures, FeatureError> {
    let path = path.as_ref();
    decode(&fs::read(path)?, &path.display().to_string())
}
