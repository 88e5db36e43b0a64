//! Checkpoint files.
//!
//! ```text
//! magic     "ASDK"
//! version   u32 (1)
//! metadata  u32 entry count, then per entry:
//!           u32 key length, key (UTF-8), u32 value length, value (UTF-8)
//! tensors   u32 tensor count, then per tensor:
//!           u32 name length, name (UTF-8), u32 rank, u32 dims x rank,
//!           float32 payload (little-endian, row-major)
//! ```
//!
//! All integers are little-endian. Floating-point metadata (validation loss,
//! normalizer statistics) is written in shortest round-trip decimal form, so
//! decoding restores the exact bits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use super::{build, Architecture, ModelError, Network};
use crate::autograd::Tensor;
use crate::features::NormalizerStats;

const MAGIC: &[u8; 4] = b"ASDK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub machine_type: String,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
}

/// Trained weights with everything needed to score new clips.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: Architecture,
    /// Parameters followed by batch-norm running statistics, in network order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub normalizer: Option<NormalizerStats>,
    pub meta: CheckpointMeta,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>, ModelError> {
    s.split(',')
        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number '{t}'"))))
        .collect()
}

impl ModelCheckpoint {
    pub fn from_network(net: &Network<f32>, normalizer: Option<NormalizerStats>, meta: CheckpointMeta) -> Self {
        Self {
            arch: net.arch().clone(),
            tensors: net.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            normalizer,
            meta,
        }
    }

    /// Rebuilds the network. Every tensor the architecture declares must be
    /// present exactly once with its declared shape, and nothing else.
    pub fn to_network(&self) -> Result<Network<f32>, ModelError> {
        let mut net: Network<f32> = build(&self.arch, 0)?;
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(bad(format!("tensor '{name}' appears twice")));
            }
            let slot = net
                .named_tensor_mut(name)
                .ok_or_else(|| bad(format!("tensor '{name}' is not part of {}", self.arch.descriptor())))?;
            if slot.shape() != t.shape() {
                return Err(bad(format!(
                    "tensor '{name}' has shape {:?}, architecture declares {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if let Some((missing, _)) = net.named_tensors().find(|(n, _)| !seen.contains(n)) {
            return Err(bad(format!("tensor '{missing}' is missing")));
        }
        Ok(net)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut meta: Vec<(&str, String)> = vec![
            ("arch", self.arch.descriptor()),
            ("machine_type", self.meta.machine_type.clone()),
            ("epoch", self.meta.epoch.to_string()),
            ("best_val_loss", self.meta.best_val_loss.to_string()),
            ("seed", self.meta.seed.to_string()),
        ];
        if let Some(n) = &self.normalizer {
            meta.push(("normalizer.mean", join_f64(&n.mean)));
            meta.push(("normalizer.std", join_f64(&n.std)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, meta.len() as u32);
        for (k, v) in &meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            if meta.insert(k.clone(), v).is_some() {
                return Err(bad(format!("metadata key '{k}' repeated")));
            }
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = dims.iter().product();
            let payload = r
                .take(4 * count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, payload)?));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("metadata key '{k}' missing")));
        let parse_err = |k: &str| bad(format!("metadata key '{k}' is malformed"));
        let normalizer = match (meta.get("normalizer.mean"), meta.get("normalizer.std")) {
            (Some(m), Some(s)) => Some(
                NormalizerStats::new(split_f64(m)?, split_f64(s)?).map_err(|e| bad(e.to_string()))?,
            ),
            (None, None) => None,
            _ => return Err(bad("normalizer mean and std must appear together")),
        };
        let ckpt = Self {
            arch: Architecture::parse_descriptor(get("arch")?)?,
            tensors,
            normalizer,
            meta: CheckpointMeta {
                machine_type: get("machine_type")?.clone(),
                epoch: get("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
                best_val_loss: get("best_val_loss")?.parse().map_err(|_| parse_err("best_val_loss"))?,
                seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
            },
        };
        ckpt.to_network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("metadata is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseAeSpec;

    fn tiny() -> ModelCheckpoint {
        let arch = Architecture::Dense(DenseAeSpec {
            input_dim: 4,
            hidden: 3,
            depth: 1,
            latent: 2,
        });
        let net = build(&arch, 9).unwrap();
        ModelCheckpoint::from_network(
            &net,
            Some(NormalizerStats::new(vec![0.1, -2.5], vec![1.0 / 3.0, 7.0]).unwrap()),
            CheckpointMeta {
                machine_type: "fan".into(),
                epoch: 4,
                best_val_loss: 0.1 + 0.2,
                seed: 17,
            },
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let c = tiny();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"ASDK");
        let back = ModelCheckpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn missing_or_duplicate_tensors_are_rejected() {
        let mut c = tiny();
        let dup = c.tensors[0].clone();
        c.tensors.push(dup);
        assert!(matches!(ModelCheckpoint::decode(&c.encode()), Err(ModelError::Checkpoint(_))));
        let mut c = tiny();
        c.tensors.pop();
        assert!(ModelCheckpoint::decode(&c.encode()).is_err());
        let mut bytes = tiny().encode();
        bytes.truncate(bytes.len() - 1);
        assert!(ModelCheckpoint::decode(&bytes).is_err());
    }
}
