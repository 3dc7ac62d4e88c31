//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `DIFADCKP` · u32 version · u32 header length · TOML header ·
//! u32 tensor count · per tensor (u32 name length · name · u32 rank ·
//! u32 extents · f32 payload), tensors in name order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ModelConfig, ModelWeights};
use crate::diffusion::ScheduleParams;
use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIFADCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub weights: ModelWeights,
    pub schedule: ScheduleParams,
    pub perception_seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    perception_seed: u64,
    model: ModelConfig,
    schedule: ScheduleParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            step: self.step,
            perception_seed: self.perception_seed,
            model: self.model.clone(),
            schedule: self.schedule.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        encode(&text, &self.weights)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, weights) = decode(bytes)?;
        let h: Header = toml::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        weights.check_manifest(&h.model.manifest()).map_err(|e| match e {
            Error::MissingWeight(n) => Error::MissingWeight(n),
            other => Error::CorruptCheckpoint(other.to_string()),
        })?;
        Ok(Self { model: h.model, weights, schedule: h.schedule, perception_seed: h.perception_seed, step: h.step })
    }
}

fn encode(header: &str, weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + header.len() + 4 * weights.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&len_u32(weights.len())?.to_le_bytes());
    for (name, t) in weights.iter() {
        out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&len_u32(d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit the checkpoint's u32 fields")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<(String, ModelWeights)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic").map_err(|_| Error::BadMagic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?
        .to_string();
    let count = r.u32("tensor count")?;
    let mut weights = ModelWeights::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` has absurd shape {shape:?}")))?;
        let raw = r.take(numel * 4, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
        if weights.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, weights))
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &c.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    Checkpoint::from_bytes(&bytes)
}

/// Writes bare named tensors in the checkpoint container with a free-form
/// header, e.g. externally supplied perception weights.
pub fn write_container(path: impl AsRef<Path>, header: &str, weights: &ModelWeights) -> Result<()> {
    write_atomic(path.as_ref(), &encode(header, weights)?)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(String, ModelWeights)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { base_channels: 2, depth: 1, heads: 1, head_dim: 2, time_embed_dim: 4, wavelet_levels: 1, ..Default::default() };
        let m = Denoiser::new(cfg.clone(), 5).unwrap();
        Checkpoint { model: cfg, weights: m.into_weights(), schedule: ScheduleParams::default(), perception_seed: 9, step: 42 }
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.step, 42);
        for (k, v) in c.weights.iter() {
            assert!(v.bit_eq(back.weights.get(k).unwrap()));
        }
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut wrong = bytes.clone();
        wrong[8] = 7;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::VersionMismatch { found: 7, expected: 1 })));
        let cut = &bytes[..bytes.len() - 6];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4]), Err(Error::BadMagic)));
    }
}
