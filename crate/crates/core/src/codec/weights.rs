//! Weights file: magic `CLWT`, version, JSON metadata (architecture and
//! training λ), named f32 tensors, CRC-32 trailer. Integers little-endian.

use serde::{Deserialize, Serialize};

use super::bytes::{put_block, Reader};
use crate::error::{ClicError, DecodeError, Result};
use crate::model::Model;
use crate::tensor::{ParamStore, Tensor};
use crate::transform::ArchConfig;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CLWT";
pub const WEIGHTS_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// λ a freshly initialized model is treated as trained for.
pub const DEFAULT_LAMBDA: f64 = 0.0067;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub arch: ArchConfig,
    /// Rate–distortion weight the weights were trained for.
    pub lambda: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

/// A model with the λ it was trained for.
#[derive(Debug, Clone)]
pub struct Weights {
    pub meta: WeightsMeta,
    pub model: Model<f32>,
}

impl Weights {
    pub fn random(arch: ArchConfig, seed: u64) -> Result<Self> {
        let model = Model::new_random(arch.clone(), seed)?;
        Ok(Weights {
            meta: WeightsMeta {
                arch,
                lambda: DEFAULT_LAMBDA,
                steps: 0,
                seed,
            },
            model,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        out.push(WEIGHTS_VERSION);
        put_block(
            &mut out,
            &serde_json::to_vec(&self.meta).expect("metadata serializes"),
        );
        let store = &self.model.store;
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (name, p) in store.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(p.shape().len() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed = parse(bytes).map_err(|e| ClicError::Weights(e.to_string()))?;
        let (meta, store) = parsed;
        if !(meta.lambda > 0.0 && meta.lambda.is_finite()) {
            return Err(ClicError::Weights(format!("invalid λ {}", meta.lambda)));
        }
        meta.arch
            .validate()
            .map_err(|e| ClicError::Weights(e.to_string()))?;
        let model = Model::from_store(meta.arch.clone(), store)?;
        Ok(Weights { meta, model })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<(WeightsMeta, ParamStore<f32>), DecodeError> {
    if bytes.len() < 9 {
        return Err(DecodeError::Truncated {
            offset: 0,
            needed: 9,
            available: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let mut r = Reader::new(body);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != WEIGHTS_MAGIC {
        return Err(DecodeError::BadMagic { found: magic });
    }
    let version = r.u8()?;
    if version != WEIGHTS_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    if stored != computed {
        return Err(DecodeError::ChecksumMismatch { stored, computed });
    }
    let at = r.pos();
    let meta: WeightsMeta =
        serde_json::from_slice(r.block()?).map_err(|e| DecodeError::InvalidField {
            field: "metadata",
            offset: at,
            reason: e.to_string(),
        })?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DecodeError::InvalidField {
                field: "tensor name",
                offset: at,
                reason: "not UTF-8".into(),
            })?
            .to_string();
        let at = r.pos();
        if r.u8()? != DTYPE_F32 {
            return Err(DecodeError::InvalidField {
                field: "dtype",
                offset: at,
                reason: "only f32 is supported".into(),
            });
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel.saturating_mul(4) > r.remaining() {
            return Err(DecodeError::Truncated {
                offset: r.pos(),
                needed: numel.saturating_mul(4),
                available: r.remaining(),
            });
        }
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DecodeError::InvalidField {
            field: "tensor shape",
            offset: at,
            reason: e.to_string(),
        })?;
        if store.find(&name).is_some() {
            return Err(DecodeError::InvalidField {
                field: "tensor name",
                offset: at,
                reason: format!("duplicate `{name}`"),
            });
        }
        store.add(name, t);
    }
    if r.remaining() != 0 {
        return Err(DecodeError::TrailingData {
            stream: "weights",
            extra: r.remaining(),
        });
    }
    Ok((meta, store))
}
