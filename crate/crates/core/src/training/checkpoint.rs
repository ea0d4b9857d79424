//! Binary checkpoint files.
//!
//! Layout: the 8 magic bytes `CMLMCKPT`, a format version byte, a
//! little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor as little-endian `f32` values in manifest order. Manifest offsets
//! are byte offsets into that payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"CMLMCKPT";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u8 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("tensor {name}: shape {found:?} does not match {expected:?} from the recorded config")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    encoder: EncoderConfig,
    num_classes: Option<usize>,
    step: u64,
    rng: Option<Rng>,
    vocab: Vec<String>,
    label_names: Vec<String>,
    tensors: Vec<ManifestEntry>,
}

/// Everything needed to resume or evaluate a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration that produced the parameters.
    pub config: serde_json::Value,
    pub params: EncoderParams<f32>,
    pub step: u64,
    pub rng: Option<Rng>,
    pub vocab: Vec<String>,
    pub label_names: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .named()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            encoder: self.params.config().clone(),
            num_classes: self.params.num_classes(),
            step: self.step,
            rng: self.rng.clone(),
            vocab: self.vocab.clone(),
            label_names: self.label_names.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(17 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let (&version, rest) = rest
            .split_first()
            .ok_or_else(|| CheckpointError::Truncated("missing version byte".into()))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        if rest.len() < 8 {
            return Err(CheckpointError::Truncated("missing header length".into()));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(CheckpointError::Truncated(format!(
                "header declares {len} bytes, {} available",
                rest.len()
            )));
        }
        let (json, payload) = rest.split_at(len);
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        header
            .encoder
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let expected = header.encoder.param_shapes(header.num_classes);
        if expected.len() != header.tensors.len() {
            return Err(CheckpointError::Header(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let mut named = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.into_iter().zip(&header.tensors) {
            if entry.name != name {
                return Err(CheckpointError::Header(format!(
                    "manifest entry {:?} where {name:?} was expected",
                    entry.name
                )));
            }
            if entry.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: entry.shape.clone(),
                });
            }
            let count: usize = shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > payload.len() {
                return Err(CheckpointError::Truncated(format!(
                    "tensor {name} needs bytes {start}..{end}, payload has {}",
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
            named.push((name, t));
        }
        let params = EncoderParams::from_named(header.encoder, header.num_classes, named)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        Ok(Self {
            config: header.config,
            params,
            step: header.step,
            rng: header.rng,
            vocab: header.vocab,
            label_names: header.label_names,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
