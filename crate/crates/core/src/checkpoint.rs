//! Binary checkpoints.
//!
//! Layout: magic `TSFM`, little-endian `u32` version, `u64` header length,
//! a UTF-8 JSON header, then every tensor listed in the header as
//! little-endian `f64` values in listed order. Model tensors come first,
//! followed by the Adam moments `adam/m` and `adam/v`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelShape, Variant};
use crate::training::{Adam, ModelState, RngState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerInfo {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngInfo {
    /// Hex-encoded 32-byte seed.
    seed: String,
    stream: u64,
    /// Decimal, since the position exceeds 64 bits.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    shape: ModelShape,
    class_names: Vec<String>,
    iteration: u64,
    config: TrainConfig,
    optimizer: OptimizerInfo,
    rng: RngInfo,
    tensors: Vec<TensorInfo>,
}

/// A training state together with the class names it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub class_names: Vec<String>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        message: message.into(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str, path: &Path) -> Result<[u8; 32]> {
    let bad = || format_err(path, "rng seed is not 64 hex digits");
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(state: ModelState, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != state.model.shape.classes {
            return Err(Error::shape("class names", state.model.shape.classes, class_names.len()));
        }
        Ok(Checkpoint { state, class_names })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let state = &self.state;
        let params = state.model.param_count();
        let mut tensors: Vec<TensorInfo> = state
            .model
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| TensorInfo { name, shape })
            .collect();
        tensors.push(TensorInfo { name: "adam/m".into(), shape: vec![params] });
        tensors.push(TensorInfo { name: "adam/v".into(), shape: vec![params] });
        let rng = RngState::capture(&state.rng);
        let header = Header {
            variant: state.model.variant,
            shape: state.model.shape,
            class_names: self.class_names.clone(),
            iteration: state.iteration,
            config: state.config.clone(),
            optimizer: OptimizerInfo {
                beta1: state.optimizer.beta1,
                beta2: state.optimizer.beta2,
                eps: state.optimizer.eps,
                steps: state.optimizer.steps,
            },
            rng: RngInfo {
                seed: hex(&rng.seed),
                stream: rng.stream,
                word_pos: rng.word_pos.to_string(),
            },
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|source| Error::Json {
            path: "<checkpoint header>".into(),
            source,
        })?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * params);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let values = state
            .model
            .flat_params()
            .into_iter()
            .chain(state.optimizer.m.iter().copied())
            .chain(state.optimizer.v.iter().copied());
        for x in values {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize| Error::TruncatedPayload {
            path: path.into(),
            expected: expected as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(16));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < 16 {
            return Err(truncated(16));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| format_err(path, "header length overflows"))?;
        if bytes.len() < header_end {
            return Err(truncated(header_end));
        }
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|source| Error::Json {
                path: path.into(),
                source,
            })?;

        if header.config.variant != header.variant {
            return Err(format_err(path, "config variant disagrees with model variant"));
        }
        let mut model = Model::new(header.variant, header.shape, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| format_err(path, format!("invalid model description: {e}")))?;
        if header.class_names.len() != header.shape.classes {
            return Err(format_err(path, "class name count disagrees with model shape"));
        }
        let params = model.param_count();
        let mut expected: Vec<TensorInfo> = model
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| TensorInfo { name, shape })
            .collect();
        expected.push(TensorInfo { name: "adam/m".into(), shape: vec![params] });
        expected.push(TensorInfo { name: "adam/v".into(), shape: vec![params] });
        if header.tensors != expected {
            return Err(format_err(path, "tensor list does not match the model layout"));
        }

        let payload = &bytes[header_end..];
        let count = 3 * params;
        if payload.len() < 8 * count {
            return Err(truncated(header_end + 8 * count));
        }
        if payload.len() > 8 * count {
            return Err(format_err(path, "trailing bytes after tensors"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.set_flat_params(&values[..params])?;
        let o = header.optimizer;
        let optimizer = Adam {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            steps: o.steps,
            m: values[params..2 * params].to_vec(),
            v: values[2 * params..].to_vec(),
        };
        let rng = RngState {
            seed: unhex(&header.rng.seed, path)?,
            stream: header.rng.stream,
            word_pos: header
                .rng
                .word_pos
                .parse()
                .map_err(|_| format_err(path, "rng word position is not an integer"))?,
        }
        .restore();
        Ok(Checkpoint {
            state: ModelState {
                config: header.config,
                model,
                optimizer,
                iteration: header.iteration,
                rng,
            },
            class_names: header.class_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
