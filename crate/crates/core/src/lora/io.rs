//! ATW1 weight files.
//!
//! Layout: `b"ATW1"`, a little-endian `u32` metadata length, JSON metadata
//! `{version, tensors: [{name, shape, offset}], dtype: "f32le", extra}`, then
//! the little-endian f32 payload. `offset` is the byte offset of a tensor
//! within the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{LoraLayer, LoraParams};
use crate::diffusion::{DenoiserConfig, DenoiserParams, Linear};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"ATW1";

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    tensors: Vec<TensorEntry>,
    dtype: String,
    #[serde(default)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Named tensors plus a free-form metadata map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<(String, Tensor)>,
    pub extra: Map<String, Value>,
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| format_err(0, format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let meta = serde_json::to_vec(&Meta {
            version: 1,
            tensors: entries,
            dtype: "f32le".into(),
            extra: self.extra.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + meta.len() + offset as usize);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
            return Err(format_err(0, "bad magic, expected \"ATW1\""));
        }
        if bytes.len() < 8 {
            return Err(format_err(4, "truncated metadata length"));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = 8 + meta_len;
        if bytes.len() < payload_start {
            return Err(format_err(
                8,
                format!("metadata claims {meta_len} bytes, file too short"),
            ));
        }
        let meta: Meta = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| format_err(8, format!("invalid metadata: {e}")))?;
        if meta.version != 1 {
            return Err(format_err(8, format!("unsupported version {}", meta.version)));
        }
        if meta.dtype != "f32le" {
            return Err(format_err(8, format!("unsupported dtype {:?}", meta.dtype)));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut expected_end = 0u64;
        for entry in meta.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(format_err(
                    (payload_start + payload.len()) as u64,
                    format!(
                        "tensor {:?} needs {numel} floats at payload offset {start}, payload has {} bytes",
                        entry.name,
                        payload.len()
                    ),
                ));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| format_err((payload_start + start) as u64, e.to_string()))?;
            expected_end = expected_end.max(end as u64);
            tensors.push((entry.name, t));
        }
        if expected_end != payload.len() as u64 {
            return Err(format_err(
                payload_start as u64 + expected_end,
                format!("{} trailing payload bytes", payload.len() as u64 - expected_end),
            ));
        }
        Ok(Self {
            tensors,
            extra: meta.extra,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("atw.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn kind_of(extra: &Map<String, Value>) -> Option<&str> {
    extra.get("kind").and_then(Value::as_str)
}

impl DenoiserParams {
    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let mut extra = Map::new();
        extra.insert("kind".into(), "denoiser".into());
        extra.insert("config".into(), serde_json::to_value(self.config)?);
        Ok(WeightFile {
            tensors: self.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            extra,
        })
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if kind_of(&file.extra) != Some("denoiser") {
            return Err(format_err(8, "weight file does not hold denoiser parameters"));
        }
        let config: DenoiserConfig = serde_json::from_value(file.extra["config"].clone())
            .map_err(|e| format_err(8, format!("invalid denoiser config: {e}")))?;
        config.validate()?;
        let dims = config.layer_dims();
        let mut layers = Vec::with_capacity(dims.len());
        for (i, &(din, dout)) in dims.iter().enumerate() {
            let weight = file.get(&format!("layers.{i}.weight"))?.clone();
            let bias = file.get(&format!("layers.{i}.bias"))?.clone();
            if weight.shape() != [din, dout] || bias.shape() != [dout] {
                return Err(format_err(8, format!("layer {i} shape disagrees with config")));
            }
            layers.push(Linear { weight, bias });
        }
        let token_embedding = file.get("token_embedding")?.clone();
        if token_embedding.shape() != [crate::world::PROMPT_TOKENS, config.hidden] {
            return Err(format_err(8, "token embedding shape disagrees with config"));
        }
        Ok(Self {
            config,
            layers,
            token_embedding,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}

impl LoraParams {
    pub fn to_weight_file(&self) -> WeightFile {
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push((format!("layers.{i}.lora_a"), l.a.clone()));
            tensors.push((format!("layers.{i}.lora_b"), l.b.clone()));
        }
        let mut extra = Map::new();
        extra.insert("kind".into(), "lora".into());
        extra.insert("rank".into(), self.rank.into());
        extra.insert("layers".into(), self.layers.len().into());
        extra.insert("meta".into(), Value::Object(self.meta.clone()));
        WeightFile { tensors, extra }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if kind_of(&file.extra) != Some("lora") {
            return Err(format_err(8, "weight file does not hold a lora"));
        }
        let read = |key: &str| {
            file.extra
                .get(key)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| format_err(8, format!("missing {key:?} in lora metadata")))
        };
        let rank = read("rank")?;
        let n = read("layers")?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let a = file.get(&format!("layers.{i}.lora_a"))?.clone();
            let b = file.get(&format!("layers.{i}.lora_b"))?.clone();
            if a.rows() != rank || b.cols() != rank {
                return Err(format_err(8, format!("layer {i} factors disagree with rank {rank}")));
            }
            layers.push(LoraLayer { a, b });
        }
        let meta = match file.extra.get("meta") {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        };
        Ok(Self { rank, layers, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}
