//! Weight checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GBDLCKPT"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     UTF-8 JSON (CheckpointHeader)
//! arrays   ...      every tensor of the weight set in header order,
//!                   as f64 or f32 according to `header.dtype`
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Tensor, WeightSet};
use super::NnError;
use crate::data::StandardScaler;
use crate::model::NetworkSpec;

pub const MAGIC: &[u8; 8] = b"GBDLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: Dtype,
    pub network: NetworkSpec,
    /// Meaning of the two head outputs, in index order.
    pub output_order: Vec<String>,
    pub variance_floor: f64,
    pub shapes: Vec<Vec<usize>>,
    pub dropout_rate: f64,
    pub seed: u64,
    pub scaler: Option<StandardScaler>,
    /// Free-form run settings (dataset and training configuration).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: WeightSet,
}

impl Checkpoint {
    pub fn new(
        network: NetworkSpec,
        weights: WeightSet,
        seed: u64,
        scaler: Option<StandardScaler>,
        metadata: serde_json::Value,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                dtype: Dtype::F64,
                dropout_rate: network.dropout_rate,
                network,
                output_order: vec!["mu".into(), "log_var".into()],
                variance_floor: super::VARIANCE_FLOOR,
                shapes: weights.shapes(),
                seed,
                scaler,
                metadata,
            },
            weights,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, NnError> {
        let mut header = self.header.clone();
        header.shapes = self.weights.shapes();
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let n = self.weights.param_count();
        let mut out = Vec::with_capacity(20 + json.len() + n * header.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.weights.values() {
            match header.dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
        let width = header.dtype.width();
        let mut data = &bytes[20 + hlen..];
        let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if data.len() != expected * width {
            return Err(NnError::Checkpoint(format!(
                "expected {} bytes of weights, found {}",
                expected * width,
                data.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in &header.shapes {
            let n: usize = shape.iter().product();
            let (chunk, rest) = data.split_at(n * width);
            let values = chunk
                .chunks_exact(width)
                .map(|b| match header.dtype {
                    Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                    Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                })
                .collect();
            tensors.push(Tensor::new(shape.clone(), values)?);
            data = rest;
        }
        Ok(Checkpoint {
            header,
            weights: WeightSet { tensors },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::decode(&bytes)
    }
}
