//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes   "FLOWGNN\0"
//! version      u32 LE
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! tensors      f64 LE, in header order, row-major
//! ```
//!
//! Loading fails on an unknown version, on any tensor whose declared shape
//! differs from the shape implied by the stored model config, and on
//! trailing or missing bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphSat, ModelConfig, Params, Scaler};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOWGNN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub features: FeatureSet,
    pub max_packets: usize,
    pub scaler: Scaler,
    pub tensors: Vec<TensorInfo>,
}

/// A trained model with what is needed to rebuild its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GraphSat<f64>,
    pub class_names: Vec<String>,
    pub features: FeatureSet,
    pub max_packets: usize,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = &self.model.config;
        if self.features.len() != cfg.input_dim || self.class_names.len() != cfg.num_classes {
            return Err(Error::Contract(
                "checkpoint metadata disagrees with model dimensions".into(),
            ));
        }
        let header = CheckpointHeader {
            config: *cfg,
            class_names: self.class_names.clone(),
            features: self.features.clone(),
            max_packets: self.max_packets,
            scaler: self.model.scaler.clone(),
            tensors: cfg
                .shapes()
                .iter()
                .map(|(name, (r, c))| TensorInfo {
                    name: name.to_string(),
                    shape: [*r, *c],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.model.params.tensors() {
            for &x in t.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::format("checkpoint", format!("header: {e}")))?;
        let cfg = header.config;
        cfg.validate()?;
        if header.features.len() != cfg.input_dim {
            return Err(Error::format("checkpoint", "feature set size differs from input dimension"));
        }
        if header.class_names.len() != cfg.num_classes {
            return Err(Error::format("checkpoint", "class name count differs from class count"));
        }
        if header.scaler.mean.len() != cfg.input_dim || header.scaler.std.len() != cfg.input_dim {
            return Err(Error::format("checkpoint", "scaler dimension mismatch"));
        }
        let expected = cfg.shapes();
        if header.tensors.len() != expected.len() {
            return Err(Error::format("checkpoint", "unexpected tensor count"));
        }
        for (info, (name, (rows, cols))) in header.tensors.iter().zip(expected) {
            if info.name != name || info.shape != [rows, cols] {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor `{}` has shape {:?}, expected `{name}` {:?}",
                        info.name,
                        info.shape,
                        [rows, cols]
                    ),
                ));
            }
        }
        let mut params = Params::<f64>::zeros(&cfg);
        let mut buf = [0u8; 8];
        for t in params.tensors_mut() {
            for x in t.as_mut_slice() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::format("checkpoint", "tensor data truncated"))?;
                *x = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model: GraphSat {
                config: cfg,
                params,
                scaler: header.scaler,
            },
            class_names: header.class_names,
            features: header.features,
            max_packets: header.max_packets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    /// The model in another precision.
    pub fn model_as<F: Real>(&self) -> GraphSat<F> {
        self.model.cast()
    }
}
