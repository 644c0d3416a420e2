//! Versioned checkpoint archive.
//!
//! ```text
//! b"SEGTCKPT" | u32 version | u64 header length | JSON header | payload
//! ```
//!
//! All integers are little-endian. The header lists every tensor with its
//! name, role, shape, dtype and element offset into the payload, which is a
//! flat run of little-endian `f64`. The resolved run configuration is
//! embedded in the header as TOML text.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{ParamKind, ParamStore};
use crate::optim::{AdamState, AdamW};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"SEGTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Trainable,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: [usize; 4],
    pub dtype: String,
    /// Element offset into the payload.
    pub offset: u64,
    /// Optimizer step count of the owning parameter, for moment entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    epoch: u64,
    config: String,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    /// `(name, kind, value)` in registration order.
    pub params: Vec<(String, ParamKind, Tensor)>,
    /// `(parameter name, state)` for every parameter the optimizer touched.
    pub optimizer: Vec<(String, AdamState)>,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, model: &Model, optimizer: &AdamW, step: u64, epoch: u64) -> Self {
        let store = &model.store;
        let params = store.ids().map(|id| (store.name(id).to_string(), store.kind(id), store.get(id).clone())).collect();
        let optimizer = optimizer.state.iter().map(|(id, st)| (store.name(*id).to_string(), st.clone())).collect();
        Checkpoint { config: config.clone(), step, epoch, params, optimizer }
    }

    /// Rebuilds the model from the embedded configuration and overwrites
    /// every tensor; the parameter sets must match exactly.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, self.config.train.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, the configured model {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, kind, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is {:?} in the checkpoint, {:?} in the model",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
            if model.store.kind(id) != *kind {
                return Err(Error::Checkpoint(format!("parameter `{name}` changed kind")));
            }
        }
        Ok(model)
    }

    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<AdamW> {
        let mut opt = AdamW::new(self.config.optimizer())?;
        for (name, st) in &self.optimizer {
            let id = store.id(name).ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown `{name}`")))?;
            opt.state.insert(id, st.clone());
        }
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str, role, t: &Tensor, adam_step| {
            entries.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: t.shape().0,
                dtype: "f64".into(),
                offset: payload.len() as u64,
                adam_step,
            });
            payload.extend_from_slice(t.data());
        };
        for (name, kind, t) in &self.params {
            let role = match kind {
                ParamKind::Trainable => TensorRole::Trainable,
                ParamKind::Buffer => TensorRole::Buffer,
            };
            push(name, role, t, None);
        }
        for (name, st) in &self.optimizer {
            push(name, TensorRole::AdamM, &st.m, Some(st.step));
            push(name, TensorRole::AdamV, &st.v, Some(st.step));
        }
        let header = Header { step: self.step, epoch: self.epoch, config: self.config.to_toml_string(), tensors: entries };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = &bytes[20 + hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let config = TrainConfig::from_toml_str(&header.config)?;
        let mut params = Vec::new();
        let mut moments: Vec<(String, AdamState)> = Vec::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let shape = Shape(e.shape);
            let start = e.offset as usize;
            let data = payload
                .get(start..start + shape.numel())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
            let t = Tensor::from_vec(shape, data.to_vec())?;
            match e.role {
                TensorRole::Trainable => params.push((e.name.clone(), ParamKind::Trainable, t)),
                TensorRole::Buffer => params.push((e.name.clone(), ParamKind::Buffer, t)),
                TensorRole::AdamM => moments.push((
                    e.name.clone(),
                    AdamState { step: e.adam_step.unwrap_or(0), m: t, v: Tensor::zeros(shape) },
                )),
                TensorRole::AdamV => {
                    let st = moments
                        .iter_mut()
                        .rev()
                        .find(|(n, _)| *n == e.name)
                        .ok_or_else(|| Error::Checkpoint(format!("second moment of `{}` precedes the first", e.name)))?;
                    st.1.v = t;
                }
            }
        }
        Ok(Checkpoint { config, step: header.step, epoch: header.epoch, params, optimizer: moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
