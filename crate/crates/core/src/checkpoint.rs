//! Binary checkpoint format.
//!
//! Layout: the magic bytes `CMLP1`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then little-endian `f64` blobs in header order. Array
//! names carry a kind prefix: `param/`, `bn_mean/`, `bn_var/`, `adam_m/`,
//! `adam_v/`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use cmlp_tensor::{BnRunning, RngState, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CrowdMlp, ModelConfig};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 5] = b"CMLP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing array {name}")]
    MissingParam { name: String },
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    epoch: usize,
    rng: Option<RngState>,
    adam: Option<AdamMeta>,
    #[serde(default)]
    metrics: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to rebuild a model and, optionally, resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub params: Vec<(String, Tensor)>,
    pub bn: Vec<(String, BnRunning)>,
    pub adam: Option<(AdamMeta, Vec<Tensor>, Vec<Tensor>)>,
    /// Free-form training metadata such as the validation score.
    pub metrics: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &CrowdMlp, epoch: usize) -> Self {
        Self {
            config: model.config().clone(),
            epoch,
            rng: None,
            params: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            bn: model
                .bn
                .iter()
                .map(|(n, r)| (n.to_string(), r.clone()))
                .collect(),
            adam: None,
            metrics: serde_json::Value::Null,
        }
    }

    pub fn with_adam(mut self, state: &AdamState) -> Self {
        let meta = AdamMeta {
            step: state.step,
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
        };
        self.adam = Some((meta, state.m.clone(), state.v.clone()));
        self
    }

    pub fn adam_state(&self) -> Option<AdamState> {
        self.adam.as_ref().map(|(meta, m, v)| AdamState {
            m: m.clone(),
            v: v.clone(),
            step: meta.step,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
        })
    }

    /// Builds a model from the stored configuration and restores its state.
    pub fn to_model(&self) -> crate::Result<CrowdMlp> {
        let mut config = self.config.clone();
        config.frontend.weights_path = None;
        let mut model = CrowdMlp::new(&config)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    /// Copies parameters and normalization statistics into a model built for
    /// the current configuration; every array must match by name and shape.
    pub fn restore(&self, model: &mut CrowdMlp) -> CkResult<()> {
        self.restore_filtered(model, |_| true)
    }

    fn restore_filtered(&self, model: &mut CrowdMlp, keep: impl Fn(&str) -> bool) -> CkResult<()> {
        let params: std::collections::HashMap<&str, &Tensor> =
            self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<_> = model.params.ids().collect();
        let mut missing = None;
        for id in &ids {
            let name = model.params.name(*id).to_string();
            if !keep(&name) {
                continue;
            }
            match params.get(name.as_str()) {
                Some(t) if t.shape() != model.params.get(*id).shape() => {
                    return Err(CheckpointError::ShapeMismatch {
                        expected: model.params.get(*id).shape().to_vec(),
                        found: t.shape().to_vec(),
                        name,
                    })
                }
                Some(_) => {}
                None => {
                    missing.get_or_insert(name);
                }
            }
        }
        if let Some(name) = missing {
            return Err(CheckpointError::MissingParam { name });
        }
        let stats: std::collections::HashMap<&str, &BnRunning> =
            self.bn.iter().map(|(n, r)| (n.as_str(), r)).collect();
        for (name, running) in model.bn.iter() {
            if !keep(name) {
                continue;
            }
            match stats.get(name) {
                None => return Err(CheckpointError::MissingParam { name: name.to_string() }),
                Some(r) if r.len() != running.len() => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: vec![running.len()],
                        found: vec![r.len()],
                    })
                }
                Some(_) => {}
            }
        }
        for id in ids {
            let name = model.params.name(id).to_string();
            if keep(&name) {
                *model.params.get_mut(id) = params[name.as_str()].clone();
            }
        }
        for (name, running) in model.bn.iter_mut() {
            if keep(name) {
                *running = stats[name].clone();
            }
        }
        Ok(())
    }
}

/// Loads the `frontend.*` arrays of a checkpoint into `model`.
pub fn load_frontend_weights(path: &Path, model: &mut CrowdMlp) -> crate::Result<()> {
    let ckpt = load_checkpoint(path)?;
    ckpt.restore_filtered(model, |name| name.starts_with("frontend."))?;
    Ok(())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CkResult<()> {
    let mut arrays = Vec::new();
    let mut blobs: Vec<&Tensor> = Vec::new();
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (name, r) in &ckpt.bn {
        owned.push((format!("bn_mean/{name}"), Tensor::vector(r.mean.clone())));
        owned.push((format!("bn_var/{name}"), Tensor::vector(r.var.clone())));
    }
    let mut named: Vec<(String, &Tensor)> = ckpt
        .params
        .iter()
        .map(|(n, t)| (format!("param/{n}"), t))
        .collect();
    named.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
    if let Some((_, m, v)) = &ckpt.adam {
        for ((name, _), (m, v)) in ckpt.params.iter().zip(m.iter().zip(v)) {
            named.push((format!("adam_m/{name}"), m));
            named.push((format!("adam_v/{name}"), v));
        }
    }
    let mut offset = 0u64;
    for (name, t) in named {
        arrays.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
        blobs.push(t);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
        adam: ckpt.adam.as_ref().map(|(m, _, _)| m.clone()),
        metrics: ckpt.metrics.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in blobs {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io(path))?;
    file.write_all(&buf).map_err(io(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CkResult<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io(path))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> CkResult<Checkpoint> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::BadMagic);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| CheckpointError::Truncated("header length".into()))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| CheckpointError::Truncated("header length out of range".into()))?;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(CheckpointError::Truncated(format!(
            "header needs {header_len} bytes, {} available",
            rest.len()
        )));
    }
    let raw: serde_json::Value = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: version as u32,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let blob = &rest[header_len..];
    let mut tensors = std::collections::HashMap::new();
    let mut order = Vec::new();
    for entry in &header.arrays {
        let numel: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| CheckpointError::Header(format!("offset of {}", entry.name)))?;
        let end = start
            .checked_add(numel * 8)
            .ok_or_else(|| CheckpointError::Header(format!("extent of {}", entry.name)))?;
        let data = blob.get(start..end).ok_or_else(|| {
            CheckpointError::Truncated(format!("array {} ends past the file", entry.name))
        })?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| CheckpointError::Header(format!("{}: {e}", entry.name)))?;
        order.push(entry.name.clone());
        tensors.insert(entry.name.clone(), t);
    }
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or(CheckpointError::MissingParam { name })
    };
    let param_names: Vec<String> = order
        .iter()
        .filter_map(|n| n.strip_prefix("param/").map(str::to_string))
        .collect();
    let bn_names: Vec<String> = order
        .iter()
        .filter_map(|n| n.strip_prefix("bn_mean/").map(str::to_string))
        .collect();
    let mut params = Vec::with_capacity(param_names.len());
    for n in &param_names {
        params.push((n.clone(), take(format!("param/{n}"))?));
    }
    let mut bn = Vec::with_capacity(bn_names.len());
    for n in bn_names {
        let mean = take(format!("bn_mean/{n}"))?.into_data();
        let var = take(format!("bn_var/{n}"))?.into_data();
        if mean.len() != var.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: format!("bn_var/{n}"),
                expected: vec![mean.len()],
                found: vec![var.len()],
            });
        }
        bn.push((n, BnRunning { mean, var }));
    }
    let adam = match header.adam {
        Some(meta) => {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for n in &param_names {
                m.push(take(format!("adam_m/{n}"))?);
                v.push(take(format!("adam_v/{n}"))?);
            }
            Some((meta, m, v))
        }
        None => None,
    };
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        rng: header.rng,
        params,
        bn,
        adam,
        metrics: header.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_inputs_are_format_errors() {
        assert!(matches!(decode(b""), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(b"XMLP1aaaaaaaa"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(b"CMLP1\x01"), Err(CheckpointError::Truncated(_))));
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&100u64.to_le_bytes());
        b.extend_from_slice(b"{}");
        assert!(matches!(decode(&b), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn version_is_checked_before_fields() {
        let json = br#"{"format_version": 7}"#;
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(json);
        assert!(matches!(decode(&b), Err(CheckpointError::Version { found: 7 })));
    }
}
