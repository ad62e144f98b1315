//! Single-file checkpoints of named tensors.
//!
//! ```text
//! magic        8 bytes  "CISEDCKP"
//! version      u32      1
//! fingerprint  u32 length + UTF-8
//! meta         u32 length + UTF-8 JSON
//! count        u32
//! entries      count x (u32 name length + UTF-8 name + f64 tensor record)
//! ```
//!
//! Tensor records use the [`crate::tensorio`] encoding. Writes go to a
//! temporary sibling first and are renamed into place, so a crash never
//! leaves a half-written checkpoint under the final name.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::autodiff::Tensor;
use crate::causal::ContextPool;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensorio::{self, read_exact, read_u32, DType};

const MAGIC: &[u8; 8] = b"CISEDCKP";
const VERSION: u32 = 1;

/// Name under which the context pool is stored.
pub const POOL_TENSOR: &str = "context_pool.q";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures a model, its pool if any, and free-form metadata. The model
    /// config is stored under `meta["model"]`.
    pub fn of_model(model: &Model, pool: Option<&ContextPool>, mut meta: Value) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(pool) = pool {
            tensors.push((POOL_TENSOR.to_string(), pool.matrix().clone()));
        }
        if let Value::Object(map) = &mut meta {
            map.insert(
                "model".into(),
                serde_json::to_value(&model.config).expect("config serializes"),
            );
        }
        Checkpoint {
            fingerprint: model.config.fingerprint(),
            meta,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model config recorded in the metadata.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self
            .meta
            .get("model")
            .ok_or_else(|| Error::Config("checkpoint has no model config".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn ensure_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Rebuilds the model for `config`, refusing checkpoints written for a
    /// different configuration.
    pub fn restore_model(&self, config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        self.ensure_fingerprint(&config.fingerprint())?;
        // Shapes come from a fresh init; values from the file.
        let mut model = Model::init(config.clone(), 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore",
                    left: t.shape().to_vec(),
                    right: slot.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn restore_pool(&self, rate: f64) -> Result<Option<ContextPool>> {
        self.get(POOL_TENSOR)
            .map(|q| ContextPool::from_matrix(q.clone(), rate))
            .transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.fingerprint);
        put_str(&mut buf, &self.meta.to_string());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            tensorio::encode(t, DType::F64, &mut buf);
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf).map_err(|m| Error::format(path, m))
    }

    fn decode(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut input = buf;
        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let fingerprint = get_str(&mut input)?;
        let meta = serde_json::from_str(&get_str(&mut input)?).map_err(|e| e.to_string())?;
        let count = read_u32(&mut input)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = get_str(&mut input)?;
            let t = tensorio::decode(&mut input).map_err(|e| format!("{name}: {e}"))?;
            tensors.push((name, t));
        }
        if !input.is_empty() {
            return Err(format!("{} trailing bytes", input.len()));
        }
        Ok(Checkpoint {
            fingerprint,
            meta,
            tensors,
        })
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(input: &mut &[u8]) -> std::result::Result<String, String> {
    let len = read_u32(input)? as usize;
    if input.len() < len {
        return Err("string truncated".into());
    }
    let (head, rest) = input.split_at(len);
    *input = rest;
    String::from_utf8(head.to_vec()).map_err(|e| e.to_string())
}
