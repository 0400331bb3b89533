//! Model checkpoints: a JSON manifest followed by `BNST` tensor records.
//!
//! ```text
//! "BNCK" | u32 manifest length | manifest (JSON) | BNST record * entries
//! ```
//!
//! Entry offsets are relative to the first byte after the manifest.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNCK";

/// Upper bound on manifest size accepted by the decoder.
pub const MAX_MANIFEST: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnScalars {
    pub name: String,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub entries: Vec<Entry>,
    pub bn: Vec<BnScalars>,
}

/// A decoded checkpoint, not yet bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in model.params.iter() {
            tensors.push((p.name.clone(), p.value.clone().with_requires_grad(false)));
        }
        let mut bn = Vec::new();
        for st in model.bn.iter() {
            tensors.push((format!("{}.running_mean", st.name), Tensor::from_slice(&st.running_mean)));
            tensors.push((format!("{}.running_var", st.name), Tensor::from_slice(&st.running_var)));
            bn.push(BnScalars { name: st.name.clone(), momentum: st.momentum, eps: st.eps });
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: model.seed,
            config: model.config.clone(),
            entries: Vec::new(),
            bn,
        };
        Checkpoint { manifest, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut manifest = self.manifest.clone();
        manifest.entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.to_bnst();
                let e = Entry { name: name.clone(), offset: body.len(), len: bytes.len() };
                body.extend_from_slice(&bytes);
                e
            })
            .collect();
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + json.len() + body.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if mlen > MAX_MANIFEST || 8 + mlen > bytes.len() {
            return Err(Error::Format(format!("manifest length {mlen} out of range")));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen])?;
        let body = &bytes[8 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        let mut expected = 0usize;
        for e in &manifest.entries {
            if e.offset != expected {
                return Err(Error::Format(format!("entry {} at offset {}, expected {expected}", e.name, e.offset)));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= body.len());
            let end = end.ok_or_else(|| Error::Format(format!("entry {} runs past the end", e.name)))?;
            tensors.push((e.name.clone(), Tensor::from_bnst(&body[e.offset..end])?));
            expected = end;
        }
        if expected != body.len() {
            return Err(Error::Format(format!("{} unreferenced trailing bytes", body.len() - expected)));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Rebuilds the model described by the manifest and loads every tensor into it.
    pub fn into_model(self) -> Result<Model> {
        let m = self.manifest;
        let mut model = Model::new(m.config, m.seed)?;
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(self.tensors.len());
        for (name, t) in self.tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = by_name.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (_, p) in model.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = take(&p.name, &shape)?.with_requires_grad(true);
        }
        if m.bn.len() != model.bn.len() {
            return Err(Error::Format(format!("{} BN layers stored, model has {}", m.bn.len(), model.bn.len())));
        }
        for (st, sc) in model.bn.iter_mut().zip(&m.bn) {
            if st.name != sc.name {
                return Err(Error::Format(format!("BN layer {} stored where {} expected", sc.name, st.name)));
            }
            if !(sc.momentum > 0.0 && sc.momentum < 1.0 && sc.eps > 0.0) {
                return Err(Error::Format(format!("BN layer {} has invalid momentum/eps", sc.name)));
            }
            let c = st.channels();
            st.running_mean = take(&format!("{}.running_mean", st.name), &[c])?.into_data();
            let var = take(&format!("{}.running_var", st.name), &[c])?.into_data();
            if var.iter().any(|&v| v < 0.0) {
                return Err(Error::Format(format!("BN layer {} has negative running variance", st.name)));
            }
            st.running_var = var;
            st.momentum = sc.momentum;
            st.eps = sc.eps;
        }
        if let Some(name) = by_name.keys().min() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(model)
    }
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        Checkpoint::from_model(self).encode()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        Checkpoint::decode(bytes)?.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}
