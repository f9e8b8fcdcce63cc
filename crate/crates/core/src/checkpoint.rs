//! Checkpoints: a JSON manifest naming every tensor, next to a raw
//! little-endian `f64` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Group holding the base network weights.
pub const PARAMS: &str = "params";
/// Group holding the couple refiner weights.
pub const COUPLE_PARAMS: &str = "couple_params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Free-form snapshot of the training configuration.
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in values.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: CheckpointMeta,
    blob: String,
    tensors: Vec<TensorEntry>,
}

/// Named tensor groups plus run metadata. Optimizer moments live in their
/// own groups alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: BTreeMap<String, ParamStore>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, epoch: usize, step: usize) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(PARAMS.to_string(), model.params.clone());
        groups.insert(COUPLE_PARAMS.to_string(), model.couple_params.clone());
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                ablation: model.ablation,
                seed,
                epoch,
                step,
                training: serde_json::Value::Null,
            },
            groups,
        }
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group {name}")))
    }

    /// Rebuilds the model recorded in the manifest and loads its weights.
    pub fn to_model(&self) -> Result<Model> {
        self.to_model_with(self.meta.ablation)
    }

    /// As [`Checkpoint::to_model`] but with different component switches;
    /// fails naming the first layer the checkpoint lacks or misshapes.
    pub fn to_model_with(&self, ablation: Ablation) -> Result<Model> {
        let mut model = Model::new(&self.meta.model, ablation, self.meta.seed)?;
        model.params.load_from(self.group(PARAMS)?)?;
        model.couple_params.load_from(self.group(COUPLE_PARAMS)?)?;
        Ok(model)
    }

    /// Writes `path` (the manifest) and a `.bin` blob next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = path.with_extension("bin");
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (group, store) in &self.groups {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            blob: blob_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                manifest.format_version
            )));
        }
        let blob_path: PathBuf = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{} is truncated", blob_path.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        for e in manifest.tensors {
            let len: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + len).ok_or_else(|| {
                Error::Checkpoint(format!("layer {}: blob too short", e.name))
            })?;
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!("layer {} holds non-finite values", e.name)));
            }
            let store = groups.entry(e.group).or_default();
            if store.id(&e.name).is_some() {
                return Err(Error::Checkpoint(format!("layer {} listed twice", e.name)));
            }
            store.add(e.name, Tensor::from_vec(&e.shape, data.to_vec())?);
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            groups,
        })
    }
}
