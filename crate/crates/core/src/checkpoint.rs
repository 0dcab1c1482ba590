//! Self-describing JSON checkpoints.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Family, ParamStore, Real};
use crate::vocab::Vocabulary;

pub const FORMAT: &str = "gaussprompt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularyRecord {
    pub hash: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub family: Family,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    /// Element type the tensors were trained in.
    pub precision: String,
    pub vocabulary: VocabularyRecord,
    pub backbone_config: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    /// Resolved configuration of the producing run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    pub tensors: Vec<TensorRecord>,
}

pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub precision: String,
    pub vocabulary: Vocabulary,
    pub backbone_config: BackboneConfig,
    pub model_config: Option<ModelConfig>,
    pub run_config: Option<serde_json::Value>,
    pub store: ParamStore<f64>,
}

impl Checkpoint {
    pub fn from_store<F: Real>(
        kind: CheckpointKind,
        vocabulary: &Vocabulary,
        backbone_config: &BackboneConfig,
        model_config: Option<&ModelConfig>,
        run_config: Option<serde_json::Value>,
        store: &ParamStore<F>,
    ) -> Self {
        Self {
            kind,
            precision: F::NAME.to_string(),
            vocabulary: vocabulary.clone(),
            backbone_config: backbone_config.clone(),
            model_config: model_config.cloned(),
            run_config,
            store: store.cast(),
        }
    }

    pub fn to_file(&self) -> CheckpointFile {
        CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            precision: self.precision.clone(),
            vocabulary: VocabularyRecord { hash: self.vocabulary.hash(), tokens: self.vocabulary.tokens().to_vec() },
            backbone_config: self.backbone_config.clone(),
            model_config: self.model_config.clone(),
            run_config: self.run_config.clone(),
            tensors: self
                .store
                .iter()
                .map(|(_, p)| TensorRecord {
                    name: p.name.clone(),
                    family: p.family,
                    shape: [p.value.nrows(), p.value.ncols()],
                    data: p.value.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<Self> {
        if file.format != FORMAT {
            return Err(Error::Checkpoint(format!("unrecognized format {:?}", file.format)));
        }
        if file.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let vocabulary = Vocabulary::from_tokens(file.vocabulary.tokens)?;
        if vocabulary.hash() != file.vocabulary.hash {
            return Err(Error::Checkpoint("vocabulary hash does not match its tokens".into()));
        }
        let mut store = ParamStore::new();
        for t in file.tensors {
            if store.id(&t.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
            let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|_| Error::Checkpoint(format!("tensor {} does not match its shape", t.name)))?;
            store.add(t.name, t.family, value);
        }
        Ok(Self {
            kind: file.kind,
            precision: file.precision,
            vocabulary,
            backbone_config: file.backbone_config,
            model_config: file.model_config,
            run_config: file.run_config,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    /// Errors unless `data_vocab` is the vocabulary this checkpoint was built on.
    pub fn ensure_vocabulary(&self, data_vocab: &Vocabulary) -> Result<()> {
        let (expected, found) = (self.vocabulary.hash(), data_vocab.hash());
        if expected != found {
            return Err(Error::VocabularyMismatch { expected, found });
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<Backbone> {
        let b = Backbone::resolve(&self.store, &self.backbone_config)?;
        if b.vocab_size != self.vocabulary.len() {
            return Err(Error::Checkpoint("embedding table and vocabulary sizes differ".into()));
        }
        Ok(b)
    }

    pub fn model(&self) -> Result<Model> {
        let config = self
            .model_config
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds only a backbone".into()))?;
        Model::resolve(config, &self.vocabulary, self.backbone()?, &self.store)
    }
}
