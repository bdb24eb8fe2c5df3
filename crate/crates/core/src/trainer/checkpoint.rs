use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamStore, TableSizes};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model: configuration echo,
/// vocabulary labels and every parameter array with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sizes: TableSizes,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, train: &TrainConfig, vocab: &Vocab) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: params.config.clone(),
            train: train.clone(),
            sizes: params.sizes,
            entities: vocab.entity_labels().to_vec(),
            relations: vocab.relation_labels().to_vec(),
            params: params.store.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")));
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not {CHECKPOINT_VERSION}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_labels(&self.entities, &self.relations)
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_store(&self.model, self.sizes, self.params.clone())
    }

    /// Checks that `vocab` assigns the checkpoint's ids to the same labels.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.entity_labels() != self.entities.as_slice() {
            return Err(Error::Checkpoint(format!(
                "entity vocabulary mismatch: checkpoint has {}, data has {}",
                self.entities.len(),
                vocab.num_entities()
            )));
        }
        if vocab.relation_labels() != self.relations.as_slice() {
            return Err(Error::Checkpoint(format!(
                "relation vocabulary mismatch: checkpoint has {}, data has {}",
                self.relations.len(),
                vocab.num_relations()
            )));
        }
        Ok(())
    }
}
