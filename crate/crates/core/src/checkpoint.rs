//! Model checkpoints: parameters plus everything needed to rebuild the model.

use std::path::Path;

use crate::config::frozen_groups;
use crate::container::Container;
use crate::data::{FeatureStats, VocabularyMap, N_CAT};
use crate::error::{Error, Result};
use crate::icl::IclConfig;
use crate::model::{Model, ModelConfig};
use crate::params::Group;

/// A trained model with the preprocessing it was fitted with.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Model,
    pub phase: u8,
    pub seed: u64,
    pub config_hash: String,
    pub vocab: VocabularyMap,
    pub stats: FeatureStats,
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("metadata serializes")
}

fn meta<'a>(c: &'a Container, key: &str, path: &Path) -> Result<&'a str> {
    c.meta(key).ok_or_else(|| Error::Container {
        path: path.to_path_buf(),
        message: format!("missing metadata key {key}"),
    })
}

impl ModelBundle {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "model");
        c.set_meta("phase", self.phase.to_string());
        c.set_meta("seed", self.seed.to_string());
        c.set_meta("config_hash", self.config_hash.clone());
        c.set_meta("model", json(&self.model.config));
        if let Some(icl) = &self.model.icl {
            c.set_meta("icl", json(&icl.config));
        }
        c.set_meta("cardinalities", json(&self.model.tokenizer.cardinalities));
        let frozen: Vec<&str> = frozen_groups(self.phase).iter().map(|g| g.as_str()).collect();
        c.set_meta("frozen", frozen.join(","));
        c.set_meta("vocab", json(&self.vocab));
        c.set_meta("stats", json(&self.stats));
        self.model.store.to_container(&mut c);
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::load(path)?;
        Self::from_container(&c, path)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        if c.meta("kind") != Some("model") {
            return Err(Error::Container {
                path: path.to_path_buf(),
                message: "not a model checkpoint".into(),
            });
        }
        let bad = |m: String| Error::Container {
            path: path.to_path_buf(),
            message: m,
        };
        let phase: u8 = meta(c, "phase", path)?
            .parse()
            .map_err(|_| bad("bad phase".into()))?;
        let seed: u64 = meta(c, "seed", path)?
            .parse()
            .map_err(|_| bad("bad seed".into()))?;
        let config: ModelConfig = serde_json::from_str(meta(c, "model", path)?)?;
        let cards: [usize; N_CAT] = serde_json::from_str(meta(c, "cardinalities", path)?)?;
        let mut model = Model::new(config, cards, seed)?;
        if let Some(icl) = c.meta("icl") {
            let icl: IclConfig = serde_json::from_str(icl)?;
            model.attach_icl(icl, seed)?;
        }
        model.store.load_from(c)?;
        Ok(Self {
            model,
            phase,
            seed,
            config_hash: meta(c, "config_hash", path)?.to_string(),
            vocab: serde_json::from_str(meta(c, "vocab", path)?)?,
            stats: serde_json::from_str(meta(c, "stats", path)?)?,
        })
    }

    /// Groups that were frozen while this checkpoint was trained.
    pub fn frozen(&self) -> Vec<Group> {
        frozen_groups(self.phase)
    }
}
