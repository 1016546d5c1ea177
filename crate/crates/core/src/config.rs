//! Run configuration, read from TOML. Missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::icl::IclConfig;
use crate::model::ModelConfig;
use crate::numeric::AdamWConfig;
use crate::params::Group;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Mini-batch size of the plain (phase 1) loop.
    pub batch_size: usize,
    /// Cap on held-out chunks per epoch in the ICL phases; 0 means no cap.
    pub chunks_per_epoch: usize,
}

impl PhaseConfig {
    pub fn phase1() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            max_epochs: 100,
            patience: 20,
            batch_size: 1024,
            chunks_per_epoch: 0,
        }
    }

    pub fn phase2() -> Self {
        Self {
            lr: 3e-4,
            max_epochs: 50,
            ..Self::phase1()
        }
    }

    pub fn phase3() -> Self {
        Self {
            lr: 3e-5,
            max_epochs: 20,
            patience: 10,
            ..Self::phase1()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("[{name}] {m}")));
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

/// Parameter groups held fixed in each phase.
pub fn frozen_groups(phase: u8) -> Vec<Group> {
    match phase {
        1 => vec![Group::Decorator, Group::Icl],
        2 => vec![Group::Decoder],
        _ => Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Neighbours retrieved per target.
    pub k: usize,
    /// Context rows kept per chunk.
    pub context_size: usize,
    /// Target rows per chunk.
    pub chunk_size: usize,
    /// Rows per evaluation-mode embedding pass.
    pub embed_batch: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 64,
            context_size: 1000,
            chunk_size: 200,
            embed_batch: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub validation_fraction: f64,
    /// Seeded training-row subsample; 0 keeps everything.
    pub subsample: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.15,
            subsample: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub icl: IclConfig,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub phase3: PhaseConfig,
    pub retrieval: RetrievalConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            icl: IclConfig::default(),
            phase1: PhaseConfig::phase1(),
            phase2: PhaseConfig::phase2(),
            phase3: PhaseConfig::phase3(),
            retrieval: RetrievalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl Config {
    /// Parses `text` layered over the defaults, so a partial `[phase2]`
    /// table keeps the phase-2 values for keys it omits.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let c: Self = toml::Value::Table(base).try_into()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.icl.validate()?;
        self.phase1.validate("phase1")?;
        self.phase2.validate("phase2")?;
        self.phase3.validate("phase3")?;
        let r = &self.retrieval;
        if r.k == 0 || r.context_size == 0 || r.chunk_size == 0 || r.embed_batch == 0 {
            return Err(Error::Config("[retrieval] sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return Err(Error::Config("[data] validation_fraction outside [0, 1)".into()));
        }
        Ok(())
    }

    pub fn phase(&self, phase: u8) -> &PhaseConfig {
        match phase {
            1 => &self.phase1,
            2 => &self.phase2,
            _ => &self.phase3,
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_phase_tables_keep_their_own_defaults() {
        let c = Config::from_toml("[phase2]\nmax_epochs = 3\n[phase3]\nlr = 1e-5\n").unwrap();
        assert_eq!(c.phase2.lr, 3e-4);
        assert_eq!(c.phase2.max_epochs, 3);
        assert_eq!(c.phase3.patience, 10);
        assert_eq!(c.phase3.lr, 1e-5);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.phase2.lr, 3e-4);
        assert_eq!(c.phase3.patience, 10);
        assert_eq!(c.retrieval.k, 64);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = Config::from_toml("[phase1]\nmax_epochs = 3\n[icl]\nlayers = 1\nvariant = \"linearized\"\n").unwrap();
        assert_eq!(c.phase1.max_epochs, 3);
        assert_eq!(c.phase1.lr, 1e-3);
        assert_eq!(c.icl.layers, 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(Config::from_toml("[phase1]\nlearning_rate = 1.0\n").is_err());
        assert!(matches!(
            Config::from_toml("[icl]\nlayers = 2\nvariant = \"linearized\"\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_roundtrip_and_stable_hash() {
        let c = Config::default();
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
