//! Hierarchical run configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BaseDecode, PreferenceType, WorldConfig};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, Method};
use crate::model::{AdapterConfig, ModelConfig};
use crate::provenance;
use crate::theory::TheoryConfig;
use crate::trainer::{OptimizerConfig, PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Prompts per preference type.
    pub n_prompts: usize,
    pub valid_fraction: f64,
    /// Knowledge probes to draw; `None` takes the whole probe pool.
    pub probe_count: Option<usize>,
    /// Token budget when decoding base responses.
    pub base_max_len: usize,
    pub base_decode: BaseDecode,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_prompts: 200,
            valid_fraction: 0.1,
            probe_count: None,
            base_max_len: 8,
            base_decode: BaseDecode::Greedy,
        }
    }
}

/// What `train`, `compare` and `sweep` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Preference type of a single `train` run and of the sweeps.
    pub preference_type: PreferenceType,
    pub methods: Vec<Method>,
    pub types: Vec<PreferenceType>,
    pub lambdas: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preference_type: PreferenceType::P2A,
            methods: vec![Method::Dpo, Method::Bapo],
            types: PreferenceType::STYLES.to_vec(),
            lambdas: vec![0.0, 1.0, 5.0, 10.0],
            ranks: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its randomness from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub theory: TheoryConfig,
}

/// Preference-training defaults for the synthetic world: the large-model
/// recipe (SGD, lr 5e-5) barely moves a model this small in one epoch.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        optimizer: OptimizerConfig::adam(),
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            loss: LossConfig::default(),
            train: desk_train_config(),
            experiment: ExperimentConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub lambda: Option<f64>,
    pub rank: Option<usize>,
    pub preference_type: Option<PreferenceType>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.method {
            self.loss.method = m;
        }
        if let Some(l) = o.lambda {
            self.loss.lambda = l;
        }
        if let Some(r) = o.rank {
            self.adapter = AdapterConfig::with_rank(r);
        }
        if let Some(t) = o.preference_type {
            self.experiment.preference_type = t;
        }
    }

    /// Validates every section and copies the master seed into the
    /// stage configs.
    pub fn resolve(mut self) -> Result<Self> {
        self.world.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapter.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.theory.validate()?;
        let c = &self.corpus;
        if c.n_prompts == 0 {
            return Err(Error::Config("corpus.n_prompts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&c.valid_fraction) {
            return Err(Error::Config("corpus.valid_fraction must be in [0, 1)".into()));
        }
        if c.base_max_len == 0 {
            return Err(Error::Config("corpus.base_max_len must be >= 1".into()));
        }
        if self.experiment.preference_type.contrast().is_none() {
            return Err(Error::Config(format!(
                "experiment.preference_type must be a style type (P1A..P3B), got {}",
                self.experiment.preference_type.id()
            )));
        }
        if self.experiment.methods.is_empty() || self.experiment.types.is_empty() {
            return Err(Error::Config("experiment.methods and experiment.types must be non-empty".into()));
        }
        if self.experiment.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("experiment.lambdas must be finite and >= 0".into()));
        }
        if self.experiment.ranks.contains(&0) {
            return Err(Error::Config("experiment.ranks must be >= 1".into()));
        }
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.theory.seed = self.seed;
        Ok(self)
    }

    /// TOML with every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn hash(&self) -> String {
        provenance::content_hash(self)
    }
}
