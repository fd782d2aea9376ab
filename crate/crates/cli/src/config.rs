//! Run configuration: every knob of a training or decoding run, loadable
//! from JSON or TOML and snapshotted next to checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cgru::decoding::BeamConfig;
use cgru::io::Dtype;
use cgru::model::{FactorConfig, InitConfig, ModelConfig, Tying};
use cgru::training::{
    DropoutRates, MrtConfig, Objective, OptimizerConfig, TrainingConfig, ValidationMetric,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub valid_source: Option<PathBuf>,
    pub valid_target: Option<PathBuf>,
    /// Existing vocabularies, one per source factor; built from the
    /// training data when empty.
    pub source_vocabs: Vec<PathBuf>,
    pub target_vocab: Option<PathBuf>,
    pub max_source_vocab: usize,
    pub max_target_vocab: usize,
    pub factors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_source: None,
            train_target: None,
            valid_source: None,
            valid_target: None,
            source_vocabs: Vec::new(),
            target_vocab: None,
            max_source_vocab: 30_000,
            max_target_vocab: 30_000,
            factors: 1,
        }
    }
}

/// Widths of the network; vocabulary sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Embedding width per source factor; a single value is reused for
    /// every factor.
    pub factor_dims: Vec<usize>,
    pub target_embedding_dim: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub attention_dim: usize,
    pub output_dim: usize,
    pub tying: Tying,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            factor_dims: vec![64],
            target_embedding_dim: 64,
            encoder_dim: 64,
            decoder_dim: 64,
            attention_dim: 64,
            output_dim: 64,
            tying: Tying::None,
        }
    }
}

impl ModelDims {
    pub fn model_config(&self, source_vocabs: &[usize], target_vocab: usize) -> Result<ModelConfig> {
        if self.factor_dims.is_empty() {
            bail!("invalid config field `model.factor_dims`: at least one width is required");
        }
        if self.factor_dims.len() != 1 && self.factor_dims.len() != source_vocabs.len() {
            bail!(
                "invalid config field `model.factor_dims`: {} widths for {} factors",
                self.factor_dims.len(),
                source_vocabs.len()
            );
        }
        let source_factors: Vec<FactorConfig> = source_vocabs
            .iter()
            .enumerate()
            .map(|(f, &vocab_size)| FactorConfig {
                vocab_size,
                dim: *self.factor_dims.get(f).unwrap_or(&self.factor_dims[0]),
            })
            .collect();
        let config = ModelConfig {
            source_embedding_dim: source_factors.iter().map(|f| f.dim).sum(),
            source_factors,
            target_vocab_size: target_vocab,
            target_embedding_dim: self.target_embedding_dim,
            encoder_dim: self.encoder_dim,
            decoder_dim: self.decoder_dim,
            attention_dim: self.attention_dim,
            output_dim: self.output_dim,
            tying: self.tying,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainKnobs {
    pub init: InitConfig,
    pub optimizer: OptimizerConfig,
    pub objective: Objective,
    pub dropout: DropoutRates,
    pub batch_size: usize,
    pub bucket_batches: usize,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
    pub valid_every: usize,
    pub patience: usize,
    pub validation: ValidationMetric,
    pub clip_norm: Option<f64>,
}

impl Default for TrainKnobs {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            init: t.init,
            optimizer: t.optimizer,
            objective: t.objective,
            dropout: t.dropout,
            batch_size: t.batch_size,
            bucket_batches: t.bucket_batches,
            max_epochs: t.max_epochs,
            max_updates: t.max_updates,
            valid_every: t.valid_every,
            patience: t.patience,
            validation: t.validation,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelDims,
    pub training: TrainKnobs,
    pub decoding: BeamConfig,
    /// Decoding worker threads (0 = one per core).
    pub threads: usize,
    pub seed: u64,
    /// Where vocabularies, checkpoints, the log and the config snapshot go.
    pub output_dir: PathBuf,
    pub dtype: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelDims::default(),
            training: TrainKnobs::default(),
            decoding: BeamConfig::default(),
            threads: 1,
            seed: 1234,
            output_dir: PathBuf::from("model"),
            dtype: Dtype::F64,
        }
    }
}

impl RunConfig {
    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(anyhow::Error::from)
        } else {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serialisable")
    }

    /// The snapshot stored inside archives: everything except the output
    /// location, so identical runs produce identical bytes wherever they
    /// are written.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config is serialisable");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        v
    }

    pub fn training_config(&self, model: ModelConfig) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            model,
            init: t.init.clone(),
            optimizer: t.optimizer,
            objective: t.objective.clone(),
            dropout: t.dropout,
            batch_size: t.batch_size,
            bucket_batches: t.bucket_batches,
            max_epochs: t.max_epochs,
            max_updates: t.max_updates,
            valid_every: t.valid_every,
            patience: t.patience,
            validation: t.validation.clone(),
            clip_norm: t.clip_norm,
            seed: self.seed,
        }
    }

    pub fn set_objective(&mut self, name: &str) -> Result<()> {
        self.training.objective = match name {
            "ce" => Objective::Ce,
            "mrt" => match &self.training.objective {
                Objective::Mrt(m) => Objective::Mrt(m.clone()),
                Objective::Ce => Objective::Mrt(MrtConfig::default()),
            },
            other => bail!("invalid value for `--objective`: {other:?} (expected ce or mrt)"),
        };
        Ok(())
    }

    pub fn set_optimizer(&mut self, name: &str) -> Result<()> {
        if self.training.optimizer.name() != name {
            self.training.optimizer = OptimizerConfig::by_name(name).with_context(|| {
                format!("invalid value for `--optimizer`: {name:?} (expected sgd, adadelta, rmsprop or adam)")
            })?;
        }
        Ok(())
    }
}
