//! Run configuration, read from TOML.
//!
//! Every section is optional; missing keys take the defaults below.
//!
//! ```toml
//! [model]
//! dim = 64
//! n_layers = 2
//! n_heads = 4
//! mlp_hidden = 128
//! max_seq_len = 256
//!
//! [tokenizer]
//! mode = "bpe"          # or "byte"
//! vocab_size = 512
//!
//! [noise]
//! alpha = 5.0
//! resample_each_step = true
//!
//! [fusion]
//! beta = 0.2
//! gamma = 0.3
//! eta = 0.5
//! k = 20.0              # percent of components fused
//!
//! [engine]
//! epochs_per_edit = 30
//! lr = 1e-3
//! optimizer = "adam"    # or "sgd"
//!
//! [eval]
//! every = 1
//! coeff = 0.1
//! max_new = 32
//!
//! [seeds]
//! base = 0              # model init, pretraining and tokenizer corpus
//! run = 0               # edit corpus, noise and specificity sampling
//!
//! [corpus]
//! n_edits = 50
//! ```

use std::path::Path;

use evoedit_core::engine::{
    AdamConfig, EditConfig, EvalSettings, GradSource, ImportanceMode, OptimizerKind, PretrainConfig,
};
use evoedit_core::fusion::FusionCoefficients;
use evoedit_core::model::ModelConfig;
use evoedit_core::perturbation::NoiseConfig;
use evoedit_core::tokenizer::TokenizerMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Must match the tokenizer when given; otherwise taken from it.
    pub vocab_size: Option<usize>,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vocab_size: None,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 128,
            max_seq_len: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub mode: TokenizerMode,
    pub vocab_size: usize,
    /// Counterfactual edit texts mixed into the tokenizer corpus so their names get
    /// merges. They never reach the model during pretraining.
    pub extra_edit_texts: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Bpe,
            vocab_size: 512,
            extra_edit_texts: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub alpha: f64,
    pub resample_each_step: bool,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseConfig::default();
        Self {
            alpha: n.alpha,
            resample_each_step: n.resample_each_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub k: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionCoefficients::default();
        Self {
            beta: f.beta,
            gamma: f.gamma,
            eta: f.eta,
            k: f.k_percent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub epochs_per_edit: usize,
    pub lr: f64,
    pub optimizer: OptimizerName,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub importance: ImportanceMode,
    pub grad_source: GradSource,
    pub disable_lpa: bool,
    pub disable_kpf: bool,
    pub dpf_mode: bool,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EditConfig::default();
        let a = AdamConfig::default();
        Self {
            epochs_per_edit: e.epochs_per_edit,
            lr: e.lr,
            optimizer: OptimizerName::Adam,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            importance: e.importance,
            grad_source: e.grad_source,
            disable_lpa: false,
            disable_kpf: false,
            dpf_mode: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub every: usize,
    pub coeff: f64,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalSettings::default();
        Self {
            every: e.every,
            coeff: e.coeff,
            max_new: e.max_new,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub base: u64,
    pub run: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_loss: Option<f64>,
    pub window: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            target_loss: p.target_loss,
            window: p.window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Length of the synthetic stream when no corpus file is given.
    pub n_edits: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { n_edits: 50 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Write a resumable checkpoint after every this many edits; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub tokenizer: TokenizerSection,
    pub noise: NoiseSection,
    pub fusion: FusionSection,
    pub engine: EngineSection,
    pub eval: EvalSection,
    pub seeds: SeedSection,
    pub pretrain: PretrainSection,
    pub corpus: CorpusSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.edit_config().validate()?;
        self.eval_settings().validate()?;
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size.unwrap_or(self.tokenizer.vocab_size),
            dim: m.dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_hidden: m.mlp_hidden,
            max_seq_len: m.max_seq_len,
            seed: self.seeds.base,
        }
        .validate()?;
        if self.tokenizer.mode == TokenizerMode::Bpe && self.tokenizer.vocab_size < 260 {
            return Err(CliError::Config("tokenizer.vocab_size must be at least 260".into()));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.window == 0 {
            return Err(CliError::Config("pretrain.batch_size and pretrain.window must be positive".into()));
        }
        if self.corpus.n_edits == 0 {
            return Err(CliError::Config("corpus.n_edits must be positive".into()));
        }
        Ok(())
    }

    /// Model architecture for a tokenizer of `vocab_size` ids.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        if let Some(v) = self.model.vocab_size {
            if v != vocab_size {
                return Err(CliError::Config(format!(
                    "model.vocab_size = {v} but the tokenizer has {vocab_size} ids"
                )));
            }
        }
        let m = &self.model;
        Ok(ModelConfig {
            vocab_size,
            dim: m.dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_hidden: m.mlp_hidden,
            max_seq_len: m.max_seq_len,
            seed: self.seeds.base,
        })
    }

    /// Engine settings before any method flag is applied.
    pub fn edit_config(&self) -> EditConfig {
        let e = &self.engine;
        EditConfig {
            epochs_per_edit: e.epochs_per_edit,
            lr: e.lr,
            optimizer: match e.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam(AdamConfig {
                    beta1: e.adam_beta1,
                    beta2: e.adam_beta2,
                    eps: e.adam_eps,
                }),
            },
            noise: NoiseConfig {
                alpha: self.noise.alpha,
                rng_seed: self.seeds.run,
                resample_each_step: self.noise.resample_each_step,
            },
            fusion: FusionCoefficients {
                beta: self.fusion.beta,
                gamma: self.fusion.gamma,
                eta: self.fusion.eta,
                k_percent: self.fusion.k,
            },
            importance: e.importance,
            grad_source: e.grad_source,
            disable_lpa: e.disable_lpa,
            disable_kpf: e.disable_kpf,
            dpf_mode: e.dpf_mode,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            every: self.eval.every,
            coeff: self.eval.coeff,
            max_new: self.eval.max_new,
            seed: self.seeds.run,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            target_loss: p.target_loss,
            window: p.window,
            seed: self.seeds.base,
            optimizer: OptimizerKind::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("[noise]\nalpah = 1.0"), Err(CliError::Config(_))));
        let bad_sum = "[fusion]\nbeta = 0.5\ngamma = 0.5\neta = 0.5";
        assert_eq!(RunConfig::parse(bad_sum).unwrap_err().exit_code(), 3);
        assert!(RunConfig::parse("[eval]\ncoeff = 0.0").is_err());
        assert!(RunConfig::parse("[model]\ndim = 30\nn_heads = 4").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.noise.alpha = 2.5;
        c.engine.optimizer = OptimizerName::Sgd;
        c.model.vocab_size = Some(300);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let mut c = RunConfig::default();
        c.model.vocab_size = Some(400);
        assert!(matches!(c.model_config(512), Err(CliError::Config(_))));
        assert_eq!(c.model_config(400).unwrap().vocab_size, 400);
    }
}
