//! Sequential editing.
//!
//! Each edit fine-tunes the live parameters on the edit text for a fixed number of
//! steps, with bounded noise on the input embeddings, while accumulating per-component
//! importance. The most important components are then fused with the original and the
//! previous parameters. Ablations switch the noise or the fusion off, or fuse every
//! component regardless of importance.

mod optimizer;
mod pretrain;
mod stream;

pub use optimizer::{AdamConfig, OptimizerKind, OptimizerState};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use stream::{evaluate_step, run_instances, run_instances_until, EvalSettings, StepRecord};

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::fusion::{fuse_parameters, select_top_k, FusionCoefficients, ImportanceLedger};
use crate::model::{self, ComponentId, ModelParams, TokenId};
use crate::perturbation::{sample_noise, NoiseConfig};
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

/// How per-step importance scores are reduced to one score per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// Mean over all steps of the edit.
    #[default]
    RunningMean,
    /// Scores from the last step only.
    FinalStep,
}

/// Which gradient importance is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradSource {
    /// The training gradient, noise included.
    #[default]
    Perturbed,
    /// An extra noise-free backward pass per step.
    Clean,
}

/// Named configurations compared in experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EvoEdit,
    /// Plain sequential fine-tuning: no noise, no fusion.
    Ft,
    NoLpa,
    NoKpf,
    /// Fusion of every component, importance ignored.
    Dpf,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::EvoEdit, Method::Ft, Method::NoLpa, Method::NoKpf, Method::Dpf];

    pub fn name(self) -> &'static str {
        match self {
            Method::EvoEdit => "evoedit",
            Method::Ft => "ft",
            Method::NoLpa => "no_lpa",
            Method::NoKpf => "no_kpf",
            Method::Dpf => "dpf",
        }
    }

    /// Ablation flags the method stands for, applied on top of `base`.
    pub fn configure(self, base: &EditConfig) -> EditConfig {
        let mut c = base.clone();
        match self {
            Method::EvoEdit => {}
            Method::Ft => {
                c.disable_lpa = true;
                c.disable_kpf = true;
            }
            Method::NoLpa => c.disable_lpa = true,
            Method::NoKpf => c.disable_kpf = true,
            Method::Dpf => c.dpf_mode = true,
        }
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub epochs_per_edit: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub noise: NoiseConfig,
    pub fusion: FusionCoefficients,
    pub importance: ImportanceMode,
    pub grad_source: GradSource,
    pub disable_lpa: bool,
    pub disable_kpf: bool,
    pub dpf_mode: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            epochs_per_edit: 30,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            noise: NoiseConfig::default(),
            fusion: FusionCoefficients::default(),
            importance: ImportanceMode::default(),
            grad_source: GradSource::default(),
            disable_lpa: false,
            disable_kpf: false,
            dpf_mode: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_edit == 0 {
            return Err(Error::Config("epochs_per_edit must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.noise.alpha.is_finite() && self.noise.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.noise.alpha)));
        }
        self.fusion.validate()
    }

    fn noise_active(&self) -> bool {
        !self.disable_lpa && self.noise.alpha > 0.0
    }
}

/// Token sequence for an edit: `bos`, the text, `eos`, cut to `max_len`. The second value
/// is a warning when the text had to be truncated.
pub fn edit_tokens(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Result<(Vec<TokenId>, Option<String>)> {
    let body = tokenizer.tokenize(text)?;
    let mut seq = Vec::with_capacity(body.len() + 2);
    seq.push(tokenizer.bos());
    seq.extend(body);
    seq.push(tokenizer.eos());
    let warning = (seq.len() > max_len).then(|| {
        format!("edit of {} tokens truncated to {max_len}", seq.len())
    });
    seq.truncate(max_len);
    if seq.len() < 2 {
        return Err(Error::DegenerateEdit { len: seq.len() });
    }
    Ok((seq, warning))
}

/// What happened during one edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    /// Zero-based index of the edit in the stream.
    pub index: usize,
    pub token_count: usize,
    /// Training loss of each step, as seen by the optimizer (noise included).
    pub losses: Vec<f64>,
    /// Noise-free loss of the edit text after fusion.
    pub final_loss: f64,
    /// Components fused this edit; empty when fusion is off.
    pub selected: Vec<ComponentId>,
    pub scores: Vec<(ComponentId, f64)>,
}

/// Original parameters, the live parameters after the last edit, and the edit count.
#[derive(Clone, Debug)]
pub struct EditState {
    config: EditConfig,
    original: ModelParams,
    current: ModelParams,
    edits: usize,
}

impl EditState {
    pub fn new(params: ModelParams, config: EditConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            original: params.clone(),
            current: params,
            edits: 0,
        })
    }

    /// Resumes from a checkpoint of the current parameters.
    pub fn resume(original: ModelParams, current: ModelParams, edits: usize, config: EditConfig) -> Result<Self> {
        config.validate()?;
        if !original.same_architecture(&current) {
            return Err(Error::Contract("resume parameters differ in architecture".into()));
        }
        Ok(Self {
            config,
            original,
            current,
            edits,
        })
    }

    pub fn config(&self) -> &EditConfig {
        &self.config
    }

    pub fn original(&self) -> &ModelParams {
        &self.original
    }

    pub fn current(&self) -> &ModelParams {
        &self.current
    }

    pub fn edits_applied(&self) -> usize {
        self.edits
    }

    /// Applies one edit. On error the state is unchanged.
    pub fn apply_edit(&mut self, tokens: &[TokenId]) -> Result<EditLog> {
        let cfg = &self.config;
        if tokens.len() < 2 {
            return Err(Error::DegenerateEdit { len: tokens.len() });
        }
        let index = self.edits;
        let model_cfg = &self.current.config;
        let mut live = self.current.clone();
        let mut opt = OptimizerState::new(cfg.optimizer, &live);
        let mut ledger = ImportanceLedger::new(model_cfg);
        let mut noise_rng = rng::stream(cfg.noise.rng_seed, rng::streams::NOISE_BASE + index as u64);
        let mut noise = None;
        let mut losses = Vec::with_capacity(cfg.epochs_per_edit);

        for step in 0..cfg.epochs_per_edit {
            if cfg.noise_active() && (step == 0 || cfg.noise.resample_each_step) {
                noise = sample_noise(tokens.len() - 1, model_cfg.dim, cfg.noise.alpha, &mut noise_rng);
            }
            let lg = model::loss_and_grads(&live, tokens, noise.as_ref())?;
            if !lg.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {} of edit {index}",
                    step + 1
                )));
            }
            if cfg.importance == ImportanceMode::FinalStep {
                ledger = ImportanceLedger::new(model_cfg);
            }
            match cfg.grad_source {
                GradSource::Perturbed => ledger.accumulate(&live, &lg.grads)?,
                GradSource::Clean if noise.is_some() => {
                    let clean = model::loss_and_grads(&live, tokens, None)?;
                    ledger.accumulate(&live, &clean.grads)?;
                }
                GradSource::Clean => ledger.accumulate(&live, &lg.grads)?,
            }
            losses.push(lg.loss);
            opt.step(&mut live, &lg.grads, cfg.lr).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("{msg} (edit {index})")),
                other => other,
            })?;
        }

        let scores = ledger.scores();
        let (next, selected) = if cfg.disable_kpf {
            (live, Vec::new())
        } else {
            let selected: BTreeSet<ComponentId> = if cfg.dpf_mode {
                model_cfg.component_ids().collect()
            } else {
                select_top_k(&ledger, cfg.fusion.k_percent)
            };
            let fused = fuse_parameters(&self.original, &self.current, &live, &selected, &cfg.fusion)?;
            (fused, selected.into_iter().collect())
        };
        let final_loss = model::loss_value(&next, tokens)?;
        if !final_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss after edit {index}")));
        }
        self.current = next;
        self.edits += 1;
        Ok(EditLog {
            index,
            token_count: tokens.len(),
            losses,
            final_loss,
            selected,
            scores,
        })
    }
}

/// Callbacks while a stream runs.
pub trait StreamHooks {
    /// Called after every successful edit.
    fn after_edit(&mut self, state: &EditState, log: &EditLog) -> Result<()>;
}

impl<F: FnMut(&EditState, &EditLog) -> Result<()>> StreamHooks for F {
    fn after_edit(&mut self, state: &EditState, log: &EditLog) -> Result<()> {
        self(state, log)
    }
}

/// Failure of a stream, with the index of the edit that failed.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamError {
    pub index: usize,
    pub error: Error,
}

impl fmt::Display for StreamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "edit {}: {}", self.index, self.error)
    }
}

/// Applies every edit in order. Stops at the first failure; the state then holds the
/// parameters after the last successful edit.
pub fn run_stream<H: StreamHooks + ?Sized>(
    state: &mut EditState,
    edits: &[Vec<TokenId>],
    hooks: &mut H,
) -> core::result::Result<Vec<EditLog>, StreamError> {
    let mut logs = Vec::with_capacity(edits.len());
    for tokens in edits {
        let index = state.edits_applied();
        let log = state
            .apply_edit(tokens)
            .map_err(|error| StreamError { index, error })?;
        hooks
            .after_edit(state, &log)
            .map_err(|error| StreamError { index, error })?;
        logs.push(log);
    }
    Ok(logs)
}
