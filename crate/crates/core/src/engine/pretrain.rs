use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerKind, OptimizerState};
use crate::model::{self, ModelParams, TokenId};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop early once the mean loss over the last `window` steps drops below this.
    pub target_loss: Option<f64>,
    pub window: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            target_loss: None,
            window: 50,
            seed: 0,
            optimizer: OptimizerKind::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps_run: usize,
    pub losses: Vec<f64>,
}

/// Minibatch language-model training over `docs` (each already wrapped in `bos`/`eos`).
/// Batches are drawn with replacement from a seeded stream; gradients are averaged over
/// the batch.
pub fn pretrain(
    params: &mut ModelParams,
    docs: &[Vec<TokenId>],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    if docs.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.window == 0 {
        return Err(Error::Config("batch_size and window must be positive".into()));
    }
    if let Some(d) = docs.iter().find(|d| d.len() < 2 || d.len() > params.config.max_seq_len) {
        return Err(Error::SequenceTooLong {
            len: d.len(),
            max: params.config.max_seq_len,
        });
    }
    let mut r = rng::stream(cfg.seed, rng::streams::PRETRAIN);
    let mut opt = OptimizerState::new(cfg.optimizer, params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let doc = &docs[r.random_range(0..docs.len())];
            let lg = model::loss_and_grads(params, doc, None)?;
            loss += lg.loss * scale;
            for (acc, g) in total.tensors_mut().into_iter().zip(lg.grads.tensors()) {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x * scale;
                }
            }
        }
        opt.step(params, &total, cfg.lr)?;
        losses.push(loss);
        on_step(step, loss);
        if let Some(target) = cfg.target_loss {
            if losses.len() >= cfg.window {
                let recent = &losses[losses.len() - cfg.window..];
                if recent.iter().sum::<f64>() / cfg.window as f64 <= target {
                    break;
                }
            }
        }
    }
    Ok(PretrainReport {
        steps_run: losses.len(),
        losses,
    })
}
