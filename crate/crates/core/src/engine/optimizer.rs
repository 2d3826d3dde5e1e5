use alloc::format;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::ModelParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamConfig),
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }
}

/// First-order optimizer with its moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    steps: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Option<ModelParams>,
    v: Option<ModelParams>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam(_)).then(|| params.zeros_like());
        Self {
            kind,
            steps: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            v: moments.clone(),
            m: moments,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update in place. Non-finite gradients or a non-finite result are reported as
    /// divergence; `params` is left as it was in the first case only.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if !params.same_architecture(grads) {
            return Err(Error::Contract("gradients do not match the parameter layout".into()));
        }
        if !grads.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient at optimizer step {}",
                self.steps + 1
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (x, &dx) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * dx;
                    }
                }
            }
            OptimizerKind::Adam(cfg) => {
                self.beta1_pow *= cfg.beta1;
                self.beta2_pow *= cfg.beta2;
                let c1 = 1.0 - self.beta1_pow;
                let c2 = 1.0 - self.beta2_pow;
                let m = self.m.as_mut().expect("adam moments");
                let v = self.v.as_mut().expect("adam moments");
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut());
                for (((p, g), m), v) in tensors {
                    let lanes = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((x, &dx), mi), vi) in lanes {
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * dx;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * dx * dx;
                        *x -= lr * (*mi / c1) / (math::sqrt(*vi / c2) + cfg.eps);
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after optimizer step {}",
                self.steps
            )));
        }
        Ok(())
    }
}
