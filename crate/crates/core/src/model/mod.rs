//! A tiny LLaMA-style decoder-only language model.
//!
//! Pre-norm blocks with RMSNorm, causal multi-head attention and a gated SiLU MLP.
//! Positions are learned absolute embeddings and the output head is tied to the token
//! embedding. Only the seven per-layer projection matrices named by [`ComponentKind`]
//! take part in importance scoring and fusion.

mod forward;
mod params;

pub use forward::{
    embed, forward_from_embeddings, generate_greedy, generate_until, lm_loss, logits, loss_and_grads,
    loss_value, BoundParams, LossAndGrads,
};
pub use params::{LayerParams, ModelParams};

use alloc::format;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token id type used across the crate.
pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 128,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Number of fusable components, `7 * n_layers`.
    pub fn component_count(&self) -> usize {
        ComponentKind::ALL.len() * self.n_layers
    }

    /// All component ids, layer-major, kinds in [`ComponentKind::ALL`] order.
    pub fn component_ids(&self) -> impl Iterator<Item = ComponentId> {
        (0..self.n_layers)
            .flat_map(|layer| ComponentKind::ALL.into_iter().map(move |kind| ComponentId { layer, kind }))
    }

    /// Shape of the matrix behind `kind`.
    pub fn component_shape(&self, kind: ComponentKind) -> [usize; 2] {
        let (d, h) = (self.dim, self.mlp_hidden);
        match kind {
            ComponentKind::AttnQ | ComponentKind::AttnK | ComponentKind::AttnV | ComponentKind::AttnO => [d, d],
            ComponentKind::MlpGate | ComponentKind::MlpUp => [d, h],
            ComponentKind::MlpDown => [h, d],
        }
    }
}

/// The seven per-layer projection matrices eligible for importance scoring and fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 7] = [
        ComponentKind::AttnQ,
        ComponentKind::AttnK,
        ComponentKind::AttnV,
        ComponentKind::AttnO,
        ComponentKind::MlpGate,
        ComponentKind::MlpUp,
        ComponentKind::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::AttnQ => "attn_q",
            ComponentKind::AttnK => "attn_k",
            ComponentKind::AttnV => "attn_v",
            ComponentKind::AttnO => "attn_o",
            ComponentKind::MlpGate => "mlp_gate",
            ComponentKind::MlpUp => "mlp_up",
            ComponentKind::MlpDown => "mlp_down",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Address of one fusable matrix. Ordering is layer-major, then kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: usize,
    pub kind: ComponentKind,
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind.name())
    }
}
