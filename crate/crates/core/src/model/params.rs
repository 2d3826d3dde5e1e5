use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ComponentId, ComponentKind, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub attn_v: Tensor,
    pub attn_o: Tensor,
    pub mlp_norm: Tensor,
    pub mlp_gate: Tensor,
    pub mlp_up: Tensor,
    pub mlp_down: Tensor,
}

impl LayerParams {
    pub fn component(&self, kind: ComponentKind) -> &Tensor {
        match kind {
            ComponentKind::AttnQ => &self.attn_q,
            ComponentKind::AttnK => &self.attn_k,
            ComponentKind::AttnV => &self.attn_v,
            ComponentKind::AttnO => &self.attn_o,
            ComponentKind::MlpGate => &self.mlp_gate,
            ComponentKind::MlpUp => &self.mlp_up,
            ComponentKind::MlpDown => &self.mlp_down,
        }
    }

    pub fn component_mut(&mut self, kind: ComponentKind) -> &mut Tensor {
        match kind {
            ComponentKind::AttnQ => &mut self.attn_q,
            ComponentKind::AttnK => &mut self.attn_k,
            ComponentKind::AttnV => &mut self.attn_v,
            ComponentKind::AttnO => &mut self.attn_o,
            ComponentKind::MlpGate => &mut self.mlp_gate,
            ComponentKind::MlpUp => &mut self.mlp_up,
            ComponentKind::MlpDown => &mut self.mlp_down,
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.attn_q,
            &self.attn_k,
            &self.attn_v,
            &self.attn_o,
            &self.mlp_norm,
            &self.mlp_gate,
            &self.mlp_up,
            &self.mlp_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.mlp_norm,
            &mut self.mlp_gate,
            &mut self.mlp_up,
            &mut self.mlp_down,
        ]
    }

    const NAMES: [&'static str; 9] = [
        "attn_norm", "attn_q", "attn_k", "attn_v", "attn_o", "mlp_norm", "mlp_gate", "mlp_up",
        "mlp_down",
    ];
}

/// Every trainable array of the model. Also used as the gradient container, since
/// gradients share the parameter layout exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
}

fn uniform(rng: &mut rng::RandomState, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

impl ModelParams {
    /// Deterministic scaled-uniform initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, rng::streams::INIT);
        let (v, d, h) = (config.vocab_size, config.dim, config.mlp_hidden);
        let inv_sqrt = |n: usize| 1.0 / libm::sqrt(n as f64);
        let token_embedding = uniform(&mut r, &[v, d], inv_sqrt(d));
        let position_embedding = uniform(&mut r, &[config.max_seq_len, d], inv_sqrt(d));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], 1.0),
                attn_q: uniform(&mut r, &[d, d], inv_sqrt(d)),
                attn_k: uniform(&mut r, &[d, d], inv_sqrt(d)),
                attn_v: uniform(&mut r, &[d, d], inv_sqrt(d)),
                attn_o: uniform(&mut r, &[d, d], inv_sqrt(d)),
                mlp_norm: Tensor::filled(&[d], 1.0),
                mlp_gate: uniform(&mut r, &[d, h], inv_sqrt(d)),
                mlp_up: uniform(&mut r, &[d, h], inv_sqrt(d)),
                mlp_down: uniform(&mut r, &[h, d], inv_sqrt(h)),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm: Tensor::filled(&[d], 1.0),
        })
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn component(&self, id: ComponentId) -> Result<&Tensor> {
        self.layers
            .get(id.layer)
            .map(|l| l.component(id.kind))
            .ok_or(Error::Index {
                what: "layer",
                index: id.layer,
                bound: self.layers.len(),
            })
    }

    pub fn component_mut(&mut self, id: ComponentId) -> Result<&mut Tensor> {
        let bound = self.layers.len();
        self.layers
            .get_mut(id.layer)
            .map(|l| l.component_mut(id.kind))
            .ok_or(Error::Index {
                what: "layer",
                index: id.layer,
                bound,
            })
    }

    /// All arrays in a fixed order: embeddings, layers (norm, q, k, v, o, norm, gate, up,
    /// down), final norm.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Names matching [`ModelParams::tensors`] one-to-one.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec![String::from("token_embedding"), String::from("position_embedding")];
        for i in 0..self.layers.len() {
            out.extend(LayerParams::NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        out.push(String::from("final_norm"));
        out
    }

    /// Rebuilds parameters from named arrays, as written by [`ModelParams::tensor_names`].
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config)?.zeros_like();
        let names = params.tensor_names();
        if named.len() != names.len() {
            return Err(Error::Schema(format!(
                "expected {} arrays, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((expected, slot), (name, tensor)) in names.iter().zip(params.tensors_mut()).zip(named) {
            if *expected != name {
                return Err(Error::Schema(format!("expected array {expected}, found {name}")));
            }
            if !slot.same_shape(&tensor) {
                return Err(Error::Dimension {
                    op: "from_named",
                    left: slot.shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            *slot = tensor;
        }
        Ok(params)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        let strip = |c: &ModelConfig| ModelConfig { seed: 0, ..c.clone() };
        strip(&self.config) == strip(&other.config)
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.same_shape(b))
    }

    /// FNV-1a over the bit patterns of every entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Bit-exact equality of every array.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.bit_eq(b))
    }
}
