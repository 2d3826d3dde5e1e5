use alloc::vec::Vec;

use super::{ModelConfig, ModelParams, TokenId};
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-6;

struct BoundLayer {
    attn_norm: Var,
    attn_q: Var,
    attn_k: Var,
    attn_v: Var,
    attn_o: Var,
    mlp_norm: Var,
    mlp_gate: Var,
    mlp_up: Var,
    mlp_down: Var,
}

/// Parameters recorded as leaves on a tape.
pub struct BoundParams {
    config: ModelConfig,
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<BoundLayer>,
    final_norm: Var,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let order: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        let mut it = order.iter().copied();
        let mut next = || it.next().expect("layout");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..params.layers.len())
            .map(|_| BoundLayer {
                attn_norm: next(),
                attn_q: next(),
                attn_k: next(),
                attn_v: next(),
                attn_o: next(),
                mlp_norm: next(),
                mlp_gate: next(),
                mlp_up: next(),
                mlp_down: next(),
            })
            .collect();
        let final_norm = next();
        Self {
            config: params.config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            order,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> Var {
        self.token_embedding
    }

    /// Gradients of every leaf, in parameter layout.
    pub fn grads(&self, tape: &Tape, like: &ModelParams) -> ModelParams {
        let mut out = like.zeros_like();
        for (slot, var) in out.tensors_mut().into_iter().zip(&self.order) {
            *slot = tape.grad_tensor(*var);
        }
        out
    }
}

/// Token embedding rows for `tokens`, `[L×d]`. Positions are added later.
pub fn embed(tape: &mut Tape, bound: &BoundParams, tokens: &[TokenId]) -> Result<Var> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    tape.embedding_gather(bound.token_embedding, &ids)
}

fn hidden_states(tape: &mut Tape, bound: &BoundParams, e: Var) -> Result<Var> {
    let cfg = &bound.config;
    let len = tape.value(e).rows();
    if tape.value(e).shape() != [len, cfg.dim] {
        return Err(Error::Dimension {
            op: "forward_from_embeddings",
            left: tape.value(e).shape().to_vec(),
            right: alloc::vec![len, cfg.dim],
        });
    }
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    let head_dim = cfg.head_dim();
    let attn_scale = 1.0 / libm::sqrt(head_dim as f64);

    let pos = tape.slice_rows(bound.position_embedding, 0, len)?;
    let mut x = tape.add(e, pos)?;
    for layer in &bound.layers {
        let n = tape.rms_normalize(x, NORM_EPS);
        let h = tape.mul_row(n, layer.attn_norm)?;
        let q = tape.matmul(h, layer.attn_q)?;
        let k = tape.matmul(h, layer.attn_k)?;
        let v = tape.matmul(h, layer.attn_v)?;
        let (qt, kt, vt) = (tape.transpose(q)?, tape.transpose(k)?, tape.transpose(v)?);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let start = head * head_dim;
            let qh = tape.slice_rows(qt, start, head_dim)?;
            let kh = tape.slice_rows(kt, start, head_dim)?;
            let vh = tape.slice_rows(vt, start, head_dim)?;
            let qh_rows = tape.transpose(qh)?;
            let scores = tape.matmul(qh_rows, kh)?;
            let scores = tape.scale(scores, attn_scale);
            let attn = tape.causal_softmax_rows(scores);
            let attn_t = tape.transpose(attn)?;
            heads.push(tape.matmul(vh, attn_t)?);
        }
        let ot = tape.concat_rows(&heads)?;
        let o = tape.transpose(ot)?;
        let proj = tape.matmul(o, layer.attn_o)?;
        x = tape.add(x, proj)?;

        let n = tape.rms_normalize(x, NORM_EPS);
        let h = tape.mul_row(n, layer.mlp_norm)?;
        let gate = tape.matmul(h, layer.mlp_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(h, layer.mlp_up)?;
        let act = tape.mul(gate, up)?;
        let down = tape.matmul(act, layer.mlp_down)?;
        x = tape.add(x, down)?;
    }
    let n = tape.rms_normalize(x, NORM_EPS);
    tape.mul_row(n, bound.final_norm)
}

/// Causal decoder pass from an embedding matrix `[L×d]` to logits `[L×V]`.
pub fn forward_from_embeddings(tape: &mut Tape, bound: &BoundParams, e: Var) -> Result<Var> {
    let h = hidden_states(tape, bound, e)?;
    let head = tape.transpose(bound.token_embedding)?;
    tape.matmul(h, head)
}

/// Mean next-token cross-entropy of `tokens`.
///
/// `embeddings_override`, when given, replaces `embed(tokens[..len - 1])` as the model
/// input; this is the path perturbed embeddings take.
pub fn lm_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    tokens: &[TokenId],
    embeddings_override: Option<Var>,
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateEdit { len: tokens.len() });
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let e = match embeddings_override {
        Some(e) => e,
        None => embed(tape, bound, inputs)?,
    };
    let logits = forward_from_embeddings(tape, bound, e)?;
    tape.cross_entropy_from_logits(logits, &targets)
}

/// Logits `[L×V]` for every position of `tokens`.
pub fn logits(params: &ModelParams, tokens: &[TokenId]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let e = embed(&mut tape, &bound, tokens)?;
    let l = forward_from_embeddings(&mut tape, &bound, e)?;
    Ok(tape.value(l).clone())
}

/// Loss value only; records nothing that needs a gradient.
pub fn loss_value(params: &ModelParams, tokens: &[TokenId]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let loss = lm_loss(&mut tape, &bound, tokens, None)?;
    Ok(tape.value(loss).item())
}

pub struct LossAndGrads {
    pub loss: f64,
    pub grads: ModelParams,
}

/// Loss and full parameter gradient, optionally with `noise` (`[L-1 × d]`) added to the
/// input token embeddings.
pub fn loss_and_grads(
    params: &ModelParams,
    tokens: &[TokenId],
    noise: Option<&Tensor>,
) -> Result<LossAndGrads> {
    if tokens.len() < 2 {
        return Err(Error::DegenerateEdit { len: tokens.len() });
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let over = match noise {
        Some(n) => {
            let e = embed(&mut tape, &bound, &tokens[..tokens.len() - 1])?;
            let nv = tape.constant(n.clone());
            Some(tape.add(e, nv)?)
        }
        None => None,
    };
    let loss = lm_loss(&mut tape, &bound, tokens, over)?;
    tape.backward(loss)?;
    Ok(LossAndGrads {
        loss: tape.value(loss).item(),
        grads: bound.grads(&tape, params),
    })
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding that also stops after emitting a token for which `stop` returns true
/// (that token is kept). Stops at `eos` (not kept) or after `max_new` tokens. Contexts
/// longer than `max_seq_len` keep only their most recent tokens.
pub fn generate_until(
    params: &ModelParams,
    prompt: &[TokenId],
    max_new: usize,
    eos: Option<TokenId>,
    mut stop: impl FnMut(TokenId) -> bool,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    let max_len = params.config.max_seq_len;
    let mut context: Vec<TokenId> = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let window = &context[context.len().saturating_sub(max_len)..];
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let e = embed(&mut tape, &bound, window)?;
        let h = hidden_states(&mut tape, &bound, e)?;
        let last = tape.slice_rows(h, window.len() - 1, 1)?;
        let head = tape.transpose(bound.token_embedding)?;
        let logits = tape.matmul(last, head)?;
        let next = argmax_lowest(tape.value(logits).data()) as TokenId;
        if Some(next) == eos {
            break;
        }
        out.push(next);
        context.push(next);
        if stop(next) {
            break;
        }
    }
    Ok(out)
}

/// Deterministic argmax decoding; ties go to the lowest token id.
pub fn generate_greedy(
    params: &ModelParams,
    prompt: &[TokenId],
    max_new: usize,
    eos: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    generate_until(params, prompt, max_new, eos, |_| false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{AdamConfig, OptimizerKind, OptimizerState};

    fn tiny(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: 32,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 12,
            max_seq_len: 16,
            seed,
        })
        .unwrap()
    }

    fn logits_for(params: &ModelParams, e: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let ev = tape.constant(e.clone());
        let l = forward_from_embeddings(&mut tape, &bound, ev).unwrap();
        tape.value(l).clone()
    }

    fn embedded(params: &ModelParams, tokens: &[TokenId]) -> Tensor {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let e = embed(&mut tape, &bound, tokens).unwrap();
        tape.value(e).clone()
    }

    #[test]
    fn embed_gathers_rows() {
        let p = tiny(3);
        let e = embedded(&p, &[0, 5, 5]);
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e.row(0), p.token_embedding.row(0));
        assert_eq!(e.row(1), e.row(2));
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p, false);
        assert!(matches!(embed(&mut tape, &bound, &[32]), Err(Error::Index { .. })));
    }

    #[test]
    fn later_rows_do_not_affect_earlier_logits() {
        let p = tiny(4);
        let e = embedded(&p, &[1, 2, 3, 4, 5, 6]);
        let base = logits_for(&p, &e);
        for cut in 1..6 {
            let mut z = e.clone();
            let d = z.cols();
            z.data_mut()[cut * d..].iter_mut().for_each(|x| *x = 0.0);
            let changed = logits_for(&p, &z);
            for r in 0..cut {
                assert_eq!(base.row(r), changed.row(r), "row {r} changed with cut {cut}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_matches_embed_path() {
        let p = tiny(5);
        let tokens = [3, 1, 4, 1, 5];
        let e = embedded(&p, &tokens);
        assert!(logits_for(&p, &e).bit_eq(&logits_for(&p, &e)));

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p, false);
        let ev = embed(&mut tape, &bound, &tokens).unwrap();
        let l = forward_from_embeddings(&mut tape, &bound, ev).unwrap();
        assert!(tape.value(l).bit_eq(&logits_for(&p, &e)));
    }

    #[test]
    fn overlong_input_is_rejected() {
        let p = tiny(6);
        let tokens: Vec<TokenId> = (0..17).map(|i| i % 30).collect();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p, false);
        let e = embed(&mut tape, &bound, &tokens).unwrap();
        assert!(matches!(
            forward_from_embeddings(&mut tape, &bound, e),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn override_with_plain_embeddings_gives_identical_loss() {
        let p = tiny(7);
        let tokens = [2, 7, 1, 8, 2, 8];
        let plain = loss_value(&p, &tokens).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p, false);
        let e = embed(&mut tape, &bound, &tokens[..5]).unwrap();
        let l = lm_loss(&mut tape, &bound, &tokens, Some(e)).unwrap();
        assert_eq!(tape.value(l).item().to_bits(), plain.to_bits());

        let zero = Tensor::zeros(&[5, 8]);
        let with_zero_noise = loss_and_grads(&p, &tokens, Some(&zero)).unwrap();
        assert_eq!(with_zero_noise.loss.to_bits(), plain.to_bits());
    }

    #[test]
    fn loss_needs_two_tokens() {
        let p = tiny(8);
        assert!(matches!(loss_value(&p, &[3]), Err(Error::DegenerateEdit { len: 1 })));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let p = ModelParams::init(&ModelConfig {
            vocab_size: 256,
            dim: 32,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 64,
            max_seq_len: 64,
            seed: 9,
        })
        .unwrap();
        let tokens: Vec<TokenId> = "the quick brown fox jumps".bytes().map(u32::from).collect();
        let loss = loss_value(&p, &tokens).unwrap();
        assert!((loss - 256f64.ln()).abs() < 0.5, "loss {loss}");
    }

    #[test]
    fn attn_q_gradient_matches_finite_differences() {
        let p = tiny(10);
        let tokens = [1, 9, 4, 22, 7, 3];
        let analytic = loss_and_grads(&p, &tokens, None).unwrap().grads.layers[1]
            .attn_q
            .clone();
        let h = 1e-5;
        for j in 0..analytic.len() {
            let mut plus = p.clone();
            plus.layers[1].attn_q.data_mut()[j] += h;
            let mut minus = p.clone();
            minus.layers[1].attn_q.data_mut()[j] -= h;
            let numeric =
                (loss_value(&plus, &tokens).unwrap() - loss_value(&minus, &tokens).unwrap()) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "elem {j}: {a} vs {numeric}");
        }
    }

    #[test]
    fn generation_basics() {
        let p = tiny(11);
        assert!(generate_greedy(&p, &[1, 2], 0, None).unwrap().is_empty());
        let a = generate_greedy(&p, &[1, 2], 20, None).unwrap();
        let b = generate_greedy(&p, &[1, 2], 20, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20, "context window slides past max_seq_len");
        assert!(generate_greedy(&p, &[], 3, None).is_err());
        assert_eq!(argmax_lowest(&[0.5, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn overfit_then_memorize() {
        let mut p = ModelParams::init(&ModelConfig {
            vocab_size: 64,
            dim: 32,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 64,
            max_seq_len: 32,
            seed: 12,
        })
        .unwrap();
        let sentence: Vec<TokenId> = [5, 17, 42, 8, 33, 21, 9, 60, 2, 11, 47, 3].to_vec();
        let initial = loss_value(&p, &sentence).unwrap();
        let adam = AdamConfig::default();
        let mut opt = OptimizerState::new(OptimizerKind::Adam(adam), &p);
        for _ in 0..200 {
            let lg = loss_and_grads(&p, &sentence, None).unwrap();
            opt.step(&mut p, &lg.grads, 1e-2).unwrap();
        }
        let trained = loss_value(&p, &sentence).unwrap();
        assert!(trained < 0.1 * initial, "{initial} -> {trained}");
        let continuation = generate_greedy(&p, &sentence[..3], sentence.len() - 3, None).unwrap();
        assert_eq!(continuation, sentence[3..]);
    }
}
