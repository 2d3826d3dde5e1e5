//! Knowledge-driven parameter fusion.
//!
//! After an edit's fine-tuning steps, every fusable component gets a first-order Taylor
//! importance score `|<theta_c, dL/dtheta_c>|`, averaged over the steps of the edit. The
//! top `k` percent of components are then replaced by the convex combination
//! `beta * original + gamma * previous + eta * current`; all other arrays keep the
//! current values.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::{ComponentId, ModelConfig, ModelParams, TokenId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Tolerance on `beta + gamma + eta == 1`.
pub const COEFFICIENT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionCoefficients {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Percentage of components selected for fusion, in `[0, 100]`.
    pub k_percent: f64,
}

impl Default for FusionCoefficients {
    fn default() -> Self {
        Self {
            beta: 0.2,
            gamma: 0.3,
            eta: 0.5,
            k_percent: 20.0,
        }
    }
}

impl FusionCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let sum = self.beta + self.gamma + self.eta;
        if (sum - 1.0).abs() > COEFFICIENT_SUM_TOLERANCE {
            return Err(Error::Config(format!("beta + gamma + eta = {sum}, expected 1")));
        }
        if !(0.0..=100.0).contains(&self.k_percent) {
            return Err(Error::Config(format!("k = {} outside [0, 100]", self.k_percent)));
        }
        Ok(())
    }
}

/// `|<theta_c, grad_c>|`, the first-order Taylor estimate of the loss change from zeroing
/// the component.
pub fn component_importance(theta: &Tensor, grad: &Tensor) -> Result<f64> {
    Ok(theta.dot(grad)?.abs())
}

/// Exact importance `|L(theta) - L(theta with component zeroed)|`. Costs two forward
/// passes per component; only used to compare against the first-order estimate.
pub fn exact_importance(params: &ModelParams, tokens: &[TokenId], id: ComponentId) -> Result<f64> {
    let base = crate::model::loss_value(params, tokens)?;
    let mut zeroed = params.clone();
    zeroed
        .component_mut(id)?
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = 0.0);
    Ok((base - crate::model::loss_value(&zeroed, tokens)?).abs())
}

/// Importance sums per component plus the number of accumulated steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceLedger {
    totals: BTreeMap<ComponentId, f64>,
    step_count: usize,
}

impl ImportanceLedger {
    /// A ledger with a zero entry for each of the config's `7 * n_layers` components.
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            totals: config.component_ids().map(|id| (id, 0.0)).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    /// Adds one step's scores, computed from `params` and their gradients.
    pub fn accumulate(&mut self, params: &ModelParams, grads: &ModelParams) -> Result<()> {
        if !params.same_architecture(grads) {
            return Err(Error::Contract("gradients do not match the parameter layout".into()));
        }
        let mut step = Vec::with_capacity(self.totals.len());
        for &id in self.totals.keys() {
            let g = grads.component(id).map_err(|_| {
                Error::Contract(format!("missing gradient for component {id}"))
            })?;
            step.push(component_importance(params.component(id)?, g)?);
        }
        for (total, s) in self.totals.values_mut().zip(step) {
            *total += s;
        }
        self.step_count += 1;
        Ok(())
    }

    /// Running mean over accumulated steps; zero before the first step.
    pub fn mean_score(&self, id: ComponentId) -> Option<f64> {
        let total = self.totals.get(&id)?;
        Some(if self.step_count == 0 {
            0.0
        } else {
            total / self.step_count as f64
        })
    }

    /// `(component, mean score)` in component order.
    pub fn scores(&self) -> Vec<(ComponentId, f64)> {
        self.totals
            .keys()
            .map(|&id| (id, self.mean_score(id).expect("present")))
            .collect()
    }
}

/// Number of items kept by a `k` percent selection over `n` items: `ceil(k * n / 100)`.
pub fn selection_size(k_percent: f64, n: usize) -> usize {
    let k = k_percent.clamp(0.0, 100.0);
    (math::ceil(k * n as f64 / 100.0) as usize).min(n)
}

/// Keys of the `ceil(k * n / 100)` highest scores. Equal scores are ordered by key,
/// lowest first, so the selection is stable and nested as `k` grows.
pub fn rank_top_k<K: Ord + Copy>(scores: &[(K, f64)], k_percent: f64) -> BTreeSet<K> {
    let mut ranked: Vec<(K, f64)> = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let keep = selection_size(k_percent, ranked.len());
    ranked.into_iter().take(keep).map(|(k, _)| k).collect()
}

pub fn select_top_k(ledger: &ImportanceLedger, k_percent: f64) -> BTreeSet<ComponentId> {
    rank_top_k(&ledger.scores(), k_percent)
}

fn fuse_value(weights: [f64; 3], values: [f64; 3]) -> f64 {
    let [a, b, c] = values;
    if a.to_bits() == b.to_bits() && b.to_bits() == c.to_bits() {
        return c;
    }
    let mut acc: Option<f64> = None;
    for (w, x) in weights.into_iter().zip(values) {
        if w != 0.0 {
            acc = Some(acc.map_or(w * x, |s| s + w * x));
        }
    }
    let lo = a.min(b).min(c);
    let hi = a.max(b).max(c);
    acc.unwrap_or(c).clamp(lo, hi)
}

/// Three-way convex merge of the selected components; every other array (embeddings,
/// norms, unselected matrices) is copied from `current`.
pub fn fuse_parameters(
    original: &ModelParams,
    previous: &ModelParams,
    current: &ModelParams,
    selected: &BTreeSet<ComponentId>,
    coeffs: &FusionCoefficients,
) -> Result<ModelParams> {
    coeffs.validate()?;
    if !original.same_architecture(current) || !previous.same_architecture(current) {
        return Err(Error::Contract("fusion sources differ in architecture".into()));
    }
    let weights = [coeffs.beta, coeffs.gamma, coeffs.eta];
    let mut out = current.clone();
    for &id in selected {
        let (a, b) = (original.component(id)?, previous.component(id)?);
        let target = out.component_mut(id)?;
        for ((x, &va), &vb) in target.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *x = fuse_value(weights, [va, vb, *x]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComponentKind, ModelConfig};
    use alloc::vec;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 8,
            max_seq_len: 8,
            seed: 0,
        }
    }

    #[test]
    fn importance_arithmetic() {
        let t = Tensor::from_rows(&[&[1.0, 2.0]]);
        let g = Tensor::from_rows(&[&[3.0, -4.0]]);
        assert_eq!(component_importance(&t, &g).unwrap(), 5.0);
        assert_eq!(component_importance(&t, &Tensor::zeros(&[1, 2])).unwrap(), 0.0);
        assert!(component_importance(&t, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn importance_doubles_with_the_inner_product() {
        let t = Tensor::from_rows(&[&[1.5, -2.0, 0.25]]);
        let g = Tensor::from_rows(&[&[0.3, 0.7, -1.1]]);
        let mut g2 = g.clone();
        g2.scale_in_place(2.0);
        let s1 = component_importance(&t, &g).unwrap();
        assert_eq!(component_importance(&t, &g2).unwrap(), 2.0 * s1);
    }

    #[test]
    fn ledger_means() {
        let p = ModelParams::init(&cfg()).unwrap();
        let mut g = p.clone();
        g.layers[1].mlp_up.scale_in_place(-0.5);
        let mut ledger = ImportanceLedger::new(&p.config);
        assert_eq!(ledger.len(), 14);
        ledger.accumulate(&p, &g).unwrap();
        let id = ComponentId { layer: 1, kind: ComponentKind::MlpUp };
        let single = component_importance(p.component(id).unwrap(), g.component(id).unwrap()).unwrap();
        assert_eq!(ledger.mean_score(id), Some(single));
        ledger.accumulate(&p, &g).unwrap();
        assert_eq!(ledger.mean_score(id), Some(single));
        assert_eq!(ledger.step_count(), 2);
        assert_eq!(ledger.scores().len(), 14);
    }

    #[test]
    fn ceiling_rule_on_three_items() {
        let scores = [('a', 3.0), ('b', 1.0), ('c', 2.0)];
        assert_eq!(rank_top_k(&scores, 34.0), ['a', 'c'].into_iter().collect());
        assert!(rank_top_k(&scores, 0.0).is_empty());
        assert_eq!(rank_top_k(&scores, 100.0).len(), 3);
        assert_eq!(rank_top_k(&scores, 33.0), ['a'].into_iter().collect());
    }

    #[test]
    fn selection_size_matches_integer_ceiling_for_every_k() {
        for n in 1..=30usize {
            for k in 0..=100usize {
                let expected = (k * n).div_ceil(100);
                assert_eq!(selection_size(k as f64, n), expected, "k={k} n={n}");
            }
        }
    }

    #[test]
    fn ties_break_by_component_order() {
        let scores: Vec<(ComponentId, f64)> = cfg().component_ids().map(|id| (id, 1.0)).collect();
        let picked = rank_top_k(&scores, 20.0);
        let expected: BTreeSet<_> = cfg().component_ids().take(3).collect();
        assert_eq!(picked, expected);
    }

    #[test]
    fn coefficient_validation() {
        assert!(FusionCoefficients::default().validate().is_ok());
        let bad = FusionCoefficients { beta: 0.5, gamma: 0.5, eta: 0.5, k_percent: 10.0 };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scalar_fusion_example() {
        assert_eq!(fuse_value([0.5, 0.25, 0.25], [4.0, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn fixed_point_and_vertices() {
        let c = cfg();
        let p0 = ModelParams::init(&c).unwrap();
        let p1 = ModelParams::init(&ModelConfig { seed: 1, ..c.clone() }).unwrap();
        let p2 = ModelParams::init(&ModelConfig { seed: 2, ..c.clone() }).unwrap();
        let all: BTreeSet<_> = c.component_ids().collect();
        let coeffs = FusionCoefficients { beta: 0.2, gamma: 0.3, eta: 0.5, k_percent: 100.0 };
        let same = fuse_parameters(&p1, &p1, &p1, &all, &coeffs).unwrap();
        assert!(same.bit_eq(&p1));

        let sources = [&p0, &p1, &p2];
        for (i, w) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
            let co = FusionCoefficients { beta: w[0], gamma: w[1], eta: w[2], k_percent: 100.0 };
            let fused = fuse_parameters(&p0, &p1, &p2, &all, &co).unwrap();
            for id in c.component_ids() {
                assert!(fused.component(id).unwrap().bit_eq(sources[i].component(id).unwrap()));
            }
            assert!(fused.token_embedding.bit_eq(&p2.token_embedding));
            assert!(fused.layers[0].attn_norm.bit_eq(&p2.layers[0].attn_norm));
        }
    }

    #[test]
    fn unselected_components_come_from_current() {
        let c = cfg();
        let p0 = ModelParams::init(&c).unwrap();
        let p1 = ModelParams::init(&ModelConfig { seed: 1, ..c.clone() }).unwrap();
        let p2 = ModelParams::init(&ModelConfig { seed: 2, ..c.clone() }).unwrap();
        let pick = ComponentId { layer: 0, kind: ComponentKind::AttnV };
        let selected: BTreeSet<_> = vec![pick].into_iter().collect();
        let fused = fuse_parameters(&p0, &p1, &p2, &selected, &FusionCoefficients::default()).unwrap();
        for id in c.component_ids().filter(|&id| id != pick) {
            assert!(fused.component(id).unwrap().bit_eq(p2.component(id).unwrap()));
        }
        assert!(!fused.component(pick).unwrap().bit_eq(p2.component(pick).unwrap()));
    }

    proptest! {
        #[test]
        fn fusion_stays_inside_source_interval(
            a in -10.0f64..10.0, b in -10.0f64..10.0, c in -10.0f64..10.0,
            w1 in 0.0f64..1.0, w2 in 0.0f64..1.0,
        ) {
            let beta = w1;
            let gamma = (1.0 - beta) * w2;
            let eta = 1.0 - beta - gamma;
            let v = fuse_value([beta, gamma, eta], [a, b, c]);
            prop_assert!(v >= a.min(b).min(c) && v <= a.max(b).max(c));
        }

        #[test]
        fn selection_is_nested(
            raw in proptest::collection::vec(0.0f64..5.0, 14),
            k1 in 0.0f64..100.0, k2 in 0.0f64..100.0,
        ) {
            let scores: Vec<(usize, f64)> = raw.into_iter().enumerate().collect();
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let small = rank_top_k(&scores, lo);
            let large = rank_top_k(&scores, hi);
            prop_assert!(small.is_subset(&large));
        }
    }
}
