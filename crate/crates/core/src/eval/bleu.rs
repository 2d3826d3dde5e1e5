use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

/// Floor applied to an n-gram precision with zero matches, so one missing order does
/// not zero the whole score.
pub const ZERO_PRECISION_FLOOR: f64 = 1e-9;

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU over lowercased whitespace tokens.
///
/// Uses orders `1..=N` with `N = min(4, |candidate|, |reference|)` and uniform weights,
/// clipped n-gram precisions and the usual brevity penalty `exp(1 - r/c)` when the
/// candidate is shorter. A zero precision is replaced by [`ZERO_PRECISION_FLOOR`]. An
/// empty candidate or reference scores 0.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = words(candidate);
    let refr = words(reference);
    let order = 4.min(cand.len()).min(refr.len());
    if order == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=order {
        let cand_counts = ngram_counts(&cand, n);
        let ref_counts = ngram_counts(&refr, n);
        let matches: usize = cand_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len() + 1 - n;
        let p = if matches == 0 {
            ZERO_PRECISION_FLOOR / total as f64
        } else {
            matches as f64 / total as f64
        };
        log_sum += math::ln(p);
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let brevity = if c < r { math::exp(1.0 - r / c) } else { 1.0 };
    brevity * math::exp(log_sum / order as f64)
}
