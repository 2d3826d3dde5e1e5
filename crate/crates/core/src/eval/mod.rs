//! Efficacy and specificity evaluation.
//!
//! Each query is answered by greedy decoding from its prompt and scored with sentence
//! BLEU against the reference answer. Per-token perplexity of the reference answer is
//! reported alongside. Scores are averaged within a rank first, then across ranks.

mod bleu;

pub use bleu::{bleu, ZERO_PRECISION_FLOOR};

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{EditInstance, Rank, RankedQuery};
use crate::math;
use crate::model::{self, ModelParams, TokenId};
use crate::rng::RandomState;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

/// Characters that end a generated answer.
pub const ANSWER_TERMINATORS: [char; 4] = ['.', '?', '\n', ','];

/// Perplexity `exp(mean NLL)` of `targets` under row-wise `logits`, using a
/// max-shifted log-sum-exp per row.
pub fn per_token_ppl(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() || logits.rows() != targets.len() {
        return Err(Error::Dimension {
            op: "per_token_ppl",
            left: logits.shape().to_vec(),
            right: alloc::vec![targets.len()],
        });
    }
    let mut nll = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t >= row.len() {
            return Err(Error::Index {
                what: "target",
                index: t,
                bound: row.len(),
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(row.iter().map(|&x| math::exp(x - max)).sum::<f64>());
        nll += lse - row[t];
    }
    Ok(math::exp(nll / targets.len() as f64))
}

/// Anything that can answer a query. The language model implements it; tests use stubs.
pub trait Answerer {
    /// Free-text answer to the query.
    fn answer(&self, query: &RankedQuery) -> Result<String>;

    /// Per-token perplexity of the reference answer, when the answerer has one.
    fn answer_perplexity(&self, query: &RankedQuery) -> Result<Option<f64>>;
}

/// Greedy decoding answerer over a parameter set.
pub struct LmAnswerer<'a> {
    pub params: &'a ModelParams,
    pub tokenizer: &'a Tokenizer,
    pub max_new: usize,
}

/// Cuts generated text at the first terminator and trims it.
pub fn clean_answer(text: &str) -> &str {
    let end = text.find(ANSWER_TERMINATORS).unwrap_or(text.len());
    text[..end].trim()
}

impl LmAnswerer<'_> {
    fn prompt_tokens(&self, query: &RankedQuery) -> Vec<TokenId> {
        let mut ids = alloc::vec![self.tokenizer.bos()];
        ids.extend(self.tokenizer.encode(&query.prompt()));
        ids
    }

    /// `(sequence, answer start)` for scoring the reference answer. Over-long prompts
    /// lose their oldest tokens; the returned flag reports that.
    pub fn scoring_sequence(&self, query: &RankedQuery) -> Result<(Vec<TokenId>, usize, bool)> {
        let mut seq = self.prompt_tokens(query);
        let answer = self.tokenizer.encode(&alloc::format!(" {}", query.answer.trim()));
        if answer.is_empty() {
            return Err(Error::Schema("empty reference answer".into()));
        }
        let max = self.params.config.max_seq_len;
        if answer.len() + 1 > max {
            return Err(Error::SequenceTooLong {
                len: answer.len() + 1,
                max,
            });
        }
        seq.extend(&answer);
        let cut = seq.len().saturating_sub(max);
        let seq = seq.split_off(cut);
        Ok((seq.clone(), seq.len() - answer.len(), cut > 0))
    }
}

impl Answerer for LmAnswerer<'_> {
    fn answer(&self, query: &RankedQuery) -> Result<String> {
        let prompt = self.prompt_tokens(query);
        let tok = self.tokenizer;
        let out = model::generate_until(self.params, &prompt, self.max_new, Some(tok.eos()), |id| {
            tok.piece(id)
                .iter()
                .any(|b| matches!(b, b'.' | b'?' | b'\n' | b','))
        })?;
        Ok(String::from(clean_answer(&tok.decode(&out))))
    }

    fn answer_perplexity(&self, query: &RankedQuery) -> Result<Option<f64>> {
        let (seq, start, _) = self.scoring_sequence(query)?;
        let logits = model::logits(self.params, &seq[..seq.len() - 1])?;
        let rows = logits.rows();
        let v = logits.cols();
        let tail = Tensor::new(
            alloc::vec![rows - (start - 1), v],
            logits.data()[(start - 1) * v..].to_vec(),
        )?;
        let targets: Vec<usize> = seq[start..].iter().map(|&t| t as usize).collect();
        per_token_ppl(&tail, &targets).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub rank: Rank,
    pub prediction: String,
    pub bleu: f64,
    pub ppl: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub bleu: f64,
    pub ppl: Option<f64>,
    pub count: usize,
}

/// Per-rank means and their average over ranks that had queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ranks: [Option<RankScore>; 4],
    pub average: Option<RankScore>,
    pub queries: Vec<QueryScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn from_scores(queries: Vec<QueryScore>) -> Self {
        let ranks = Rank::ALL.map(|r| {
            let of_rank: Vec<&QueryScore> = queries.iter().filter(|q| q.rank == r).collect();
            if of_rank.is_empty() {
                return None;
            }
            let ppl = if of_rank.iter().all(|q| q.ppl.is_some()) {
                mean(of_rank.iter().filter_map(|q| q.ppl))
            } else {
                None
            };
            Some(RankScore {
                bleu: mean(of_rank.iter().map(|q| q.bleu)).expect("non-empty"),
                ppl,
                count: of_rank.len(),
            })
        });
        let present: Vec<RankScore> = ranks.iter().flatten().copied().collect();
        let average = mean(present.iter().map(|r| r.bleu)).map(|bleu| RankScore {
            bleu,
            ppl: if present.iter().all(|r| r.ppl.is_some()) {
                mean(present.iter().filter_map(|r| r.ppl))
            } else {
                None
            },
            count: present.iter().map(|r| r.count).sum(),
        });
        Self {
            ranks,
            average,
            queries,
        }
    }

    pub fn rank(&self, rank: Rank) -> Option<RankScore> {
        self.ranks[rank.index()]
    }
}

/// Scores every query with `answerer`.
pub fn evaluate_queries<A: Answerer + ?Sized>(answerer: &A, queries: &[RankedQuery]) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(queries.len());
    for q in queries {
        let prediction = answerer.answer(q)?;
        scores.push(QueryScore {
            rank: q.rank,
            bleu: bleu(&prediction, &q.answer),
            ppl: answerer.answer_perplexity(q)?,
            prediction,
        });
    }
    Ok(EvalReport::from_scores(scores))
}

/// Efficacy: every query of the instance just edited.
pub fn evaluate_efficacy<A: Answerer + ?Sized>(answerer: &A, instance: &EditInstance) -> Result<EvalReport> {
    evaluate_queries(answerer, &instance.queries)
}

/// Specificity sample over earlier instances: `ceil(coeff * n)` instances drawn without
/// replacement (at least one), one random query of each rank from each.
pub fn specificity_queries(
    history: &[EditInstance],
    coeff: f64,
    rng: &mut RandomState,
) -> Vec<RankedQuery> {
    if history.is_empty() {
        return Vec::new();
    }
    let n = history.len();
    let take = (math::ceil(coeff.clamp(0.0, 1.0) * n as f64) as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut picked: Vec<usize> = order.into_iter().take(take).collect();
    picked.sort_unstable();
    let mut out = Vec::new();
    for i in picked {
        for r in Rank::ALL {
            let of_rank: Vec<&RankedQuery> = history[i].queries_of(r).collect();
            if let Some(q) = of_rank.choose(rng) {
                out.push((*q).clone());
            }
        }
    }
    out
}

/// Specificity report, or `None` with no history.
pub fn evaluate_specificity<A: Answerer + ?Sized>(
    answerer: &A,
    history: &[EditInstance],
    coeff: f64,
    rng: &mut RandomState,
) -> Result<Option<EvalReport>> {
    let queries = specificity_queries(history, coeff, rng);
    if queries.is_empty() {
        return Ok(None);
    }
    evaluate_queries(answerer, &queries).map(Some)
}
