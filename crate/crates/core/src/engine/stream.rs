use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{edit_tokens, EditLog, EditState, StreamError};
use crate::corpus::EditInstance;
use crate::eval::{evaluate_efficacy, evaluate_specificity, EvalReport, LmAnswerer};
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Evaluate after every `every`-th edit, and always after the last one.
    pub every: usize,
    /// Fraction of earlier instances sampled for specificity.
    pub coeff: f64,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 1,
            coeff: 0.1,
            max_new: 32,
            seed: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.every == 0 {
            return Err(Error::Config("eval.every must be at least 1".into()));
        }
        if !(self.coeff > 0.0 && self.coeff <= 1.0) {
            return Err(Error::Config(alloc::format!("eval.coeff {} outside (0, 1]", self.coeff)));
        }
        Ok(())
    }
}

/// One consumed instance: the edit log plus the evaluations run after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of edits applied so far, starting at 1.
    pub t: usize,
    pub instance_id: String,
    pub log: EditLog,
    pub warnings: Vec<String>,
    pub efficacy: Option<EvalReport>,
    pub specificity: Option<EvalReport>,
}

/// Efficacy on `instances[t - 1]` and specificity over `instances[..t - 1]` for the
/// model in `params`, as scored at step `t`.
pub fn evaluate_step(
    params: &crate::model::ModelParams,
    tokenizer: &Tokenizer,
    instances: &[EditInstance],
    t: usize,
    settings: &EvalSettings,
) -> Result<(EvalReport, Option<EvalReport>)> {
    let lm = LmAnswerer {
        params,
        tokenizer,
        max_new: settings.max_new,
    };
    let efficacy = evaluate_efficacy(&lm, &instances[t - 1])?;
    let mut r = rng::stream(settings.seed, rng::streams::EVAL_BASE + t as u64);
    let specificity = evaluate_specificity(&lm, &instances[..t - 1], settings.coeff, &mut r)?;
    Ok((efficacy, specificity))
}

/// Consumes `instances[state.edits_applied()..]` in order. Earlier entries count as
/// history, which makes a resumed run evaluate exactly like an uninterrupted one.
pub fn run_instances(
    state: &mut EditState,
    tokenizer: &Tokenizer,
    instances: &[EditInstance],
    settings: &EvalSettings,
    on_step: impl FnMut(&EditState, &StepRecord) -> Result<()>,
) -> core::result::Result<Vec<StepRecord>, StreamError> {
    run_instances_until(state, tokenizer, instances, settings, instances.len(), on_step)
}

/// Like [`run_instances`] but stops once `end` edits have been applied, so a long
/// stream can be processed in slices. The last instance of the stream still decides
/// when the closing evaluation happens.
pub fn run_instances_until(
    state: &mut EditState,
    tokenizer: &Tokenizer,
    instances: &[EditInstance],
    settings: &EvalSettings,
    end: usize,
    mut on_step: impl FnMut(&EditState, &StepRecord) -> Result<()>,
) -> core::result::Result<Vec<StepRecord>, StreamError> {
    let start = state.edits_applied();
    let end = end.min(instances.len());
    let fail = |index: usize| move |error| StreamError { index, error };
    if start >= end {
        return Err(StreamError {
            index: start,
            error: Error::Config("no instances left to edit".into()),
        });
    }
    settings.validate().map_err(fail(start))?;
    let max_len = state.current().config.max_seq_len;
    let mut records = Vec::with_capacity(end - start);
    for (index, inst) in instances.iter().enumerate().take(end).skip(start) {
        let (tokens, warning) = edit_tokens(tokenizer, &inst.edit_text, max_len).map_err(fail(index))?;
        let log = state.apply_edit(&tokens).map_err(fail(index))?;
        let t = index + 1;
        let (efficacy, specificity) = if t % settings.every == 0 || t == instances.len() {
            let (e, s) = evaluate_step(state.current(), tokenizer, instances, t, settings).map_err(fail(index))?;
            (Some(e), s)
        } else {
            (None, None)
        };
        let record = StepRecord {
            t,
            instance_id: inst.id.clone(),
            log,
            warnings: warning.into_iter().collect(),
            efficacy,
            specificity,
        };
        on_step(state, &record).map_err(fail(index))?;
        records.push(record);
    }
    Ok(records)
}
