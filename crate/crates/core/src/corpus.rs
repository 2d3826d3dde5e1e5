//! Edit instances with four ranks of queries, and a deterministic synthetic corpus.
//!
//! The synthetic world is a set of people with a true employment history
//! (`person joined org in year`, stays `d` years, then moves to a second org). Base-model
//! pretraining only ever sees true facts. Edit instances rewrite a known person's history
//! with counterfactual organizations built from a syllable pool disjoint from the one
//! true organizations use, so a counterfactual name can never appear in pretraining text.
//!
//! Each instance carries two queries per rank:
//!
//! | rank | shape |
//! |------|-------|
//! | R1 memory | cloze over a sentence of the edit text, blank marked `____` |
//! | R2 comprehension | paraphrased question |
//! | R3 constrained | question conditioned on a year |
//! | R4 reasoning | tenure length, `end - start` years |

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Marks the blank of a cloze question.
pub const CLOZE_BLANK: &str = "____";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rank {
    #[serde(rename = "R1_memory")]
    R1Memory,
    #[serde(rename = "R2_comprehension")]
    R2Comprehension,
    #[serde(rename = "R3_constrained")]
    R3Constrained,
    #[serde(rename = "R4_reasoning")]
    R4Reasoning,
}

impl Rank {
    pub const ALL: [Rank; 4] = [
        Rank::R1Memory,
        Rank::R2Comprehension,
        Rank::R3Constrained,
        Rank::R4Reasoning,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Rank::R1Memory => "R1",
            Rank::R2Comprehension => "R2",
            Rank::R3Constrained => "R3",
            Rank::R4Reasoning => "R4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub rank: Rank,
    pub question: String,
    pub answer: String,
}

impl RankedQuery {
    /// Text the model is asked to continue. Cloze questions are cut at the blank;
    /// anything else is wrapped as `Q: <question> A:`.
    pub fn prompt(&self) -> String {
        match self.question.find(CLOZE_BLANK) {
            Some(pos) => self.question[..pos].trim_end().to_string(),
            None => format!("Q: {} A:", self.question),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditInstance {
    pub id: String,
    pub edit_text: String,
    pub queries: Vec<RankedQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
}

/// Minimum whitespace-separated words in an edit text.
pub const MIN_EDIT_WORDS: usize = 10;

impl EditInstance {
    pub fn queries_of(&self, rank: Rank) -> impl Iterator<Item = &RankedQuery> {
        self.queries.iter().filter(move |q| q.rank == rank)
    }

    /// Ranks with no query at all.
    pub fn missing_ranks(&self) -> Vec<Rank> {
        Rank::ALL
            .into_iter()
            .filter(|&r| self.queries_of(r).next().is_none())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Schema("instance id is empty".into()));
        }
        let words = self.edit_text.split_whitespace().count();
        if words < MIN_EDIT_WORDS {
            return Err(Error::Schema(format!(
                "instance {}: edit_text has {words} words, need at least {MIN_EDIT_WORDS}",
                self.id
            )));
        }
        let missing = self.missing_ranks();
        if !missing.is_empty() {
            let labels: Vec<&str> = missing.iter().map(|r| r.label()).collect();
            return Err(Error::Schema(format!(
                "instance {}: no queries for rank(s) {}",
                self.id,
                labels.join(", ")
            )));
        }
        if let Some(q) = self
            .queries
            .iter()
            .find(|q| q.question.trim().is_empty() || q.answer.trim().is_empty())
        {
            return Err(Error::Schema(format!(
                "instance {}: empty question or answer at rank {}",
                self.id,
                q.rank.label()
            )));
        }
        Ok(())
    }
}

/// One employment history: `person` joined `first_org` in `start_year`, left in
/// `end_year` and moved to `next_org`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTuple {
    pub person: String,
    pub first_org: String,
    pub next_org: String,
    pub start_year: u32,
    pub end_year: u32,
}

impl FactTuple {
    pub fn duration(&self) -> u32 {
        self.end_year - self.start_year
    }

    /// The free-text passage stating the fact.
    pub fn passage(&self) -> String {
        let FactTuple {
            person: p,
            first_org: o,
            next_org: o2,
            start_year: s,
            end_year: e,
        } = self;
        format!("In {s}, {p} joined {o}. {p} worked at {o} until {e}. After leaving {o}, {p} moved to {o2}.")
    }

    /// Two queries per rank over this fact.
    pub fn queries(&self) -> Vec<RankedQuery> {
        let FactTuple {
            person: p,
            first_org: o,
            next_org: o2,
            start_year: s,
            end_year: e,
        } = self;
        let d = self.duration();
        let years = if d == 1 {
            String::from("1 year")
        } else {
            format!("{d} years")
        };
        let q = |rank, question: String, answer: String| RankedQuery {
            rank,
            question,
            answer,
        };
        alloc::vec![
            q(Rank::R1Memory, format!("In {s}, {p} joined {CLOZE_BLANK}."), o.clone()),
            q(Rank::R1Memory, format!("{p} worked at {o} until {CLOZE_BLANK}."), e.to_string()),
            q(Rank::R2Comprehension, format!("Which company did {p} join?"), o.clone()),
            q(Rank::R2Comprehension, format!("In which year did {p} leave {o}?"), e.to_string()),
            q(Rank::R3Constrained, format!("In {s}, which company did {p} work for?"), o.clone()),
            q(Rank::R3Constrained, format!("In {}, which company did {p} work for?", e + 1), o2.clone()),
            q(Rank::R4Reasoning, format!("How many years did {p} work at {o}?"), years.clone()),
            q(Rank::R4Reasoning, format!("How many years after joining {o} did {p} move to {o2}?"), years),
        ]
    }

    /// Pretraining lines for a true fact: the passage plus each query answered in
    /// `Q: ... A: ...` form (cloze queries as the filled sentence).
    pub fn training_texts(&self) -> Vec<String> {
        let mut out = alloc::vec![self.passage()];
        out.extend(self.queries().iter().map(|q| format!("{} {}.", q.prompt(), q.answer)));
        out
    }
}

const TRUE_SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "ta", "so", "vel", "dan", "ri", "mo", "ne", "sal", "tor", "bi", "la", "gor",
];
const TRUE_ORG_SUFFIXES: [&str; 6] = ["Works", "Group", "Press", "Labs", "Media", "Systems"];
const COUNTERFACTUAL_SYLLABLES: [&str; 12] = [
    "zy", "qua", "xe", "phor", "wex", "yl", "jun", "zeph", "quo", "vix", "ush", "kry",
];

/// Number of people in the synthetic world. Edits rewrite their histories.
pub const WORLD_SIZE: usize = 128;

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn word(syllables: &[&str], index: usize, parts: usize) -> String {
    let n = syllables.len();
    let mut i = index;
    let mut w = String::new();
    for _ in 0..parts {
        w.push_str(syllables[i % n]);
        i /= n;
    }
    capitalize(&w)
}

/// Name of person `i`; stable across seeds.
pub fn person_name(i: usize) -> String {
    let first = word(&TRUE_SYLLABLES, i.wrapping_mul(7) + 3, 2);
    let last = word(&TRUE_SYLLABLES, i.wrapping_mul(13) + i / 16 + 5, 3);
    format!("{first} {last}")
}

fn true_org(i: usize) -> String {
    format!(
        "{} {}",
        word(&TRUE_SYLLABLES, i.wrapping_mul(11) + 1, 3),
        TRUE_ORG_SUFFIXES[i % TRUE_ORG_SUFFIXES.len()]
    )
}

fn counterfactual_org(rng: &mut rng::RandomState) -> String {
    let n = COUNTERFACTUAL_SYLLABLES.len();
    let a = rng.random_range(0..n * n);
    let b = rng.random_range(0..n * n);
    format!(
        "{} {}",
        word(&COUNTERFACTUAL_SYLLABLES, a, 2),
        word(&COUNTERFACTUAL_SYLLABLES, b, 2)
    )
}

/// The true employment history of every person in the world.
pub fn true_facts() -> Vec<FactTuple> {
    (0..WORLD_SIZE)
        .map(|i| {
            let start = 1950 + ((i * 7) % 40) as u32;
            let dur = 1 + ((i * 5) % 9) as u32;
            FactTuple {
                person: person_name(i),
                first_org: true_org(i),
                next_org: true_org(i + WORLD_SIZE),
                start_year: start,
                end_year: start + dur,
            }
        })
        .collect()
}

/// Every text the base model is pretrained on.
pub fn pretraining_texts() -> Vec<String> {
    true_facts().iter().flat_map(|f| f.training_texts()).collect()
}

/// Words used by true-fact text; counterfactual objects must avoid all of them.
pub fn true_vocabulary() -> BTreeSet<String> {
    pretraining_texts()
        .iter()
        .flat_map(|t| {
            t.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Counterfactual facts for `n` edits. Subjects are distinct while `n <= WORLD_SIZE`.
pub fn synth_facts(seed: u64, n: usize) -> Vec<FactTuple> {
    let mut r = rng::stream(seed, rng::streams::CORPUS);
    let mut order: Vec<usize> = Vec::new();
    let mut facts = Vec::with_capacity(n);
    for _ in 0..n {
        if order.is_empty() {
            order = (0..WORLD_SIZE).collect();
            order.shuffle(&mut r);
        }
        let person = person_name(order.pop().expect("refilled"));
        let first_org = counterfactual_org(&mut r);
        let mut next_org = counterfactual_org(&mut r);
        while next_org == first_org {
            next_org = counterfactual_org(&mut r);
        }
        let start_year = r.random_range(2001..=2015);
        let end_year = start_year + r.random_range(1..=9);
        facts.push(FactTuple {
            person,
            first_org,
            next_org,
            start_year,
            end_year,
        });
    }
    facts
}

/// `n` counterfactual edit instances, fully determined by `seed`.
pub fn synth_corpus(seed: u64, n: usize) -> Vec<EditInstance> {
    synth_facts(seed, n)
        .into_iter()
        .enumerate()
        .map(|(i, f)| EditInstance {
            id: format!("synth-{seed}-{i:05}"),
            edit_text: f.passage(),
            queries: f.queries(),
            metadata: Some(String::from("employment")),
        })
        .collect()
}
