//! Metric tables: per-run CSV rows, run summaries, seed medians and report matrices.
//!
//! `metrics.csv` columns (schema `csv1`):
//!
//! | column | meaning |
//! |--------|---------|
//! | `manifest_hash` | hash of the producing run |
//! | `step` | edits applied when evaluated, from 1 |
//! | `mode` | `efficacy` or `specificity` |
//! | `rank` | `R1`..`R4`, or `average` |
//! | `bleu` | mean sentence BLEU |
//! | `ppl` | mean per-token perplexity of the reference answers |
//! | `queries` | number of queries scored |

use std::collections::BTreeMap;
use std::path::Path;

use evoedit_core::corpus::Rank;
use evoedit_core::engine::StepRecord;
use evoedit_core::eval::{EvalReport, RankScore};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const AVERAGE: &str = "average";
pub const EFFICACY: &str = "efficacy";
pub const SPECIFICITY: &str = "specificity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub manifest_hash: String,
    pub step: usize,
    pub mode: String,
    pub rank: String,
    pub bleu: f64,
    pub ppl: Option<f64>,
    pub queries: usize,
}

fn push_report(rows: &mut Vec<MetricRow>, hash: &str, step: usize, mode: &str, report: &EvalReport) {
    let mut push = |rank: &str, s: RankScore| {
        rows.push(MetricRow {
            manifest_hash: hash.to_string(),
            step,
            mode: mode.to_string(),
            rank: rank.to_string(),
            bleu: s.bleu,
            ppl: s.ppl,
            queries: s.count,
        })
    };
    for r in Rank::ALL {
        if let Some(s) = report.rank(r) {
            push(r.label(), s);
        }
    }
    if let Some(s) = report.average {
        push(AVERAGE, s);
    }
}

/// Rows for every evaluation in `records`: efficacy first, then specificity, per step.
pub fn rows_for(hash: &str, records: &[StepRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for rec in records {
        if let Some(e) = &rec.efficacy {
            push_report(&mut rows, hash, rec.t, EFFICACY, e);
        }
        if let Some(s) = &rec.specificity {
            push_report(&mut rows, hash, rec.t, SPECIFICITY, s);
        }
    }
    rows
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Mean BLEU and perplexity per rank, over every evaluated step of one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub steps_evaluated: usize,
    pub bleu: BTreeMap<String, f64>,
    pub ppl: BTreeMap<String, f64>,
    /// Values at the last evaluated step.
    pub final_bleu: BTreeMap<String, f64>,
    pub final_ppl: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub manifest_hash: String,
    pub method: Option<String>,
    pub steps: usize,
    pub efficacy: Option<ModeSummary>,
    pub specificity: Option<ModeSummary>,
}

fn summarize_mode(rows: &[MetricRow], mode: &str) -> Option<ModeSummary> {
    let of_mode: Vec<&MetricRow> = rows.iter().filter(|r| r.mode == mode).collect();
    let last_step = of_mode.iter().map(|r| r.step).max()?;
    let mut steps: Vec<usize> = of_mode.iter().map(|r| r.step).collect();
    steps.dedup();
    let mut bleu: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut ppl: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut final_bleu = BTreeMap::new();
    let mut final_ppl = BTreeMap::new();
    for r in &of_mode {
        let b = bleu.entry(r.rank.clone()).or_default();
        b.0 += r.bleu;
        b.1 += 1;
        if let Some(p) = r.ppl {
            let e = ppl.entry(r.rank.clone()).or_default();
            e.0 += p;
            e.1 += 1;
        }
        if r.step == last_step {
            final_bleu.insert(r.rank.clone(), r.bleu);
            if let Some(p) = r.ppl {
                final_ppl.insert(r.rank.clone(), p);
            }
        }
    }
    let mean = |m: BTreeMap<String, (f64, usize)>| m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Some(ModeSummary {
        steps_evaluated: steps.len(),
        bleu: mean(bleu),
        ppl: mean(ppl),
        final_bleu,
        final_ppl,
    })
}

pub fn summarize(hash: &str, method: Option<String>, steps: usize, rows: &[MetricRow]) -> Summary {
    Summary {
        manifest_hash: hash.to_string(),
        method,
        steps,
        efficacy: summarize_mode(rows, EFFICACY),
        specificity: summarize_mode(rows, SPECIFICITY),
    }
}

/// Median over seeds of one `(step, mode, rank)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub sweep_hash: String,
    pub step: usize,
    pub mode: String,
    pub rank: String,
    pub bleu_median: f64,
    pub ppl_median: Option<f64>,
    pub runs: usize,
}

/// Median of a non-empty sample; mean of the middle pair for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn mode_order(mode: &str) -> u8 {
    u8::from(mode != EFFICACY)
}

fn rank_order(rank: &str) -> usize {
    Rank::ALL.iter().position(|r| r.label() == rank).unwrap_or(Rank::ALL.len())
}

pub fn median_rows(sweep_hash: &str, runs: &[Vec<MetricRow>]) -> Vec<MedianRow> {
    type Key = (usize, u8, usize, String, String);
    let mut cells: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rows in runs {
        for r in rows {
            let key = (r.step, mode_order(&r.mode), rank_order(&r.rank), r.mode.clone(), r.rank.clone());
            let cell = cells.entry(key).or_default();
            cell.0.push(r.bleu);
            if let Some(p) = r.ppl {
                cell.1.push(p);
            }
        }
    }
    cells
        .into_iter()
        .map(|((step, _, _, mode, rank), (mut b, mut p))| MedianRow {
            sweep_hash: sweep_hash.to_string(),
            step,
            mode,
            rank,
            runs: b.len(),
            bleu_median: median(&mut b),
            ppl_median: (p.len() == b.len()).then(|| median(&mut p)),
        })
        .collect()
}

/// One run's rows under a display label.
pub struct LabeledRun {
    pub label: String,
    pub rows: Vec<MetricRow>,
}

/// Per-step matrix: one row per `(step, mode)`, one BLEU column per run and rank.
pub fn matrix_csv(report_hash: &str, runs: &[LabeledRun]) -> String {
    let ranks: Vec<&str> = Rank::ALL.iter().map(|r| r.label()).chain([AVERAGE]).collect();
    let mut header = vec!["report_hash".to_string(), "step".into(), "mode".into()];
    for run in runs {
        header.extend(ranks.iter().map(|r| format!("{}:{r}", run.label)));
    }
    let mut keys: Vec<(usize, u8, String)> = runs
        .iter()
        .flat_map(|run| run.rows.iter().map(|r| (r.step, mode_order(&r.mode), r.mode.clone())))
        .collect();
    keys.sort();
    keys.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for (step, _, mode) in keys {
        let mut rec = vec![report_hash.to_string(), step.to_string(), mode.clone()];
        for run in runs {
            for rank in &ranks {
                let cell = run
                    .rows
                    .iter()
                    .find(|r| r.step == step && r.mode == mode && r.rank == *rank)
                    .map(|r| r.bleu.to_string())
                    .unwrap_or_default();
                rec.push(cell);
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Retention curve: average specificity BLEU on earlier edits, one column per run,
/// rows in increasing step order.
pub fn retention_csv(report_hash: &str, runs: &[LabeledRun]) -> String {
    let mut steps: Vec<usize> = runs
        .iter()
        .flat_map(|run| run.rows.iter().filter(|r| r.mode == SPECIFICITY).map(|r| r.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["report_hash".to_string(), "step".into()];
    header.extend(runs.iter().map(|r| r.label.clone()));
    w.write_record(&header).expect("in-memory write");
    for step in steps {
        let mut rec = vec![report_hash.to_string(), step.to_string()];
        for run in runs {
            rec.push(
                run.rows
                    .iter()
                    .find(|r| r.step == step && r.mode == SPECIFICITY && r.rank == AVERAGE)
                    .map(|r| r.bleu.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, mode: &str, rank: &str, bleu: f64) -> MetricRow {
        MetricRow {
            manifest_hash: "h".into(),
            step,
            mode: mode.into(),
            rank: rank.into(),
            bleu,
            ppl: Some(2.0),
            queries: 2,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn summary_means_over_steps() {
        let rows = vec![
            row(1, EFFICACY, AVERAGE, 0.2),
            row(2, EFFICACY, AVERAGE, 0.6),
            row(2, SPECIFICITY, AVERAGE, 0.1),
        ];
        let s = summarize("h", None, 2, &rows);
        let e = s.efficacy.unwrap();
        assert!((e.bleu[AVERAGE] - 0.4).abs() < 1e-15);
        assert_eq!(e.final_bleu[AVERAGE], 0.6);
        assert_eq!(e.steps_evaluated, 2);
        assert_eq!(s.specificity.unwrap().final_bleu[AVERAGE], 0.1);
    }

    #[test]
    fn median_rows_group_cells() {
        let a = vec![row(1, EFFICACY, "R1", 0.0), row(1, SPECIFICITY, "R1", 1.0)];
        let b = vec![row(1, EFFICACY, "R1", 1.0), row(1, SPECIFICITY, "R1", 1.0)];
        let c = vec![row(1, EFFICACY, "R1", 0.5), row(1, SPECIFICITY, "R1", 0.0)];
        let m = median_rows("s", &[a, b, c]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].mode, EFFICACY);
        assert_eq!(m[0].bleu_median, 0.5);
        assert_eq!(m[1].bleu_median, 1.0);
        assert_eq!(m[0].runs, 3);
    }

    #[test]
    fn csv_round_trip_keeps_empty_ppl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rows = vec![row(1, EFFICACY, "R1", 0.25)];
        rows[0].ppl = None;
        rows.push(row(2, SPECIFICITY, AVERAGE, 1.0 / 3.0));
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows::<MetricRow>(&path).unwrap(), rows);
    }
}
