//! Commands as library functions, so tests drive exactly what the binary runs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use evoedit_core::corpus::{self, EditInstance};
use evoedit_core::engine::{
    edit_tokens, evaluate_step, pretrain as core_pretrain, run_instances_until, EditState, Method, StepRecord,
};
use evoedit_core::model::{ModelParams, TokenId};
use evoedit_core::tokenizer::{Tokenizer, TokenizerMode};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data;
use crate::error::{CliError, Result};
use crate::manifest::{Manifest, Provenance, RunKind};
use crate::metrics::{self, LabeledRun, MetricRow};

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const BASE_FILE: &str = "base.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATE_FILE: &str = "state.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const PRETRAIN_LOSS_FILE: &str = "pretrain_loss.csv";
pub const MEDIAN_FILE: &str = "median.csv";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const RETENTION_FILE: &str = "retention.csv";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    fs::write(path, text).map_err(CliError::io(path))
}

/// Texts the tokenizer is trained on: every pretraining text plus counterfactual edit
/// texts from a dedicated synthetic draw.
pub fn tokenizer_corpus(cfg: &RunConfig) -> Vec<String> {
    let mut texts = corpus::pretraining_texts();
    if cfg.tokenizer.extra_edit_texts > 0 {
        texts.extend(
            corpus::synth_corpus(cfg.seeds.base ^ 0x746f_6b65_6e69_7a65, cfg.tokenizer.extra_edit_texts)
                .into_iter()
                .map(|i| i.edit_text),
        );
    }
    texts
}

pub fn build_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    Ok(match cfg.tokenizer.mode {
        TokenizerMode::Byte => Tokenizer::byte_level(),
        TokenizerMode::Bpe => Tokenizer::train_bpe(&tokenizer_corpus(cfg), cfg.tokenizer.vocab_size)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LossRow {
    manifest_hash: String,
    step: usize,
    loss: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub manifest: Manifest,
    pub params: ModelParams,
    pub tokenizer: Tokenizer,
    pub losses: Vec<f64>,
}

/// Trains the base model on true-fact text and writes tokenizer, checkpoint, loss curve
/// and manifest into `out`.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    let tokenizer = build_tokenizer(cfg)?;
    let model_cfg = cfg.model_config(tokenizer.vocab_size())?;
    let mut params = ModelParams::init(&model_cfg)?;
    let mut docs: Vec<Vec<TokenId>> = Vec::new();
    for text in corpus::pretraining_texts() {
        let (tokens, warning) = edit_tokens(&tokenizer, &text, model_cfg.max_seq_len)?;
        if let Some(w) = warning {
            log::warn!("pretraining text: {w}");
        }
        docs.push(tokens);
    }
    let pcfg = cfg.pretrain_config();
    let started = Instant::now();
    let report = core_pretrain(&mut params, &docs, &pcfg, |step, loss| {
        if step % 100 == 0 {
            log::info!("pretrain step {step} loss {loss:.4} ({:.1?})", started.elapsed());
        }
    })
    .map_err(|e| match e {
        evoedit_core::Error::Divergence(m) => CliError::Divergence(format!("pretraining: {m}")),
        other => other.into(),
    })?;

    let tok_path = out.join(TOKENIZER_FILE);
    data::save_tokenizer(&tok_path, &tokenizer)?;
    let mut prov = Provenance::new(RunKind::Pretrain, cfg.seeds.clone());
    prov.model = Some(model_cfg);
    prov.tokenizer = Some(cfg.tokenizer.clone());
    prov.pretrain = Some(pcfg);
    prov.corpus_hash = Some(data::sha256_hex(corpus::pretraining_texts().join("\n").as_bytes()));
    prov.tokenizer_hash = Some(data::sha256_hex(&fs::read(&tok_path).map_err(CliError::io(&tok_path))?));
    let mut manifest = Manifest::new(prov, None, cfg.clone());

    let meta = serde_json::json!({
        "kind": "base",
        "manifest_hash": manifest.hash,
        "steps_run": report.steps_run,
    });
    checkpoint::save(&out.join(BASE_FILE), &params, &meta)?;
    let rows: Vec<LossRow> = report
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow {
            manifest_hash: manifest.hash.clone(),
            step: i + 1,
            loss,
        })
        .collect();
    metrics::write_rows(&out.join(PRETRAIN_LOSS_FILE), &rows)?;
    manifest.outputs = [TOKENIZER_FILE, BASE_FILE, PRETRAIN_LOSS_FILE]
        .iter()
        .map(|f| f.to_string())
        .collect();
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(PretrainOutcome {
        manifest,
        params,
        tokenizer,
        losses: report.losses,
    })
}

/// A pretrained base: tokenizer, parameters and the hashes identifying them.
pub struct Base {
    pub tokenizer: Tokenizer,
    pub params: ModelParams,
    pub tokenizer_hash: String,
    pub params_hash: String,
}

impl Base {
    pub fn load(dir: &Path) -> Result<Self> {
        let tok_path = dir.join(TOKENIZER_FILE);
        let tokenizer = data::load_tokenizer(&tok_path)?;
        let tokenizer_hash = data::sha256_hex(&fs::read(&tok_path).map_err(CliError::io(&tok_path))?);
        let (params, _) = checkpoint::load(&dir.join(BASE_FILE))?;
        if params.config.vocab_size != tokenizer.vocab_size() {
            return Err(CliError::Config(format!(
                "checkpoint vocabulary {} does not match tokenizer vocabulary {}",
                params.config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(Self {
            params_hash: checkpoint::params_hash(&params),
            tokenizer,
            params,
            tokenizer_hash,
        })
    }

    /// Checks that the config describes this base's architecture.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        let wanted = evoedit_core::model::ModelConfig {
            seed: self.params.config.seed,
            ..cfg.model_config(self.tokenizer.vocab_size())?
        };
        if wanted != self.params.config {
            return Err(CliError::Config(format!(
                "config model {wanted:?} does not match checkpoint {:?}",
                self.params.config
            )));
        }
        Ok(())
    }
}

/// Edit stream from a JSONL file, or the synthetic stream the config describes.
pub fn load_stream(cfg: &RunConfig, corpus: Option<&Path>) -> Result<Vec<EditInstance>> {
    let instances = match corpus {
        Some(path) => data::load_jsonl(path)?,
        None => corpus::synth_corpus(cfg.seeds.run, cfg.corpus.n_edits),
    };
    if instances.is_empty() {
        return Err(CliError::Data("edit stream is empty".into()));
    }
    Ok(instances)
}

#[derive(Clone, Debug)]
pub struct EditOptions {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub method: Method,
    pub out: PathBuf,
    pub resume: bool,
    /// Stop once this many edits have been applied, leaving a state checkpoint to
    /// resume from. Final outputs are only written when the stream is finished.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub records: Vec<StepRecord>,
    pub rows: Vec<MetricRow>,
    pub summary: metrics::Summary,
    pub final_params: ModelParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StepLine {
    manifest_hash: String,
    elapsed_ms: u128,
    record: StepRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LedgerRow {
    manifest_hash: String,
    step: usize,
    component: String,
    layer: usize,
    kind: String,
    score: f64,
    selected: bool,
}

fn ledger_rows(hash: &str, records: &[StepRecord]) -> Vec<LedgerRow> {
    let mut rows = Vec::new();
    for rec in records {
        for (id, score) in &rec.log.scores {
            rows.push(LedgerRow {
                manifest_hash: hash.to_string(),
                step: rec.t,
                component: id.to_string(),
                layer: id.layer,
                kind: id.kind.name().to_string(),
                score: *score,
                selected: rec.log.selected.contains(id),
            });
        }
    }
    rows
}

fn read_step_lines(path: &Path, hash: &str, upto: usize) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StepLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if parsed.manifest_hash != hash {
            return Err(CliError::Config(format!(
                "{} belongs to a different run configuration",
                path.display()
            )));
        }
        if parsed.record.t <= upto {
            out.push(parsed.record);
        }
    }
    if out.len() != upto {
        return Err(CliError::Data(format!(
            "{} holds {} steps, checkpoint expects {upto}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

fn rewrite_step_lines(path: &Path, hash: &str, records: &[StepRecord]) -> Result<()> {
    let mut f = File::create(path).map_err(CliError::io(path))?;
    for r in records {
        let line = StepLine {
            manifest_hash: hash.to_string(),
            elapsed_ms: 0,
            record: r.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&line).expect("serializes")).map_err(CliError::io(path))?;
    }
    Ok(())
}

/// Runs one edit stream and writes metrics, step log, importance ledger, summary,
/// checkpoints and manifest into `opts.out`.
pub fn edit(opts: &EditOptions) -> Result<RunOutcome> {
    let cfg = &opts.config;
    cfg.validate()?;
    let base = Base::load(&opts.base_dir)?;
    base.check_config(cfg)?;
    let stream = load_stream(cfg, opts.corpus.as_deref())?;
    let engine = opts.method.configure(&cfg.edit_config());
    let eval = cfg.eval_settings();

    let mut prov = Provenance::new(RunKind::Edit, cfg.seeds.clone());
    prov.model = Some(base.params.config.clone());
    prov.tokenizer = Some(cfg.tokenizer.clone());
    prov.engine = Some(engine.clone());
    prov.eval = Some(eval.clone());
    prov.corpus_hash = Some(data::corpus_hash(&stream));
    prov.tokenizer_hash = Some(base.tokenizer_hash.clone());
    prov.base_hash = Some(base.params_hash.clone());
    let mut manifest = Manifest::new(prov, Some(opts.method.name().to_string()), cfg.clone());
    let hash = manifest.hash.clone();

    create_dir(&opts.out)?;
    let steps_path = opts.out.join(STEPS_FILE);
    let state_path = opts.out.join(STATE_FILE);
    let (mut state, mut records) = if opts.resume && state_path.exists() {
        let (current, meta) = checkpoint::load(&state_path)?;
        if meta["manifest_hash"] != hash.as_str() {
            return Err(CliError::Config(format!(
                "{} was written by a different run configuration",
                state_path.display()
            )));
        }
        let done = meta["edits_applied"]
            .as_u64()
            .ok_or_else(|| CliError::Data(format!("{}: missing edits_applied", state_path.display())))?
            as usize;
        let records = read_step_lines(&steps_path, &hash, done)?;
        rewrite_step_lines(&steps_path, &hash, &records)?;
        log::info!("resuming after {done} edits");
        (EditState::resume(base.params.clone(), current, done, engine)?, records)
    } else {
        File::create(&steps_path).map_err(CliError::io(&steps_path))?;
        (EditState::new(base.params.clone(), engine)?, Vec::new())
    };
    if state.edits_applied() >= stream.len() {
        return Err(CliError::Data("checkpoint already covers the whole stream".into()));
    }

    let mut steps_file = OpenOptions::new()
        .append(true)
        .open(&steps_path)
        .map_err(CliError::io(&steps_path))?;
    let every = cfg.output.checkpoint_every;
    let mut last = Instant::now();
    let end = opts.stop_after.unwrap_or(stream.len()).min(stream.len());
    let new_records = run_instances_until(&mut state, &base.tokenizer, &stream, &eval, end, |st, rec| {
        let elapsed_ms = last.elapsed().as_millis();
        last = Instant::now();
        for w in &rec.warnings {
            log::warn!("edit {}: {w}", rec.t);
        }
        if let Some(e) = rec.efficacy.as_ref().and_then(|r| r.average) {
            log::info!("edit {} loss {:.4} efficacy {:.4}", rec.t, rec.log.final_loss, e.bleu);
        }
        let line = StepLine {
            manifest_hash: hash.clone(),
            elapsed_ms,
            record: rec.clone(),
        };
        writeln!(steps_file, "{}", serde_json::to_string(&line).expect("serializes"))
            .map_err(|e| evoedit_core::Error::Contract(format!("writing step log: {e}")))?;
        if every > 0 && rec.t % every == 0 {
            let meta = serde_json::json!({"manifest_hash": hash, "edits_applied": st.edits_applied()});
            checkpoint::save(&state_path, st.current(), &meta)
                .map_err(|e| evoedit_core::Error::Contract(format!("writing checkpoint: {e}")))?;
        }
        Ok(())
    })?;
    records.extend(new_records);

    let rows = metrics::rows_for(&hash, &records);
    if state.edits_applied() < stream.len() {
        let meta = serde_json::json!({"manifest_hash": hash, "edits_applied": state.edits_applied()});
        checkpoint::save(&state_path, state.current(), &meta)?;
        log::info!("stopped after {} of {} edits", state.edits_applied(), stream.len());
        let summary = metrics::summarize(&hash, manifest.method.clone(), records.len(), &rows);
        return Ok(RunOutcome {
            manifest,
            records,
            rows,
            summary,
            final_params: state.current().clone(),
        });
    }
    metrics::write_rows(&opts.out.join(METRICS_FILE), &rows)?;
    metrics::write_rows(&opts.out.join(LEDGER_FILE), &ledger_rows(&hash, &records))?;
    let summary = metrics::summarize(&hash, manifest.method.clone(), records.len(), &rows);
    write_json(&opts.out.join(SUMMARY_FILE), &summary)?;
    let meta = serde_json::json!({"manifest_hash": hash, "edits_applied": state.edits_applied()});
    checkpoint::save(&opts.out.join(FINAL_FILE), state.current(), &meta)?;
    manifest.outputs = [METRICS_FILE, STEPS_FILE, LEDGER_FILE, SUMMARY_FILE, FINAL_FILE]
        .iter()
        .map(|f| f.to_string())
        .collect();
    manifest.save(&opts.out.join(MANIFEST_FILE))?;
    Ok(RunOutcome {
        manifest,
        records,
        rows,
        summary,
        final_params: state.current().clone(),
    })
}

/// Scores the unedited base on the stream exactly as an edit run would score its model
/// after each step: the lower-bound baseline.
pub fn pre_editing(cfg: &RunConfig, base_dir: &Path, corpus: Option<&Path>, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let base = Base::load(base_dir)?;
    base.check_config(cfg)?;
    let stream = load_stream(cfg, corpus)?;
    let eval = cfg.eval_settings();
    eval.validate()?;
    let mut prov = Provenance::new(RunKind::PreEditing, cfg.seeds.clone());
    prov.model = Some(base.params.config.clone());
    prov.eval = Some(eval.clone());
    prov.corpus_hash = Some(data::corpus_hash(&stream));
    prov.tokenizer_hash = Some(base.tokenizer_hash.clone());
    prov.base_hash = Some(base.params_hash.clone());
    let mut manifest = Manifest::new(prov, Some("pre_editing".into()), cfg.clone());
    let mut records = Vec::new();
    for t in 1..=stream.len() {
        if t % eval.every != 0 && t != stream.len() {
            continue;
        }
        let (efficacy, specificity) = evaluate_step(&base.params, &base.tokenizer, &stream, t, &eval)?;
        records.push(StepRecord {
            t,
            instance_id: stream[t - 1].id.clone(),
            log: evoedit_core::engine::EditLog {
                index: t - 1,
                token_count: 0,
                losses: Vec::new(),
                final_loss: f64::NAN,
                selected: Vec::new(),
                scores: Vec::new(),
            },
            warnings: Vec::new(),
            efficacy: Some(efficacy),
            specificity,
        });
    }
    create_dir(out)?;
    let rows = metrics::rows_for(&manifest.hash, &records);
    metrics::write_rows(&out.join(METRICS_FILE), &rows)?;
    let summary = metrics::summarize(&manifest.hash, manifest.method.clone(), stream.len(), &rows);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    manifest.outputs = [METRICS_FILE, SUMMARY_FILE]
        .iter()
        .map(|f| f.to_string())
        .collect();
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(RunOutcome {
        manifest,
        records,
        rows,
        summary,
        final_params: base.params,
    })
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub manifest: Manifest,
    pub runs: Vec<RunOutcome>,
    pub medians: Vec<metrics::MedianRow>,
}

/// One edit run per seed under `out/seed-<s>`, plus a median table over seeds.
pub fn sweep(opts: &EditOptions, seeds: &[u64]) -> Result<SweepOutcome> {
    if seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut o = opts.clone();
        o.config.seeds.run = seed;
        o.out = opts.out.join(format!("seed-{seed}"));
        log::info!("sweep: {} seed {seed}", opts.method);
        runs.push(edit(&o)?);
    }
    let mut prov = Provenance::new(RunKind::Sweep, opts.config.seeds.clone());
    prov.members = runs.iter().map(|r| r.manifest.hash.clone()).collect();
    let mut manifest = Manifest::new(prov, Some(opts.method.name().to_string()), opts.config.clone());
    let all: Vec<Vec<MetricRow>> = runs.iter().map(|r| r.rows.clone()).collect();
    let medians = metrics::median_rows(&manifest.hash, &all);
    metrics::write_rows(&opts.out.join(MEDIAN_FILE), &medians)?;
    manifest.outputs = vec![MEDIAN_FILE.to_string()];
    manifest.save(&opts.out.join(MANIFEST_FILE))?;
    Ok(SweepOutcome {
        manifest,
        runs,
        medians,
    })
}

/// Finds run directories: each path is a run itself (it has metrics) or a directory
/// whose immediate subdirectories are runs.
pub fn find_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(METRICS_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(CliError::io(p))?;
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|s| s.join(METRICS_FILE).is_file())
            .collect();
        subs.sort();
        out.extend(subs);
    }
    if out.is_empty() {
        return Err(CliError::Data("no completed runs found".into()));
    }
    Ok(out)
}

/// Writes `matrix.csv` and `retention.csv` for the given runs.
pub fn report(paths: &[PathBuf], out: &Path) -> Result<Manifest> {
    let dirs = find_runs(paths)?;
    let mut loaded = Vec::new();
    for d in &dirs {
        let m = Manifest::load(&d.join(MANIFEST_FILE))?;
        let rows: Vec<MetricRow> = metrics::read_rows(&d.join(METRICS_FILE))?;
        loaded.push((m, rows));
    }
    let label_of = |m: &Manifest| m.method.clone().unwrap_or_else(|| "run".into());
    let mut runs = Vec::new();
    for (m, rows) in &loaded {
        let base = label_of(m);
        let clash = loaded.iter().filter(|(o, _)| label_of(o) == base).count() > 1;
        let label = if clash {
            format!("{base}@seed{}", m.provenance.seeds.run)
        } else {
            base
        };
        runs.push(LabeledRun {
            label,
            rows: rows.clone(),
        });
    }
    let mut prov = Provenance::new(RunKind::Report, Default::default());
    prov.members = loaded.iter().map(|(m, _)| m.hash.clone()).collect();
    let mut manifest = Manifest::new(prov, None, RunConfig::default());
    create_dir(out)?;
    let matrix = out.join(MATRIX_FILE);
    fs::write(&matrix, metrics::matrix_csv(&manifest.hash, &runs)).map_err(CliError::io(&matrix))?;
    let retention = out.join(RETENTION_FILE);
    fs::write(&retention, metrics::retention_csv(&manifest.hash, &runs)).map_err(CliError::io(&retention))?;
    manifest.outputs = vec![MATRIX_FILE.to_string(), RETENTION_FILE.to_string()];
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
