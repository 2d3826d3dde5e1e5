//! Command-level behavior on a tiny configuration: file outputs, resume, sweeps,
//! reports and process exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use evoedit::checkpoint;
use evoedit::config::RunConfig;
use evoedit::data;
use evoedit::manifest::Manifest;
use evoedit::metrics::{self, MedianRow, MetricRow, AVERAGE, EFFICACY, SPECIFICITY};
use evoedit::runner::{self, EditOptions};
use evoedit_core::corpus::{synth_corpus, Rank};
use evoedit_core::engine::Method;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.dim = 16;
    cfg.model.n_heads = 2;
    cfg.model.mlp_hidden = 32;
    cfg.model.max_seq_len = 64;
    cfg.tokenizer.vocab_size = 320;
    cfg.tokenizer.extra_edit_texts = 16;
    cfg.pretrain.steps = 40;
    cfg.pretrain.batch_size = 4;
    cfg.engine.epochs_per_edit = 3;
    cfg.corpus.n_edits = 4;
    cfg.eval.coeff = 1.0;
    cfg.eval.max_new = 6;
    cfg
}

struct Shared {
    _root: tempfile::TempDir,
    base: PathBuf,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let base = root.path().join("base");
        runner::pretrain(&tiny_config(), &base).unwrap();
        Shared { _root: root, base }
    })
}

fn options(out: &Path, method: Method) -> EditOptions {
    EditOptions {
        config: tiny_config(),
        base_dir: shared().base.clone(),
        corpus: None,
        method,
        out: out.to_path_buf(),
        resume: false,
        stop_after: None,
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn pretraining_is_reproducible_and_learns() {
    let dir = tempfile::tempdir().unwrap();
    let a = runner::pretrain(&tiny_config(), &dir.path().join("a")).unwrap();
    let b = runner::pretrain(&tiny_config(), &dir.path().join("b")).unwrap();
    let (pa, _) = checkpoint::load(&dir.path().join("a").join(runner::BASE_FILE)).unwrap();
    let (pb, _) = checkpoint::load(&dir.path().join("b").join(runner::BASE_FILE)).unwrap();
    assert_eq!(checkpoint::params_hash(&pa), checkpoint::params_hash(&pb));
    assert_eq!(a.manifest.hash, b.manifest.hash);
    assert!(a.losses.last().unwrap() < a.losses.first().unwrap());
    for f in [runner::TOKENIZER_FILE, runner::PRETRAIN_LOSS_FILE, runner::MANIFEST_FILE] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn edit_run_writes_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = runner::edit(&options(dir.path(), Method::EvoEdit)).unwrap();
    assert_eq!(out.records.len(), 4);
    for f in [
        runner::METRICS_FILE,
        runner::STEPS_FILE,
        runner::LEDGER_FILE,
        runner::SUMMARY_FILE,
        runner::FINAL_FILE,
        runner::MANIFEST_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest = Manifest::load(&dir.path().join(runner::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.hash, out.manifest.hash);
    let rows: Vec<MetricRow> = metrics::read_rows(&dir.path().join(runner::METRICS_FILE)).unwrap();
    assert_eq!(rows, out.rows);
    assert!(rows.iter().all(|r| r.manifest_hash == manifest.hash));

    // Summary averages are the means of the per-step rows.
    let eff = out.summary.efficacy.as_ref().unwrap();
    let steps: Vec<f64> = rows
        .iter()
        .filter(|r| r.mode == EFFICACY && r.rank == AVERAGE)
        .map(|r| r.bleu)
        .collect();
    assert_eq!(steps.len(), 4);
    let mean = steps.iter().sum::<f64>() / steps.len() as f64;
    assert!((eff.bleu[AVERAGE] - mean).abs() < 1e-12);
    assert_eq!(eff.final_bleu[AVERAGE], *steps.last().unwrap());
    for step in 1..=4 {
        let at: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| r.step == step && r.mode == EFFICACY && r.rank != AVERAGE)
            .collect();
        let avg = rows
            .iter()
            .find(|r| r.step == step && r.mode == EFFICACY && r.rank == AVERAGE)
            .unwrap();
        let mean = at.iter().map(|r| r.bleu).sum::<f64>() / 4.0;
        assert!((avg.bleu - mean).abs() < 1e-12);
    }
    assert!(!rows.iter().any(|r| r.step == 1 && r.mode == SPECIFICITY));

    // 14 components scored at every step.
    let ledger = fs::read_to_string(dir.path().join(runner::LEDGER_FILE)).unwrap();
    assert_eq!(ledger.lines().count(), 1 + 4 * 14);

    // Running the same configuration again reproduces every CSV.
    let again = tempfile::tempdir().unwrap();
    runner::edit(&options(again.path(), Method::EvoEdit)).unwrap();
    for f in [runner::METRICS_FILE, runner::LEDGER_FILE, runner::SUMMARY_FILE] {
        assert_eq!(read(&dir.path().join(f)), read(&again.path().join(f)), "{f}");
    }
}

#[test]
fn ft_matches_flagged_evoedit() {
    let dir = tempfile::tempdir().unwrap();
    let ft = runner::edit(&options(&dir.path().join("ft"), Method::Ft)).unwrap();
    let mut flagged = options(&dir.path().join("flagged"), Method::EvoEdit);
    flagged.config.engine.disable_lpa = true;
    flagged.config.engine.disable_kpf = true;
    let ev = runner::edit(&flagged).unwrap();
    assert_eq!(ft.manifest.hash, ev.manifest.hash);
    for f in [runner::METRICS_FILE, runner::LEDGER_FILE] {
        assert_eq!(read(&dir.path().join("ft").join(f)), read(&dir.path().join("flagged").join(f)));
    }
    assert_ne!(ft.manifest.method, ev.manifest.method);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let part_dir = dir.path().join("part");
    let full = runner::edit(&options(&full_dir, Method::EvoEdit)).unwrap();

    let mut first = options(&part_dir, Method::EvoEdit);
    first.stop_after = Some(2);
    let partial = runner::edit(&first).unwrap();
    assert_eq!(partial.records.len(), 2);
    assert!(!part_dir.join(runner::METRICS_FILE).exists());
    let (_, meta) = checkpoint::load(&part_dir.join(runner::STATE_FILE)).unwrap();
    assert_eq!(meta["edits_applied"], 2);

    let mut rest = options(&part_dir, Method::EvoEdit);
    rest.resume = true;
    let resumed = runner::edit(&rest).unwrap();
    assert_eq!(resumed.records, full.records);
    assert!(resumed.final_params.bit_eq(&full.final_params));
    for f in [runner::METRICS_FILE, runner::LEDGER_FILE, runner::SUMMARY_FILE] {
        assert_eq!(read(&full_dir.join(f)), read(&part_dir.join(f)), "{f}");
    }

    // A checkpoint from a different configuration is refused.
    let mut other = options(&part_dir, Method::Ft);
    other.resume = true;
    fs::copy(full_dir.join(runner::FINAL_FILE), part_dir.join(runner::STATE_FILE)).unwrap();
    let err = runner::edit(&other).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn sweep_runs_each_seed_and_takes_medians() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = [10, 11, 12, 13, 14];
    let out = runner::sweep(&options(dir.path(), Method::EvoEdit), &seeds).unwrap();
    assert_eq!(out.runs.len(), 5);
    let hashes: std::collections::BTreeSet<_> = out.runs.iter().map(|r| r.manifest.hash.clone()).collect();
    assert_eq!(hashes.len(), 5);
    for (run, seed) in out.runs.iter().zip(seeds) {
        assert_eq!(run.manifest.provenance.seeds.run, seed);
        assert!(dir.path().join(format!("seed-{seed}")).join(runner::METRICS_FILE).is_file());
    }
    let medians: Vec<MedianRow> = metrics::read_rows(&dir.path().join(runner::MEDIAN_FILE)).unwrap();
    assert_eq!(medians, out.medians);
    let m = medians
        .iter()
        .find(|r| r.step == 4 && r.mode == EFFICACY && r.rank == AVERAGE)
        .unwrap();
    let mut finals: Vec<f64> = out
        .runs
        .iter()
        .map(|r| r.summary.efficacy.as_ref().unwrap().final_bleu[AVERAGE])
        .collect();
    assert_eq!(m.bleu_median, metrics::median(&mut finals));
    assert_eq!(m.runs, 5);
    let sweep = Manifest::load(&dir.path().join(runner::MANIFEST_FILE)).unwrap();
    assert_eq!(sweep.provenance.members.len(), 5);
}

#[test]
fn reports_put_methods_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("runs").join("evoedit");
    let ft = dir.path().join("runs").join("ft");
    runner::edit(&options(&ev, Method::EvoEdit)).unwrap();
    runner::edit(&options(&ft, Method::Ft)).unwrap();

    let single = dir.path().join("single");
    runner::report(std::slice::from_ref(&ev), &single).unwrap();
    let matrix = fs::read_to_string(single.join(runner::MATRIX_FILE)).unwrap();
    let header = matrix.lines().next().unwrap();
    for r in Rank::ALL {
        assert!(header.contains(&format!("evoedit:{}", r.label())), "{header}");
    }

    let both = dir.path().join("both");
    runner::report(&[dir.path().join("runs")], &both).unwrap();
    let header = fs::read_to_string(both.join(runner::MATRIX_FILE)).unwrap();
    let header = header.lines().next().unwrap().to_string();
    assert!(header.contains("evoedit:R1") && header.contains("ft:R1"), "{header}");
    let retention = fs::read_to_string(both.join(runner::RETENTION_FILE)).unwrap();
    let mut lines = retention.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("evoedit") && header.contains("ft"), "{header}");
    let steps: Vec<usize> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(!steps.is_empty());
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");

    assert!(runner::report(&[dir.path().join("nothing-here")], &both).is_err());
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evoedit"));
    c.env("RUST_LOG", "error");
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

#[test]
fn exit_codes_separate_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let base = shared().base.clone();
    let cfg_path = write_config(dir.path(), &tiny_config());

    let status = |args: &[&str]| bin().args(args).output().unwrap().status.code().unwrap();
    let ok = status(&[
        "edit",
        "-c",
        cfg_path.to_str().unwrap(),
        "--base",
        base.to_str().unwrap(),
        "-o",
        dir.path().join("ok").to_str().unwrap(),
    ]);
    assert_eq!(ok, 0);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[engine]\nno_such_key = 1\n").unwrap();
    let config = status(&["edit", "-c", bad.to_str().unwrap(), "--base", base.to_str().unwrap(), "-o", "x"]);
    assert_eq!(config, 3);

    let mut wrong_vocab = tiny_config();
    wrong_vocab.model.vocab_size = Some(999);
    let wv = dir.path().join("wv");
    fs::create_dir_all(&wv).unwrap();
    let wv_path = write_config(&wv, &wrong_vocab);
    assert_eq!(
        status(&["edit", "-c", wv_path.to_str().unwrap(), "--base", base.to_str().unwrap(), "-o", "x"]),
        3
    );

    let mut corpus = synth_corpus(1, 2);
    corpus[1].queries.retain(|q| q.rank != Rank::R3Constrained);
    let jsonl = dir.path().join("broken.jsonl");
    data::save_jsonl(&jsonl, &corpus).unwrap();
    let out = bin()
        .args(["edit", "-c", cfg_path.to_str().unwrap(), "--base", base.to_str().unwrap()])
        .args(["--corpus", jsonl.to_str().unwrap(), "-o", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&corpus[1].id) && stderr.contains("R3"), "{stderr}");

    let mut explode = tiny_config();
    explode.engine.optimizer = evoedit::config::OptimizerName::Sgd;
    explode.engine.lr = 1e300;
    let ex = dir.path().join("ex");
    fs::create_dir_all(&ex).unwrap();
    let ex_path = write_config(&ex, &explode);
    assert_eq!(
        status(&[
            "edit",
            "-c",
            ex_path.to_str().unwrap(),
            "--base",
            base.to_str().unwrap(),
            "-o",
            ex.join("out").to_str().unwrap()
        ]),
        5
    );

    assert_eq!(status(&["no-such-command"]), 2);
}

#[test]
fn synth_command_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let out = bin()
        .args(["synth", "--seed", "3", "-n", "7", "-o", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(data::load_jsonl(&path).unwrap(), synth_corpus(3, 7));
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(data::load_jsonl(&empty).unwrap().is_empty());
}
