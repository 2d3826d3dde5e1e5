use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evoedit::config::RunConfig;
use evoedit::error::{exit_code, CliError, Result};
use evoedit::{data, runner};
use evoedit_core::corpus;
use evoedit_core::engine::Method;

#[derive(Parser)]
#[command(name = "evoedit", version, about = "Lifelong free-text knowledge editing on a small transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `seeds.run`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds.run = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the tokenizer and base model on true-fact text.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write a synthetic counterfactual edit corpus as JSONL.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short, default_value_t = 50)]
        n: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run one edit stream against a pretrained base.
    Edit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `pretrain`.
        #[arg(long)]
        base: PathBuf,
        /// JSONL corpus; a synthetic stream from `seeds.run` when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// evoedit, ft, no_lpa, no_kpf or dpf.
        #[arg(long, default_value = "evoedit")]
        method: Method,
        #[arg(long, short)]
        out: PathBuf,
        /// Continue from the state checkpoint in `out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many edits in total, leaving a checkpoint for `--resume`.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score the unedited base on a stream.
    PreEdit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Repeat an edit run over several seeds and take per-step medians.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "evoedit")]
        method: Method,
        /// Comma separated run seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Build the method-by-rank matrix and retention curves from finished runs.
    Report {
        /// Run directories, or directories containing runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { cfg, out } => {
            let o = runner::pretrain(&cfg.load()?, &out)?;
            println!(
                "pretrained {} steps, final loss {:.4}, manifest {}",
                o.losses.len(),
                o.losses.last().copied().unwrap_or(f64::NAN),
                o.manifest.hash
            );
        }
        Command::Synth { seed, n, out } => {
            data::save_jsonl(&out, &corpus::synth_corpus(seed, n))?;
            println!("wrote {n} instances to {}", out.display());
        }
        Command::Edit {
            cfg,
            base,
            corpus,
            method,
            out,
            resume,
            stop_after,
        } => {
            let o = runner::edit(&runner::EditOptions {
                config: cfg.load()?,
                base_dir: base,
                corpus,
                method,
                out,
                resume,
                stop_after,
            })?;
            print_summary(&o.summary)?;
        }
        Command::PreEdit { cfg, base, corpus, out } => {
            let o = runner::pre_editing(&cfg.load()?, &base, corpus.as_deref(), &out)?;
            print_summary(&o.summary)?;
        }
        Command::Sweep {
            cfg,
            base,
            corpus,
            method,
            seeds,
            out,
        } => {
            let o = runner::sweep(
                &runner::EditOptions {
                    config: cfg.load()?,
                    base_dir: base,
                    corpus,
                    method,
                    out: out.clone(),
                    resume: false,
                    stop_after: None,
                },
                &seeds,
            )?;
            println!(
                "{} runs, medians in {}, manifest {}",
                o.runs.len(),
                out.join(runner::MEDIAN_FILE).display(),
                o.manifest.hash
            );
        }
        Command::Report { runs, out } => {
            let m = runner::report(&runs, &out)?;
            println!("{} runs reported in {}", m.provenance.members.len(), out.display());
        }
    }
    Ok(())
}

fn print_summary(summary: &evoedit::metrics::Summary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit_code::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
