//! Command-line entry point: one binary, six subcommands, one config file.
//!
//! Exit codes: 0 success, 1 usage or I/O failure, 2 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eeg2text_cn::bleu::CorpusMode;
use eeg2text_cn::config::{resolve_config, ExperimentConfig};
use eeg2text_cn::pipeline;
use eeg2text_cn::Result;

#[derive(Parser)]
#[command(
    name = "eeg2text-cn",
    version,
    about = "EEG-to-Chinese-text pipeline: synthesize, prepare, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every stage.
#[derive(Args)]
struct StageArgs {
    /// Experiment config file (.toml or .json); defaults apply when omitted.
    #[arg(long, value_name = "FILE", global = false)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Redirect this stage's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Force single-threaded numerics (results are identical either way).
    #[arg(long)]
    deterministic: bool,
}

impl StageArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = resolve_config(self.config.as_deref(), &self.set)?;
        if self.deterministic {
            cfg.force_sequential();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusModeArg {
    Mean,
    Micro,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Shorthand for --set synth.seed=N.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Shorthand for --set synth.n_sentences=N.
    #[arg(long, value_name = "N")]
    n: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Shorthand for --set train.epochs=N.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

#[derive(Args)]
struct BleuArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Predictions JSONL file with one {id, gt, pred} object per line.
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Disable smoothing: any zero n-gram precision zeroes the score.
    #[arg(long)]
    raw: bool,
    /// Corpus aggregation: sentence mean or micro-averaged counts.
    #[arg(long, value_name = "MODE")]
    corpus_mode: Option<CorpusModeArg>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Segment, PCA-compress, split, and build the vocabulary.
    Prepare(StageArgs),
    /// Train the encoder-decoder with teacher forcing.
    Train(TrainArgs),
    /// Greedy-decode a split and write predictions + BLEU reports.
    Evaluate(StageArgs),
    /// Train the encoder-only per-position classifier variant.
    Ablate(StageArgs),
    /// Score an existing predictions file.
    Bleu(BleuArgs),
}

fn print_report(report: &eeg2text_cn::bleu::BleuReport) {
    print!("{}", report.to_table());
    println!(
        "mean over {} sentences: BLEU-1 {:.4}  BLEU-2 {:.4}  BLEU-3 {:.4}  BLEU-4 {:.4}",
        report.n, report.mean[0], report.mean[1], report.mean[2], report.mean[3]
    );
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(args) => {
            let mut cfg = args.stage.config()?;
            if let Some(seed) = args.seed {
                cfg.synth.seed = seed;
            }
            if let Some(n) = args.n {
                cfg.synth.n_sentences = n;
            }
            if let Some(out) = &args.stage.out {
                cfg.paths.corpus_dir = out.clone();
            }
            let entries = pipeline::run_synth(&cfg)?;
            println!(
                "wrote {} entries to {}",
                entries.len(),
                cfg.paths.corpus_dir.display()
            );
        }
        Cmd::Prepare(args) => {
            let mut cfg = args.config()?;
            if let Some(out) = &args.out {
                cfg.paths.prepared_dir = out.clone();
            }
            let s = pipeline::run_prepare(&cfg)?;
            println!(
                "prepared {} entries ({} train / {} val / {} test), vocab {} ids, {} components -> {}",
                s.n_entries, s.n_train, s.n_val, s.n_test, s.vocab_size, s.k_components,
                s.out_dir.display()
            );
        }
        Cmd::Train(args) => {
            let mut cfg = args.stage.config()?;
            if let Some(epochs) = args.epochs {
                cfg.train.epochs = epochs;
            }
            if let Some(out) = &args.stage.out {
                cfg.train.checkpoint_dir = out.clone();
            }
            let s = pipeline::run_train(&cfg)?;
            let (best_epoch, best_b1) = s.best();
            let last = s.outcome.history.records.last().expect("at least one epoch");
            println!(
                "trained {} epochs on {} samples ({} val): final train loss {:.6}, \
                 best epoch {} (val BLEU-1 {:.4}); outputs in {}",
                s.outcome.history.records.len(),
                s.n_train,
                s.n_val,
                last.train_loss,
                best_epoch,
                best_b1,
                s.run_dir.display()
            );
        }
        Cmd::Ablate(args) => {
            let cfg = args.config()?;
            let s = pipeline::run_ablate(&cfg, args.out.as_deref())?;
            println!(
                "ablation trained {} epochs: per-position accuracy train {:.4}, val {:.4}; \
                 outputs in {}",
                s.outcome.history.records.len(),
                s.train_accuracy,
                s.val_accuracy,
                s.run_dir.display()
            );
        }
        Cmd::Evaluate(args) => {
            let mut cfg = args.config()?;
            if let Some(out) = &args.out {
                cfg.eval.out_dir = Some(out.clone());
            }
            let s = pipeline::run_evaluate(&cfg)?;
            println!("checkpoint: {}", s.checkpoint.display());
            print_report(&s.report);
            println!(
                "wrote {}, {}, {}",
                s.predictions_path.display(),
                s.report_json_path.display(),
                s.report_table_path.display()
            );
        }
        Cmd::Bleu(args) => {
            let mut cfg = args.stage.config()?;
            if args.raw {
                cfg.eval.raw = true;
            }
            if let Some(mode) = args.corpus_mode {
                cfg.eval.corpus_mode = match mode {
                    CorpusModeArg::Mean => CorpusMode::Mean,
                    CorpusModeArg::Micro => CorpusMode::Micro,
                };
            }
            let (report, json_path, table_path) =
                pipeline::run_bleu(&cfg, &args.pred, args.stage.out.as_deref())?;
            print_report(&report);
            println!("wrote {}, {}", json_path.display(), table_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors must exit 1 (clap defaults to 2, which we reserve for
    // numerical failures).
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
