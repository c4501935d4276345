//! `segpos`: synthetic data, training, translation, evaluation and
//! encoding analysis for segment-aware document translation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod opts;

use opts::RunOpts;

/// Misuse detected after argument parsing; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "segpos", version, about = "Segment-aware context translation toolkit")]
struct Cli {
    /// Worker threads; 1 makes every seeded command bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic context-dependent translation task.
    Gen(GenArgs),
    /// Train a window model.
    Train(TrainArgs),
    /// Translate documents with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a contrastive set and print a JSON report.
    EvalContrastive(EvalContrastiveArgs),
    /// Aggregate per-phenomenon accuracies with the fixed subset weights.
    EvalMetrics(EvalMetricsArgs),
    /// PCA of the sinusoidal position matrix as CSV.
    AnalyzePe(AnalyzePeArgs),
    /// Average checkpoint files elementwise.
    AverageCheckpoints(AverageArgs),
    /// Train once per learning rate and report dev losses.
    SweepLr(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    sentences_per_doc: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    train_docs: Option<usize>,
    #[arg(long)]
    dev_docs: Option<usize>,
    #[arg(long)]
    test_docs: Option<usize>,
    /// Number of contrastive examples.
    #[arg(long)]
    contrastive: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: RunOpts,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source documents; standard input when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Window size; defaults to the one the model was trained with.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct EvalContrastiveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines contrastive set.
    #[arg(long)]
    set: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Divide candidate scores by their token count.
    #[arg(long)]
    length_normalize: bool,
    /// Report file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalMetricsArgs {
    #[arg(long)]
    deixis: Option<f64>,
    #[arg(long)]
    lex: Option<f64>,
    #[arg(long)]
    ellinf: Option<f64>,
    #[arg(long)]
    ellvp: Option<f64>,
    /// Accuracy on pronouns whose antecedent is in the same sentence.
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long)]
    d1: Option<f64>,
    #[arg(long)]
    d2: Option<f64>,
    #[arg(long)]
    d3: Option<f64>,
    /// Accuracy for antecedent distance above 3.
    #[arg(long)]
    d_gt_3: Option<f64>,
}

#[derive(Args, Debug)]
struct AnalyzePeArgs {
    #[arg(long, default_value_t = 1024)]
    positions: usize,
    #[arg(long, default_value_t = 512)]
    dims: usize,
    /// Cumulative ratio whose crossing index is reported on standard error.
    #[arg(long, default_value_t = 0.999)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AverageArgs {
    /// Checkpoints to average.
    inputs: Vec<PathBuf>,
    /// Select from a training log instead: the best validation and the ones after it.
    #[arg(long, conflicts_with = "inputs")]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 5, requires = "log")]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rates to try.
    #[arg(long, value_delimiter = ',', default_value = "7e-4,9e-4,1e-3,3e-3")]
    lrs: Vec<f64>,
    #[command(flatten)]
    opts: RunOpts,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::EvalContrastive(a) => commands::eval_contrastive(a),
        Command::EvalMetrics(a) => commands::eval_metrics(a),
        Command::AnalyzePe(a) => commands::analyze_pe(a),
        Command::AverageCheckpoints(a) => commands::average(a),
        Command::SweepLr(a) => commands::sweep_lr(a),
    }
}

/// The error chain joined by `: `, skipping causes whose text the message
/// already contains.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let s = cause.to_string();
        if !msg.contains(&s) {
            msg.push_str(": ");
            msg.push_str(&s);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
