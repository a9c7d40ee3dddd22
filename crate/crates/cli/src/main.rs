//! `aat`: generate synthetic data, train, evaluate and inspect halting traces.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on usage or
//! configuration errors. Usage errors are detected before any file is
//! written.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "aat", version, about = "Adaptive attention time decoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic dataset.
    Gen(GenArgs),
    /// Train a decoder and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and print a JSON report.
    Eval(EvalArgs),
    /// Validate a halting-trace file.
    Check(CheckArgs),
    /// Build a vocabulary from a plain-text caption corpus.
    Vocab(VocabArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, env = "AAT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    d_a: usize,
    #[arg(long, default_value_t = 40)]
    vocab_size: usize,
    /// Caption word limit, without the end token.
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "adaptive")]
    mode: String,
    /// Attention steps per decoding step in recurrent mode [default: 4 for
    /// recurrent, 1 otherwise].
    #[arg(long)]
    m_r: Option<usize>,
    #[arg(long, default_value_t = 0)]
    m_min: usize,
    #[arg(long, default_value_t = 4)]
    m_max: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value = "additive")]
    attn_kind: String,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 0.08)]
    init_range: f64,
    /// Disable layer normalization of adaptive attention steps.
    #[arg(long)]
    no_layer_norm: bool,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    lr_decay: f64,
    #[arg(long, default_value_t = 2)]
    lr_every: usize,
    #[arg(long, default_value_t = 0.05)]
    ss_step: f64,
    #[arg(long, default_value_t = 3)]
    ss_every: usize,
    #[arg(long, default_value_t = 0.25)]
    ss_cap: f64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 17)]
    max_decode: usize,
    #[arg(long, env = "AAT_SEED", default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log [default: <out>.log.jsonl].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Keep the last epoch instead of the best validation epoch.
    #[arg(long)]
    keep_last: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 17)]
    max_decode: usize,
    /// Write teacher-forced halting traces as JSON lines.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    trace: PathBuf,
    /// Take the step bounds from this checkpoint's configuration.
    #[arg(long, conflicts_with_all = ["m_min", "m_max"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    m_min: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
}

#[derive(Args)]
struct VocabArgs {
    /// One caption per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    out: PathBuf,
    /// Also write the lowercased, truncated captions.
    #[arg(long)]
    captions_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Check(a) => commands::check(a),
        Command::Vocab(a) => commands::vocab(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
