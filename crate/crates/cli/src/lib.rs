//! Command-line driver: config resolution, subcommands and run summaries.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::json;

use config::{Overrides, RunConfig};

/// Emotional reaction intensity estimation from precomputed feature streams.
#[derive(Parser)]
#[command(name = "eri", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy, Debug)]
pub enum Command {
    /// Write a synthetic dataset (features + manifest) to --out
    Synth,
    /// Train one model and write its checkpoint, history and predictions
    Train,
    /// Score a checkpoint on a labeled split
    Eval,
    /// Random search with successive halving
    Tune,
    /// Average member checkpoints and report cumulative scores
    Ensemble,
    /// Pearson correlation between the seven label columns
    Labelcorr,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Tune => "tune",
            Command::Ensemble => "ensemble",
            Command::Labelcorr => "labelcorr",
        }
    }
}

#[derive(Args, Debug)]
struct Flags {
    /// JSON file with flat dotted keys (e.g. "hp.hidden_dim")
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent trials for `tune`
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true, value_parser = ["mse", "pcc"])]
    loss: Option<String>,
    #[arg(long, global = true, value_parser = ["visual_only", "audio_only", "concat", "cross_attention"])]
    fusion: Option<String>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Checkpoint to evaluate
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["train", "val", "test"])]
    split: Option<String>,
    /// Ensemble members, comma separated or repeated
    #[arg(long, global = true, value_delimiter = ',')]
    members: Vec<PathBuf>,
    /// More progress output on stderr
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

/// A failed run: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure {
            code: 4,
            msg: msg.into(),
        }
    }
}

impl From<eri_core::Error> for Failure {
    fn from(e: eri_core::Error) -> Self {
        use eri_core::Error::*;
        let code = match &e {
            Config { .. } => 2,
            Numerical(_) => 4,
            Io { .. } | Format { .. } | Corruption { .. } | Validation(_) | Manifest(_)
            | Shape(_) | Precondition(_) => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn write_summary(out: &std::path::Path, command: Command, cfg: Option<&RunConfig>, seed: Option<u64>, err: Option<&Failure>) {
    let summary = json!({
        "command": command.name(),
        "status": if err.is_none() { "ok" } else { "error" },
        "exit_code": err.map_or(0, |f| f.code),
        "error": err.map(|f| f.msg.as_str()),
        "seed": cfg.map(|c| c.seed).or(seed),
        "config": cfg,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    if std::fs::create_dir_all(out).is_ok() {
        if let Err(e) = std::fs::write(out.join("run_summary.json"), text) {
            eprintln!("warning: could not write run summary: {e}");
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let f = cli.flags;
    let overrides = Overrides {
        config: f.config,
        manifest: f.manifest,
        out: f.out,
        seed: f.seed,
        parallelism: f.parallelism,
        loss: f.loss,
        fusion: f.fusion,
        trials: f.trials,
        checkpoint: f.checkpoint,
        split: f.split,
        members: f.members,
        verbosity: f.verbose,
    };
    let cfg = match config::resolve(&overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            write_summary(&config::fallback_out(&overrides), cli.command, None, overrides.seed, Some(&e));
            return e.code;
        }
    };
    let result = std::fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::config(format!("invalid config `out`: cannot create {}: {e}", cfg.out.display())))
        .and_then(|_| commands::run(cli.command, &cfg));
    match result {
        Ok(()) => {
            write_summary(&cfg.out, cli.command, Some(&cfg), None, None);
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.msg);
            write_summary(&cfg.out, cli.command, Some(&cfg), None, Some(&e));
            e.code
        }
    }
}
