// SPDX-License-Identifier: MIT OR Apache-2.0

//! `recall-lens`: reproducible interpretability experiments on multilingual
//! fact recall.
//!
//! Exit codes: 0 when every requested artifact was written, 1 on runtime
//! errors, 2 on usage errors (including bad split specs), 3 when a steering
//! vector was refused because it was extracted from a different model.

mod commands;
mod config;
mod context;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::{analyze, causal, eval, extract, report, similarity};
use tracing_subscriber::EnvFilter;

/// Invalid flag combination or unusable config; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "recall-lens", version, about, args_override_self = true)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Logit-lens diagnostics: answer ranks, agnostic tables, relation
    /// propagation and extraction events.
    Analyze(analyze::AnalyzeArgs),
    /// Extract steering vectors.
    #[command(subcommand)]
    Extract(extract::ExtractKind),
    /// Evaluate conditions across seeds and compare them.
    Eval(eval::EvalArgs),
    /// Activation patching (AIE) sweeps and head rankings.
    Patch(causal::PatchArgs),
    /// Attention knockout over sliding layer windows.
    Knockout(causal::KnockoutArgs),
    /// Ablate attention heads and measure logit changes.
    Ablate(causal::AblateArgs),
    /// MLP activation similarity between fact and translation prompts.
    Similarity(similarity::SimilarityArgs),
    /// Check a run directory against its manifest.
    Verify(report::VerifyArgs),
    /// Combine verified evaluation runs into summary tables.
    Report(report::ReportArgs),
}

impl Command {
    fn jobs(&self) -> Option<usize> {
        match self {
            Command::Analyze(a) => a.common.jobs,
            Command::Extract(extract::ExtractKind::Translation(a) | extract::ExtractKind::Recall(a)) => {
                a.common.jobs
            }
            Command::Eval(a) => a.common.jobs,
            Command::Patch(a) => a.common.jobs,
            Command::Knockout(a) => a.common.jobs,
            Command::Ablate(a) => a.common.jobs,
            Command::Similarity(a) => a.common.jobs,
            Command::Verify(_) | Command::Report(_) => None,
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Analyze(a) => analyze::run(a),
        Command::Extract(k) => extract::run(k),
        Command::Eval(a) => eval::run(a),
        Command::Patch(a) => causal::patch(a),
        Command::Knockout(a) => causal::knockout(a),
        Command::Ablate(a) => causal::ablate(a),
        Command::Similarity(a) => similarity::run(a),
        Command::Verify(a) => report::verify(a),
        Command::Report(a) => report::report(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        match cause.downcast_ref::<recall_lens::Error>() {
            Some(recall_lens::Error::FingerprintMismatch { .. }) => return 3,
            // Split specs come straight from flags.
            Some(recall_lens::Error::Spec(_)) => return 2,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    let argv = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::new(level))
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = cli.command.jobs() {
        if n == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
