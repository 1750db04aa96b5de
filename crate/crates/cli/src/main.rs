//! `radrl`: synthetic data generation, GRPO training, reward scoring and
//! mAP evaluation from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or config error,
//! 3 numeric abort, 4 empty or degenerate input.

mod commands;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use radrl::rewards::{RewardKind, Track};

#[derive(Parser, Debug)]
#[command(
    name = "radrl",
    version,
    about = "GRPO with verifiable grounding and report rewards"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy from a flat JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cap on reward workers and rollout threads
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a JSONL corpus with one reward
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        track: TrackArg,
        #[arg(long, value_enum)]
        reward: RewardArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy mAP of a grounding corpus, per-example rows to CSV
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic fixture records
    Gen {
        #[arg(long, value_enum)]
        kind: TrackArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrackArg {
    Grounding,
    Report,
}

impl From<TrackArg> for Track {
    fn from(t: TrackArg) -> Self {
        match t {
            TrackArg::Grounding => Track::Grounding,
            TrackArg::Report => Track::Report,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum RewardArg {
    SoftF1,
    Gleu,
    RougeL,
    UnigramPrecision,
}

impl From<RewardArg> for RewardKind {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::SoftF1 => RewardKind::SoftF1,
            RewardArg::Gleu => RewardKind::Gleu,
            RewardArg::RougeL => RewardKind::RougeL,
            RewardArg::UnigramPrecision => RewardKind::UnigramPrecision,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            threads,
        } => commands::train(&config, &out, threads),
        Command::Score {
            input,
            track,
            reward,
            out,
        } => commands::score(&input, track.into(), reward.into(), &out),
        Command::Eval { input, iou, out } => commands::eval(&input, iou, &out),
        Command::Gen { kind, n, seed, out } => commands::gen(kind.into(), n, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("radrl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
