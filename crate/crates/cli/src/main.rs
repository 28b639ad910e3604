//! Command-line surface for the self-rewarding correction testbed.
//!
//! Every subcommand writes a machine-readable JSON report into the output
//! directory and prints a human-readable table. Exit codes: 0 on success,
//! 2 on validation errors (bad data files, invalid trajectories, shortfalls),
//! 3 on configuration errors. `verify` is the exception: it exits 0 when the
//! response is correct and 1 when it is not.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use selfreward::config::AppConfig;
use selfreward::rng::RngFactory;
use selfreward::trainer::LossKind;

use commands::Ctx;

#[derive(Parser)]
#[command(name = "selfreward")]
#[command(about = "Self-rewarding correction testbed: pipeline, solver, trainer, metrics")]
struct Cli {
    /// Path to the TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports and data files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll one trajectory per problem and write problems + trajectories.
    Simulate,
    /// Run the rejection-sampling collection stages and write candidates.
    Collect,
    /// Bucket candidate trajectories into the kept fine-tuning classes.
    Filter {
        /// Candidate trajectories (defaults to <out>/candidates.jsonl).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rebalance a filtered dataset to the configured composition.
    Compose {
        /// Directory holding ift-*.jsonl (defaults to <out>).
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
    /// Build preference pairs from candidate trajectories.
    Pairs {
        /// Candidate trajectories (defaults to <out>/candidates.jsonl).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Solve the configured KL-regularized MDP exactly.
    Solve,
    /// Fit a tabular policy with the configured objective.
    Train {
        /// sft or mdpo.
        #[arg(long, value_parser = parse_objective)]
        objective: LossKind,
        /// Directory with ift-*.jsonl (sft) or pairs.jsonl (mdpo); defaults
        /// to <out>.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Explicit pairs file for mdpo.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Problems file (defaults to <out>/problems.jsonl).
        #[arg(long)]
        problems: Option<PathBuf>,
    },
    /// Compute the self-correction metric suite over trajectories.
    Evaluate {
        /// Trajectories file (defaults to <out>/trajectories.jsonl).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Sweep voting budgets for independent vs self-rewarding sampling.
    Vote,
    /// Compare reward designs on the hacking probe MDP.
    ProbeHacking,
    /// Check a response file against a gold answer; exits 0/1.
    Verify {
        #[arg(long)]
        gold: String,
        #[arg(long)]
        response_file: PathBuf,
    },
}

fn parse_objective(s: &str) -> Result<LossKind, String> {
    match s {
        "sft" => Ok(LossKind::Sft),
        "mdpo" => Ok(LossKind::Mdpo),
        other => Err(format!("unknown objective {other:?}; use sft or mdpo")),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<AppConfig> {
    let config = match path {
        None => AppConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
    };
    config.validate()?;
    Ok(config)
}

/// 2 for validation-type errors, 3 for configuration-type errors.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    use selfreward::Error;
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<Error>() {
            return match core {
                Error::Config(_) | Error::InvalidEta(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 3;
        }
    }
    // Anything else (unreadable config path, serialization) is configuration.
    3
}

fn run(cli: Cli) -> Result<i32> {
    let mut config = load_config(cli.config.as_ref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Ctx {
        factory: RngFactory::new(config.seed),
        out: cli.out.clone(),
        config,
    };
    let candidates_default = || ctx.out.join("candidates.jsonl");
    match cli.command {
        Command::Simulate => commands::simulate(&ctx)?,
        Command::Collect => commands::collect_cmd(&ctx)?,
        Command::Filter { input } => {
            commands::filter_cmd(&ctx, &input.unwrap_or_else(candidates_default))?
        }
        Command::Compose { input_dir } => {
            commands::compose_cmd(&ctx, &input_dir.clone().unwrap_or_else(|| ctx.out.clone()))?
        }
        Command::Pairs { input } => {
            commands::pairs_cmd(&ctx, &input.unwrap_or_else(candidates_default))?
        }
        Command::Solve => commands::solve_cmd(&ctx)?,
        Command::Train {
            objective,
            data_dir,
            pairs,
            problems,
        } => commands::train_cmd(
            &ctx,
            objective,
            &data_dir.unwrap_or_else(|| ctx.out.clone()),
            pairs.as_deref(),
            &problems.unwrap_or_else(|| ctx.out.join("problems.jsonl")),
        )?,
        Command::Evaluate { input } => commands::evaluate_cmd(
            &ctx,
            &input.unwrap_or_else(|| ctx.out.join("trajectories.jsonl")),
        )?,
        Command::Vote => commands::vote_cmd(&ctx)?,
        Command::ProbeHacking => commands::probe_hacking_cmd(&ctx)?,
        Command::Verify {
            gold,
            response_file,
        } => return commands::verify_cmd(&gold, &response_file),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
