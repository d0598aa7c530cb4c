use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "tabmeta", version, about = "In-context tabular prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to the synthetic prior.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints, training state, log and manifest.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from the training state in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop once this many optimizer steps have been taken.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Predict the test rows of a CSV from the training rows of another.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        target: String,
        /// Number of feature-permutation ensemble members.
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prediction CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score checkpoints on every CSV in a directory over seeded 80-20 splits.
    Evaluate {
        /// Repeat to compare several checkpoints.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 5)]
        splits: usize,
        /// Target column; the last column of each file when absent.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Machine-readable report.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare ordinary and adversarial generator collections.
    AnalyzePrior {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2000)]
        datasets: usize,
        /// Model the agents ascend against; a fresh initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Size of the agent pool.
        #[arg(long, default_value_t = 8)]
        agents: usize,
        /// Ascent steps per agent; raised to each agent's share of datasets.
        #[arg(long, default_value_t = 500)]
        agent_steps: usize,
        /// Average KL over dataset pairs instead of pooling points.
        #[arg(long)]
        per_dataset: bool,
        /// Report and density grids are written here.
        #[arg(long, default_value = "prior_analysis")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            out,
            resume,
            stop_after,
        } => commands::pretrain(&config, &out, resume, stop_after),
        Command::Predict {
            checkpoint,
            train,
            test,
            target,
            ensemble,
            seed,
            output,
        } => commands::predict(&checkpoint, &train, &test, &target, ensemble, seed, output.as_deref()),
        Command::Evaluate {
            checkpoint,
            suite,
            splits,
            target,
            seed,
            json,
        } => commands::evaluate(&checkpoint, &suite, splits, target.as_deref(), seed, json.as_deref()),
        Command::AnalyzePrior {
            config,
            datasets,
            checkpoint,
            agents,
            agent_steps,
            per_dataset,
            out,
        } => commands::analyze_prior(&config, datasets, checkpoint.as_deref(), agents, agent_steps, per_dataset, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
