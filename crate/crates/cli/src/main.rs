use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use permon_core::experiment::{run_experiment, write_results, ExperimentConfig, Planner, PlannerSummary};
use permon_core::policy::PolicyNet;
use permon_core::ppo::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "permon", version, about = "Persistent monitoring of mobile targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the attention policy with PPO.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured planners side by side.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint; without one the policy planner is skipped.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_table(rows: &[PlannerSummary]) {
    println!(
        "{:<10} {:>4} {:>8} {:>8} {:>8} {:>7} {:>8} {:>8}",
        "planner", "n", "unc", "unc_sd", "min_obs", "min", "jsd", "reward"
    );
    for s in rows {
        let jsd = s.jsd_mean.map_or("-".to_string(), |j| format!("{j:.4}"));
        println!(
            "{:<10} {:>4} {:>8.4} {:>8.4} {:>8.2} {:>7} {:>8} {:>8.3}",
            s.planner.name(),
            s.episodes,
            s.unc_mean,
            s.unc_between_target_std,
            s.min_obs_mean,
            s.min_obs_min,
            jsd,
            s.reward_mean
        );
    }
}

fn evaluate(common: &Common, checkpoint: Option<&Path>, policy_only: bool) -> Result<()> {
    let mut config: ExperimentConfig = read_json(&common.config)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    let checkpoint = checkpoint.map(Path::to_path_buf).or_else(|| config.checkpoint.clone());
    if policy_only {
        config.planners = vec![Planner::Policy];
    }
    let policy = match &checkpoint {
        Some(path) => Some(PolicyNet::load(path)?),
        None if config.planners.contains(&Planner::Policy) => {
            if policy_only {
                bail!("no checkpoint given");
            }
            eprintln!("no checkpoint given; skipping the policy planner");
            config.planners.retain(|p| *p != Planner::Policy);
            None
        }
        None => None,
    };
    config.checkpoint = checkpoint;
    let result = run_experiment(&config, policy.as_ref())?;
    write_results(&config, &result, &common.out)?;
    print_table(&result.summaries);
    println!("results written to {}", common.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let mut config: TrainConfig = read_json(&common.config)?;
            if let Some(s) = common.seed {
                config.seed = s;
            }
            if let Some(w) = common.workers {
                config.workers = w;
            }
            let (_, history) = train(config, &common.out)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} episodes in {} updates; last batch reward {:.3}",
                    last.episodes_done,
                    history.len(),
                    last.mean_reward
                );
            }
            println!("checkpoint written to {}", common.out.join("policy").display());
            Ok(())
        }
        Command::Eval { common, checkpoint } => evaluate(&common, Some(&checkpoint), true),
        Command::Compare { common, checkpoint } => evaluate(&common, checkpoint.as_deref(), false),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
