use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sead_core::arena::{agent_for, AgentKind, Environment};
use sead_core::controller::{sample_batch, CompletionStats, TraitLibrary};
use sead_core::io::{self, Replayer};
use sead_core::{evaluate, ArenaConfig, PolicyParams, RootSeed, StreamId};

/// Curriculum-driven self-play training for service dialogue agents.
///
/// Log verbosity follows SEAD_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "sead", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write logs, tables and checkpoints to --out.
    Train {
        /// TOML config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<u32>,
        /// Overrides the config's rollout thread count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a policy checkpoint (or a scripted agent) on the 120-state grid.
    Evaluate {
        #[arg(long, required_unless_present = "agent")]
        checkpoint: Option<PathBuf>,
        /// Dialogues per initial state.
        #[arg(long, default_value_t = 8)]
        reps: usize,
        /// User model settings come from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0x5ead)]
        seed: u64,
        /// Evaluate a scripted agent instead of a checkpoint.
        #[arg(long, value_enum)]
        agent: Option<Scripted>,
        /// Print a CSV row instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Print a batch sampled from a stats table, one profile per line.
    SampleProfiles {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-simulate logged trajectories and check they match.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, required_unless_present = "all")]
        index: Option<usize>,
        /// Verify every record in the log.
        #[arg(long, conflicts_with = "index")]
        all: bool,
    },
    /// Print the 120-row completion table rebuilt from a trajectory log.
    Stats {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scripted {
    Expert,
    Mediocre,
    Random,
}

fn config_or_default(path: Option<&Path>) -> Result<ArenaConfig> {
    Ok(match path {
        Some(p) => io::load_config(p)?,
        None => ArenaConfig::default(),
    })
}

fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    iterations: Option<u32>,
    workers: Option<usize>,
) -> Result<()> {
    let mut config = config_or_default(config)?;
    config.seed = seed.unwrap_or(config.seed);
    config.iterations = iterations.unwrap_or(config.iterations);
    config.workers = workers.unwrap_or(config.workers);
    config.validate()?;
    let summary = io::run_training(&config, out).with_context(|| format!("training into {}", out.display()))?;
    println!(
        "trained {} iterations (seed {}), last batch CR {:.3}; artifacts in {}",
        summary.manifest.iterations_run,
        config.seed,
        summary.last_batch_cr,
        out.display()
    );
    if let Some(m) = summary.evaluation {
        println!("{m}");
    }
    Ok(())
}

fn run_evaluate(
    checkpoint: Option<&Path>,
    reps: usize,
    config: Option<&Path>,
    seed: u64,
    agent: Option<Scripted>,
    csv: bool,
) -> Result<()> {
    let config = config_or_default(config)?;
    let policy = match checkpoint {
        Some(path) => io::load_policy(path).with_context(|| format!("loading {}", path.display()))?,
        None => PolicyParams::zeros(),
    };
    let kind = match agent {
        None => AgentKind::Learner,
        Some(Scripted::Expert) => AgentKind::Expert,
        Some(Scripted::Mediocre) => AgentKind::Mediocre,
        Some(Scripted::Random) => AgentKind::Random,
    };
    let env = Environment::frozen(config.user_model()?);
    let library = TraitLibrary::new(config.n_max);
    let result = evaluate(agent_for(kind, &policy).as_ref(), &env, reps, RootSeed(seed), &library)?;
    if csv {
        println!("{}\n{}", sead_core::MetricBundle::HEADER, result.metrics.csv_row());
    } else {
        println!("{}", result.metrics);
    }
    Ok(())
}

fn sample_profiles(stats: &Path, n: usize, seed: u64) -> Result<()> {
    let text = std::fs::read_to_string(stats).with_context(|| format!("reading {}", stats.display()))?;
    let table = CompletionStats::from_csv(&text)?;
    let library = TraitLibrary::default();
    let mut rng = RootSeed(seed).stream(StreamId::sampling(0));
    let batch = sample_batch(&table, n, &mut rng, &library)?;
    let mut out = std::io::stdout().lock();
    for p in batch {
        writeln!(out, "{}", serde_json::to_string(&p)?)?;
    }
    Ok(())
}

fn replay(log: &Path, index: Option<usize>, all: bool) -> Result<()> {
    let mut replayer = Replayer::open(log).with_context(|| format!("opening {}", log.display()))?;
    if all {
        let n = replayer.verify_all()?;
        println!("verified {n} of {} records", replayer.len());
    } else if let Some(i) = index {
        replayer.verify(i)?;
        println!("record {i} verified");
    } else {
        bail!("either --index or --all is required");
    }
    Ok(())
}

fn stats(log: &Path) -> Result<()> {
    let (_, records) = io::read_log(log).with_context(|| format!("reading {}", log.display()))?;
    print!("{}", io::stats_from_records(&records)?.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEAD_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            seed,
            out,
            iterations,
            workers,
        } => train(config.as_deref(), *seed, out, *iterations, *workers),
        Command::Evaluate {
            checkpoint,
            reps,
            config,
            seed,
            agent,
            csv,
        } => run_evaluate(checkpoint.as_deref(), *reps, config.as_deref(), *seed, *agent, *csv),
        Command::SampleProfiles { stats, n, seed } => sample_profiles(stats, *n, *seed),
        Command::Replay { log, index, all } => replay(log, *index, *all),
        Command::Stats { log } => stats(log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
