//! Run artifacts: configuration files, the trajectory log, metric and stats
//! tables, per-iteration checkpoints and the run manifest.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json          config snapshot, seed, code version, paths, timings
//! trajectories.jsonl     header line, then one rollout per line
//! metrics.csv            one row per iteration
//! stats.csv              final per-state completion table
//! evaluation.csv         grid evaluation of the final agent (if eval_reps > 0)
//! checkpoints/           parameters in force at the start of each iteration
//! ```
//!
//! Everything except `manifest.json` is a pure function of the config, so
//! reruns can be compared byte for byte.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::PolicyParams;
use crate::arena::{agent_for, shaped_reward, Arena, ArenaConfig, Environment, Trajectory, UserAdversary};
use crate::controller::CompletionStats;
use crate::error::{Error, Result};
use crate::grpo::RewardedGroup;
use crate::metrics::MetricBundle;
use crate::rng::RootSeed;

pub const LOG_FORMAT: &str = "sead-trajectories";
pub const LOG_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "trajectories.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATS_FILE: &str = "stats.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

// ---------------------------------------------------------------------------
// Configuration

pub fn parse_config(text: &str, path: &Path) -> Result<ArenaConfig> {
    let config: ArenaConfig = toml::from_str(text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(config)
}

/// Reads a TOML config. Missing keys take their defaults; unknown keys and
/// syntax errors are reported with line and column.
pub fn load_config(path: &Path) -> Result<ArenaConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config(&text, path)
}

// ---------------------------------------------------------------------------
// Trajectory log

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub config: ArenaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: u32,
    pub group: usize,
    pub rollout: usize,
    pub reward: f64,
    pub advantage: f64,
    pub trajectory: Trajectory,
}

pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path, config: &ArenaConfig) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = LogHeader {
            format: LOG_FORMAT.to_string(),
            version: LOG_VERSION,
            config: config.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &TrajectoryRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<TrajectoryRecord>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty log", path.display())))??;
    let header: LogHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Parse(format!("{}: bad header: {e}", path.display())))?;
    if header.format != LOG_FORMAT || header.version != LOG_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported log {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 2)))?;
        records.push(record);
    }
    Ok((header, records))
}

/// Per-state completion table rebuilt from the logged outcomes, in log order.
pub fn stats_from_records(records: &[TrajectoryRecord]) -> Result<CompletionStats> {
    let mut stats = CompletionStats::new();
    for r in records {
        stats.update(r.trajectory.initial_state().index(), r.trajectory.outcome)?;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub fn policy_checkpoint_path(run_dir: &Path, iteration: u32) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration:05}.policy"))
}

pub fn user_checkpoint_path(run_dir: &Path, iteration: u32) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration:05}.user.json"))
}

pub fn save_policy(policy: &PolicyParams, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    policy.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    PolicyParams::read_from(BufReader::new(File::open(path)?))
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationArtifacts {
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub iteration_secs: Vec<f64>,
    pub evaluation_secs: f64,
}

/// Everything needed to rerun; paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: ArenaConfig,
    pub iterations_run: u32,
    pub log: PathBuf,
    pub metrics: PathBuf,
    pub stats: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<PathBuf>,
    pub checkpoints: Vec<IterationArtifacts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_policy: Option<PathBuf>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub evaluation: Option<MetricBundle>,
    pub last_batch_cr: f64,
}

/// Trains per `config`, writing every artifact into `out_dir`.
pub fn run_training(config: &ArenaConfig, out_dir: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let mut arena = Arena::new(config.clone())?;
    let learner = config.agent == crate::arena::AgentKind::Learner;

    let mut log = LogWriter::create(&out_dir.join(LOG_FILE), config)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    writeln!(metrics, "{}", crate::arena::IterationReport::CSV_HEADER)?;

    let mut checkpoints = Vec::new();
    let mut iteration_secs = Vec::new();
    let mut last_batch_cr = 0.0;
    for _ in 0..config.iterations {
        let t0 = Instant::now();
        let it = arena.iteration();
        let mut artifacts = IterationArtifacts {
            iteration: it,
            policy: None,
            user: None,
        };
        if learner {
            save_policy(arena.policy(), &policy_checkpoint_path(out_dir, it))?;
            artifacts.policy = Some(relative(out_dir, &policy_checkpoint_path(out_dir, it)));
        }
        if let Some(adv) = arena.adversary() {
            save_json(adv, &user_checkpoint_path(out_dir, it))?;
            artifacts.user = Some(relative(out_dir, &user_checkpoint_path(out_dir, it)));
        }
        checkpoints.push(artifacts);

        let out = arena.train_iteration()?;
        for (g, group) in out.groups.iter().enumerate() {
            let rewards = group
                .iter()
                .map(|t| shaped_reward(t, config.shaping_lambda))
                .collect::<Result<Vec<_>>>()?;
            let rewarded = RewardedGroup::new(rewards);
            for (k, t) in group.iter().enumerate() {
                log.append(&TrajectoryRecord {
                    iteration: it,
                    group: g,
                    rollout: g * config.group_size + k,
                    reward: rewarded.rewards[k],
                    advantage: rewarded.advantages[k],
                    trajectory: t.clone(),
                })?;
            }
        }
        log.flush()?;
        writeln!(metrics, "{}", out.report.csv_row())?;
        metrics.flush()?;
        last_batch_cr = out.report.batch_cr;
        log::info!(
            "iteration {it}: batch CR {:.3}, mean |A| {:.3}, |grad| {:.4}",
            out.report.batch_cr,
            out.report.mean_abs_advantage,
            out.report.grad_norm
        );
        iteration_secs.push(t0.elapsed().as_secs_f64());
        if arena.should_stop() {
            log::info!("early stop after iteration {it}");
            break;
        }
    }

    fs::write(out_dir.join(STATS_FILE), arena.stats().to_csv())?;
    let final_policy = if learner {
        let path = out_dir.join("final.policy");
        save_policy(arena.policy(), &path)?;
        Some(PathBuf::from("final.policy"))
    } else {
        None
    };

    let t_eval = Instant::now();
    let evaluation = if config.eval_reps > 0 {
        let bundle = arena.evaluate(config.eval_reps)?.metrics;
        fs::write(
            out_dir.join(EVALUATION_FILE),
            format!("{}\n{}\n", MetricBundle::HEADER, bundle.csv_row()),
        )?;
        Some(bundle)
    } else {
        None
    };

    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        iterations_run: arena.iteration(),
        log: LOG_FILE.into(),
        metrics: METRICS_FILE.into(),
        stats: STATS_FILE.into(),
        evaluation: evaluation.as_ref().map(|_| EVALUATION_FILE.into()),
        checkpoints,
        final_policy,
        timings: Timings {
            total_secs: started.elapsed().as_secs_f64(),
            iteration_secs,
            evaluation_secs: t_eval.elapsed().as_secs_f64(),
        },
    };
    save_json(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(RunSummary {
        manifest,
        evaluation,
        last_batch_cr,
    })
}

fn relative(base: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(base).unwrap_or(path).to_path_buf()
}

// ---------------------------------------------------------------------------
// Replay

/// Re-simulates logged rollouts from the checkpoints next to the log.
pub struct Replayer {
    run_dir: PathBuf,
    header: LogHeader,
    records: Vec<TrajectoryRecord>,
    user: crate::user_model::UserModelConfig,
    policies: BTreeMap<u32, PolicyParams>,
    users: BTreeMap<u32, Option<UserAdversary>>,
}

impl Replayer {
    pub fn open(log_path: &Path) -> Result<Self> {
        let (header, records) = read_log(log_path)?;
        let run_dir = log_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let user = header.config.user_model()?;
        Ok(Self {
            run_dir,
            header,
            records,
            user,
            policies: BTreeMap::new(),
            users: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    fn policy(&mut self, iteration: u32) -> Result<&PolicyParams> {
        if !self.policies.contains_key(&iteration) {
            let policy = if self.header.config.agent == crate::arena::AgentKind::Learner {
                load_policy(&policy_checkpoint_path(&self.run_dir, iteration))?
            } else {
                PolicyParams::zeros()
            };
            // Keep memory bounded on long logs; records arrive in iteration order.
            self.policies.retain(|&k, _| k + 1 >= iteration);
            self.policies.insert(iteration, policy);
        }
        Ok(&self.policies[&iteration])
    }

    fn user(&mut self, iteration: u32) -> Result<Option<UserAdversary>> {
        if !self.header.config.train_urm {
            return Ok(None);
        }
        if !self.users.contains_key(&iteration) {
            let path = user_checkpoint_path(&self.run_dir, iteration);
            let adv: UserAdversary = serde_json::from_reader(BufReader::new(File::open(path)?))?;
            self.users.insert(iteration, Some(adv));
        }
        Ok(self.users[&iteration].clone())
    }

    /// Re-simulates record `index`; a mismatch in any field is an error.
    pub fn verify(&mut self, index: usize) -> Result<()> {
        let record = self
            .records
            .get(index)
            .cloned()
            .ok_or_else(|| Error::contract(format!("record {index} not in a log of {}", self.records.len())))?;
        let env = Environment {
            user: self.user.clone(),
            acceptance: self.user(record.iteration)?.as_ref().map(UserAdversary::acceptance_table),
        };
        let config = self.header.config.clone();
        let kind = config.agent;
        let root = RootSeed(config.seed);
        let policy = self.policy(record.iteration)?;
        let agent = agent_for(kind, policy);
        let t = &record.trajectory;
        let again = crate::arena::run_dialogue(agent.as_ref(), t.profile, &env, root, t.stream)?;
        if &again != t || shaped_reward(&again, config.shaping_lambda)? != record.reward {
            return Err(Error::ReplayMismatch(index));
        }
        Ok(())
    }

    /// Verifies every record, returning how many were checked.
    pub fn verify_all(&mut self) -> Result<usize> {
        for i in 0..self.records.len() {
            self.verify(i)?;
        }
        Ok(self.records.len())
    }
}

pub fn replay(log_path: &Path, index: usize) -> Result<()> {
    Replayer::open(log_path)?.verify(index)
}
