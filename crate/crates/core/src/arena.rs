//! The training loop: profile sampling, grouped rollouts, group-relative
//! policy updates and completion-rate bookkeeping, plus grid evaluation.
//!
//! Phases run strictly in sequence. Only the rollouts of phase 2 run in
//! parallel; each draws from its own substream and results are collected
//! in rollout-index order, so the worker count never changes an output.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    policy_row, scripted_agent, Agent, AgentView, ContextFlags, DialogueMemory, PolicyParams, Skill,
    StateEstimate, TabularSoftmax,
};
use crate::behavior::UserProfile;
use crate::controller::{
    sample_batch, sample_from_state_weights, sample_uniform_profiles, CompletionStats, TraitLibrary, N_MAX,
};
use crate::error::{Error, Result};
use crate::grpo::{self, PolicyStep, RewardedGroup};
use crate::metrics::{self, MetricBundle};
use crate::rng::{Domain, RootSeed, SimRng, StreamId};
use crate::state_space::{UserState, STATE_COUNT};
use crate::user_model::{
    AgentAction, DialogueOutcome, EffectTable, UserModelConfig, UserSession, UserToken,
};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// The trainable tabular policy.
    #[default]
    Learner,
    Expert,
    Mediocre,
    Random,
}

/// Every knob of a run. Missing keys take these defaults; unknown keys are
/// rejected when loading from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArenaConfig {
    pub batch_size: usize,
    pub group_size: usize,
    pub iterations: u32,
    pub seed: u64,
    pub t_max: u32,
    pub epsilon: f64,
    pub lr: f64,
    /// Weight of the optional shaped reward (final minus initial levels).
    pub shaping_lambda: f64,
    pub agent: AgentKind,
    pub train_urm: bool,
    pub disable_mistake_analysis: bool,
    pub disable_profile_sampling: bool,
    pub drift_prob: f64,
    pub lapse_prob: f64,
    pub busy_t_max: u32,
    pub deterministic: bool,
    /// Per-state cap on distinct trait combinations in a batch.
    pub n_max: usize,
    /// Effect table file replacing the built-in dynamics.
    pub effect_table: Option<PathBuf>,
    /// Evaluation repetitions per initial state.
    pub eval_reps: usize,
    /// Evaluate every this many iterations (0 disables periodic evaluation).
    pub eval_every: u32,
    /// Stop once this many periodic evaluations fail to improve CR by
    /// `early_stop_min_delta` (0 disables early stopping).
    pub early_stop_patience: u32,
    pub early_stop_min_delta: f64,
    /// Rollout threads; 0 lets the pool decide.
    pub workers: usize,
    /// Initial Follow logit of the trainable user's acceptance head.
    pub urm_follow_logit: f64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            batch_size: 60,
            group_size: 8,
            iterations: 100,
            seed: 0,
            t_max: 15,
            epsilon: 0.2,
            lr: 0.05,
            shaping_lambda: 0.0,
            agent: AgentKind::Learner,
            train_urm: false,
            disable_mistake_analysis: false,
            disable_profile_sampling: false,
            drift_prob: 0.1,
            lapse_prob: 0.15,
            busy_t_max: 10,
            deterministic: false,
            n_max: N_MAX,
            effect_table: None,
            eval_reps: 8,
            eval_every: 0,
            early_stop_patience: 0,
            early_stop_min_delta: 0.005,
            workers: 0,
            urm_follow_logit: 3.0,
        }
    }
}

impl ArenaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.group_size == 0 {
            return Err(Error::contract("batch_size and group_size must be at least 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::contract("lr must be positive"));
        }
        for (name, p) in [
            ("epsilon", self.epsilon),
            ("drift_prob", self.drift_prob),
            ("lapse_prob", self.lapse_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("{name} = {p} is not a probability")));
            }
        }
        if self.t_max == 0 {
            return Err(Error::contract("t_max must be at least 1"));
        }
        Ok(())
    }

    pub fn user_model(&self) -> Result<UserModelConfig> {
        let effects = match &self.effect_table {
            Some(path) => EffectTable::load(path)?,
            None => EffectTable::default(),
        };
        Ok(UserModelConfig {
            effects,
            t_max: self.t_max,
            busy_t_max: self.busy_t_max,
            drift_prob: self.drift_prob,
            lapse_prob: self.lapse_prob,
            epsilon: self.epsilon,
            deterministic: self.deterministic,
            ..UserModelConfig::default()
        })
    }
}

// ---------------------------------------------------------------------------
// Trajectories

/// One agent action and the user's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Hidden state the agent was facing when it acted.
    pub state: UserState,
    /// The agent's estimate of that state.
    pub estimate: UserState,
    pub flags: ContextFlags,
    pub action: AgentAction,
    pub log_prob: f64,
    pub token: UserToken,
    /// Noisy levels reported with the reply.
    pub observed: UserState,
}

/// Forced outcome drawn by a trainable user before the dialogue starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceChoice {
    Follow,
    Accept,
    Reject,
}

impl AcceptanceChoice {
    pub const ALL: [AcceptanceChoice; 3] = [
        AcceptanceChoice::Follow,
        AcceptanceChoice::Accept,
        AcceptanceChoice::Reject,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverrideRecord {
    pub choice: AcceptanceChoice,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub profile: UserProfile,
    pub stream: StreamId,
    /// Levels observed before the first action.
    pub opening: UserState,
    pub turns: Vec<Turn>,
    pub outcome: DialogueOutcome,
    pub final_state: UserState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_override: Option<OverrideRecord>,
}

impl Trajectory {
    pub fn turn_count(&self) -> usize {
        self.turns.len()
    }

    pub fn initial_state(&self) -> UserState {
        self.profile.initial
    }

    /// `[dc, de, dtr]` from the initial to the final state.
    pub fn state_change(&self) -> [i32; 3] {
        let (a, b) = (self.profile.initial, self.final_state);
        [
            b.cooperation() as i32 - a.cooperation() as i32,
            b.emotion() as i32 - a.emotion() as i32,
            b.trust() as i32 - a.trust() as i32,
        ]
    }

    pub fn policy_steps(&self) -> Vec<PolicyStep> {
        self.turns
            .iter()
            .map(|t| PolicyStep {
                row: policy_row(t.estimate.index(), t.flags),
                action: t.action.index(),
                log_prob: t.log_prob,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// The user side of ablation configuration 1

/// A user side trained against the agent: a softmax over initial states and
/// an acceptance head that can force the outcome regardless of the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAdversary {
    pub state_logits: Vec<f64>,
    pub acceptance_logits: Vec<f64>,
}

impl UserAdversary {
    pub fn new(follow_logit: f64) -> Self {
        Self {
            state_logits: vec![0.0; STATE_COUNT],
            acceptance_logits: vec![follow_logit, 0.0, 0.0],
        }
    }

    pub fn state_table(&self) -> TabularSoftmax {
        TabularSoftmax::from_logits(1, STATE_COUNT, self.state_logits.clone()).expect("finite logits")
    }

    pub fn acceptance_table(&self) -> TabularSoftmax {
        TabularSoftmax::from_logits(1, 3, self.acceptance_logits.clone()).expect("finite logits")
    }
}

/// What the agent is playing against.
#[derive(Debug, Clone)]
pub struct Environment {
    pub user: UserModelConfig,
    /// Acceptance head of a trained user; `None` for the frozen model.
    pub acceptance: Option<TabularSoftmax>,
}

impl Environment {
    pub fn frozen(user: UserModelConfig) -> Self {
        Self { user, acceptance: None }
    }
}

/// Plays one dialogue from `init_session` to a terminal outcome.
pub fn run_dialogue(
    agent: &dyn Agent,
    profile: UserProfile,
    env: &Environment,
    root: RootSeed,
    stream: StreamId,
) -> Result<Trajectory> {
    let mut rng = root.stream(stream);
    let user_override = env.acceptance.as_ref().map(|table| {
        let (i, log_prob, _) = table.sample(0, &mut rng);
        OverrideRecord {
            choice: AcceptanceChoice::ALL[i],
            log_prob,
        }
    });
    let mut session = UserSession::new(profile, &env.user)?;
    let opening = session.open(&mut rng).levels;
    let mut estimate = StateEstimate::from_observation(opening);
    let mut memory = DialogueMemory::default();
    let mut turns = Vec::new();
    let mut transcript = Vec::new();
    loop {
        let flags = memory.flags();
        let sample = {
            let view = AgentView {
                estimate: &estimate,
                flags,
                memory: &memory,
                transcript: &transcript,
                session: Some(&session),
            };
            agent.act(&view, &mut rng)?
        };
        let state = session.state();
        let mut reply = session.step(sample.action, &mut rng)?;
        if turns.is_empty() {
            match user_override.map(|o| o.choice) {
                Some(AcceptanceChoice::Accept) => {
                    reply.outcome = DialogueOutcome::Success;
                    reply.token = UserToken::Agree;
                }
                Some(AcceptanceChoice::Reject) => {
                    reply.outcome = DialogueOutcome::Refusal;
                    reply.token = UserToken::Refuse;
                }
                _ => {}
            }
        }
        turns.push(Turn {
            state,
            estimate: estimate.levels,
            flags,
            action: sample.action,
            log_prob: sample.log_prob,
            token: reply.token,
            observed: reply.observation.levels,
        });
        if reply.outcome.is_terminal() {
            return Ok(Trajectory {
                profile,
                stream,
                opening,
                turns,
                outcome: reply.outcome,
                final_state: session.state(),
                user_override,
            });
        }
        memory.observe(sample.action, reply.token);
        transcript.push((sample.action, reply.token));
        estimate = estimate.update(reply.observation.levels);
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Trajectories and metrics of a grid evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricBundle,
    pub trajectories: Vec<Trajectory>,
}

impl Evaluation {
    /// Completion rate per initial state index.
    pub fn per_state_cr(&self) -> Vec<f64> {
        let mut counts = vec![(0usize, 0usize); STATE_COUNT];
        for t in &self.trajectories {
            let c = &mut counts[t.initial_state().index()];
            c.0 += (t.outcome == DialogueOutcome::Success) as usize;
            c.1 += 1;
        }
        counts
            .into_iter()
            .map(|(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
            .collect()
    }
}

/// Runs `reps` dialogues from every one of the 120 initial states with
/// uniformly drawn consistent trait sets, on the evaluation streams of `root`.
pub fn evaluate(
    agent: &dyn Agent,
    env: &Environment,
    reps: usize,
    root: RootSeed,
    library: &TraitLibrary,
) -> Result<Evaluation> {
    if reps == 0 {
        return Err(Error::contract("evaluation needs at least one repetition per state"));
    }
    let total = STATE_COUNT * reps;
    let trajectories = (0..total)
        .into_par_iter()
        .map(|i| {
            let state = UserState::from_index(i / reps)?;
            let mut trait_rng = root.stream(StreamId::new(Domain::Evaluation, 1, i as u32));
            let profile = library.random_profile(state, &mut trait_rng);
            run_dialogue(agent, profile, env, root, StreamId::new(Domain::Evaluation, 0, i as u32))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        metrics: metrics::compute(&trajectories)?,
        trajectories,
    })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub dialogues: usize,
    pub batch_cr: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
    pub user_grad_norm: f64,
    /// Visited states per class after this iteration: too easy, ideal, too difficult.
    pub class_counts: [usize; 3],
    pub sampled_states: Vec<usize>,
    pub eval_cr: Option<f64>,
}

impl IterationReport {
    pub const CSV_HEADER: &'static str = "iteration,dialogues,batch_cr,mean_reward,mean_abs_advantage,grad_norm,user_grad_norm,too_easy,ideal,too_difficult,eval_cr";

    pub fn csv_row(&self) -> String {
        let eval = self.eval_cr.map(|c| format!("{c:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.9},{:.9},{},{},{},{eval}",
            self.iteration,
            self.dialogues,
            self.batch_cr,
            self.mean_reward,
            self.mean_abs_advantage,
            self.grad_norm,
            self.user_grad_norm,
            self.class_counts[0],
            self.class_counts[1],
            self.class_counts[2],
        )
    }
}

/// Output of one iteration: the report plus the rollouts, grouped by profile.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub report: IterationReport,
    pub groups: Vec<Vec<Trajectory>>,
}

/// Loop state carried across iterations.
pub struct Arena {
    config: ArenaConfig,
    env_user: UserModelConfig,
    library: TraitLibrary,
    root: RootSeed,
    policy: PolicyParams,
    stats: CompletionStats,
    adversary: Option<UserAdversary>,
    iteration: u32,
    pool: rayon::ThreadPool,
    best_eval_cr: Option<f64>,
    stale_evals: u32,
}

impl Arena {
    pub fn new(config: ArenaConfig) -> Result<Self> {
        config.validate()?;
        let env_user = config.user_model()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        Ok(Self {
            library: TraitLibrary::new(config.n_max),
            root: RootSeed(config.seed),
            policy: PolicyParams::zeros(),
            stats: CompletionStats::new(),
            adversary: config.train_urm.then(|| UserAdversary::new(config.urm_follow_logit)),
            iteration: 0,
            env_user,
            config,
            pool,
            best_eval_cr: None,
            stale_evals: 0,
        })
    }

    pub fn config(&self) -> &ArenaConfig {
        &self.config
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: PolicyParams) {
        self.policy = policy;
    }

    pub fn stats(&self) -> &CompletionStats {
        &self.stats
    }

    pub fn adversary(&self) -> Option<&UserAdversary> {
        self.adversary.as_ref()
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn library(&self) -> &TraitLibrary {
        &self.library
    }

    pub fn root(&self) -> RootSeed {
        self.root
    }

    /// The environment rollouts currently run against.
    pub fn environment(&self) -> Environment {
        Environment {
            user: self.env_user.clone(),
            acceptance: self.adversary.as_ref().map(UserAdversary::acceptance_table),
        }
    }

    pub fn agent(&self) -> Box<dyn Agent + '_> {
        agent_for(self.config.agent, &self.policy)
    }

    /// Whether periodic evaluation has plateaued.
    pub fn should_stop(&self) -> bool {
        self.config.early_stop_patience > 0 && self.stale_evals >= self.config.early_stop_patience
    }

    fn sample_profiles(&self) -> Result<Vec<UserProfile>> {
        let mut rng = self.root.stream(StreamId::sampling(self.iteration));
        let b = self.config.batch_size;
        if let Some(adv) = &self.adversary {
            let weights = adv.state_table().probs(0);
            sample_from_state_weights(&weights, b, &self.library, &mut rng)
        } else if self.config.disable_profile_sampling {
            sample_uniform_profiles(b, &mut rng, &self.library)
        } else {
            sample_batch(&self.stats, b, &mut rng, &self.library)
        }
    }

    pub fn train_iteration(&mut self) -> Result<IterationOutput> {
        let it = self.iteration;
        let g = self.config.group_size;

        // Phase 1
        let profiles = self.sample_profiles()?;

        // Phase 2
        let env = self.environment();
        let agent = self.agent();
        let root = self.root;
        let flat: Vec<Trajectory> = self.pool.install(|| {
            (0..profiles.len() * g)
                .into_par_iter()
                .map(|r| run_dialogue(agent.as_ref(), profiles[r / g], &env, root, StreamId::rollout(it, r as u32)))
                .collect::<Result<Vec<_>>>()
        })?;
        drop(agent);
        let groups: Vec<Vec<Trajectory>> = flat.chunks(g).map(<[Trajectory]>::to_vec).collect();

        // Phase 3
        let mut rewarded = Vec::with_capacity(groups.len());
        for group in &groups {
            let rewards = group.iter().map(|t| shaped_reward(t, self.config.shaping_lambda)).collect::<Result<Vec<_>>>()?;
            rewarded.push(RewardedGroup::new(rewards));
        }
        let mut grad_norm = 0.0;
        if self.config.agent == AgentKind::Learner {
            let steps: Vec<Vec<PolicyStep>> = flat.iter().map(Trajectory::policy_steps).collect();
            let advantages = rewarded.iter().flat_map(|r| r.advantages.iter().copied());
            let grad = grpo::policy_gradient(
                self.policy.table(),
                advantages.zip(steps.iter().map(Vec::as_slice)),
            )?;
            grad_norm = grpo::l2_norm(&grad);
            grpo::apply_update(self.policy.table_mut(), &grad, self.config.lr)?;
        }
        let user_grad_norm = match self.adversary.take() {
            Some(mut adv) => {
                let norm = update_adversary(&mut adv, &profiles, &groups, &rewarded, self.config.lr);
                self.adversary = Some(adv);
                norm?
            }
            None => 0.0,
        };

        // Phase 4
        if !self.config.disable_mistake_analysis {
            for t in &flat {
                self.stats.update(t.initial_state().index(), t.outcome)?;
            }
        }

        let dialogues = flat.len();
        let successes = flat.iter().filter(|t| t.outcome == DialogueOutcome::Success).count();
        let all_rewards: Vec<f64> = rewarded.iter().flat_map(|r| r.rewards.iter().copied()).collect();
        let abs_adv: f64 = rewarded.iter().flat_map(|r| r.advantages.iter()).map(|a| a.abs()).sum();
        self.iteration += 1;

        let mut eval_cr = None;
        if self.config.eval_every > 0 && self.iteration.is_multiple_of(self.config.eval_every) {
            let cr = self.evaluate(self.config.eval_reps)?.metrics.cr.mean;
            match self.best_eval_cr {
                Some(best) if cr < best + self.config.early_stop_min_delta => self.stale_evals += 1,
                _ => {
                    self.best_eval_cr = Some(cr);
                    self.stale_evals = 0;
                }
            }
            eval_cr = Some(cr);
        }

        Ok(IterationOutput {
            report: IterationReport {
                iteration: it,
                dialogues,
                batch_cr: successes as f64 / dialogues as f64,
                mean_reward: all_rewards.iter().sum::<f64>() / dialogues as f64,
                mean_abs_advantage: abs_adv / dialogues as f64,
                grad_norm,
                user_grad_norm,
                class_counts: self.stats.class_counts(),
                sampled_states: profiles.iter().map(|p| p.initial.index()).collect(),
                eval_cr,
            },
            groups,
        })
    }

    /// Grid evaluation of the current agent against the current environment.
    pub fn evaluate(&self, reps: usize) -> Result<Evaluation> {
        let env = self.environment();
        let agent = self.agent();
        self.pool
            .install(|| evaluate(agent.as_ref(), &env, reps, self.root, &self.library))
    }
}

/// Task reward plus `lambda` times the summed level change.
pub fn shaped_reward(t: &Trajectory, lambda: f64) -> Result<f64> {
    let task = grpo::task_reward(t.outcome)?;
    if lambda == 0.0 {
        return Ok(task);
    }
    let gain: i32 = t.state_change().iter().sum();
    Ok(task + lambda * gain as f64)
}

pub fn agent_for(kind: AgentKind, policy: &PolicyParams) -> Box<dyn Agent + '_> {
    match kind {
        AgentKind::Learner => Box::new(policy),
        AgentKind::Expert => Box::new(scripted_agent(Skill::Expert)),
        AgentKind::Mediocre => Box::new(scripted_agent(Skill::Mediocre)),
        AgentKind::Random => Box::new(scripted_agent(Skill::Random)),
    }
}

impl Agent for &PolicyParams {
    fn act(&self, view: &AgentView<'_, '_>, rng: &mut SimRng) -> Result<crate::agent::ActionSample> {
        (**self).act(view, rng)
    }

    fn params(&self) -> Option<&PolicyParams> {
        Some(self)
    }
}

/// Group-relative update of the user side toward agent failure. The user's
/// reward is `1 - R_task`, so its advantages are the agent's negated. The
/// state head is scored per group against the batch mean.
fn update_adversary(
    adv: &mut UserAdversary,
    profiles: &[UserProfile],
    groups: &[Vec<Trajectory>],
    rewarded: &[RewardedGroup],
    lr: f64,
) -> Result<f64> {
    let acceptance = adv.acceptance_table();
    let mut accept_steps = Vec::new();
    for (group, r) in groups.iter().zip(rewarded) {
        for (t, a) in group.iter().zip(&r.advantages) {
            let o = t
                .user_override
                .ok_or_else(|| Error::contract("trained user without an override record"))?;
            let choice = AcceptanceChoice::ALL.iter().position(|c| *c == o.choice).expect("known choice");
            accept_steps.push((-a, [PolicyStep { row: 0, action: choice, log_prob: o.log_prob }]));
        }
    }
    let accept_grad = grpo::policy_gradient(&acceptance, accept_steps.iter().map(|(a, s)| (*a, &s[..])))?;

    let states = adv.state_table();
    let log_probs = crate::agent::log_softmax(states.row(0));
    let group_means: Vec<f64> = rewarded
        .iter()
        .map(|r| 1.0 - r.rewards.iter().sum::<f64>() / r.rewards.len() as f64)
        .collect();
    let state_adv = grpo::group_advantages(&group_means);
    let state_steps: Vec<[PolicyStep; 1]> = profiles
        .iter()
        .map(|p| {
            let s = p.initial.index();
            [PolicyStep { row: 0, action: s, log_prob: log_probs[s] }]
        })
        .collect();
    let state_grad = grpo::policy_gradient(
        &states,
        state_adv.iter().copied().zip(state_steps.iter().map(|s| &s[..])),
    )?;

    let mut accept_table = acceptance;
    grpo::apply_update(&mut accept_table, &accept_grad, lr)?;
    let mut state_table = states;
    grpo::apply_update(&mut state_table, &state_grad, lr)?;
    adv.acceptance_logits = accept_table.logits().to_vec();
    adv.state_logits = state_table.logits().to_vec();
    Ok((grpo::l2_norm(&accept_grad).powi(2) + grpo::l2_norm(&state_grad).powi(2)).sqrt())
}
