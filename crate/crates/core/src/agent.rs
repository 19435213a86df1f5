//! The service agent: a smoothing state estimator, a tabular softmax policy
//! over the ten-action vocabulary, and scripted calibration agents.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::state_space::{Dimension, UserState, STATE_COUNT};
use crate::user_model::{AgentAction, UserSession, UserToken, ACTION_COUNT};

/// Smoothing factor toward each new observation.
pub const ESTIMATE_BETA: f64 = 0.6;
pub const FLAG_COMBINATIONS: usize = 16;
/// Number of policy rows: estimated state x context flags.
pub const POLICY_ROWS: usize = STATE_COUNT * FLAG_COMBINATIONS;

/// Point estimate of the user state plus a per-dimension confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub levels: UserState,
    pub confidence: [f64; 3],
}

impl StateEstimate {
    /// First estimate, taken directly from the opening observation.
    pub fn from_observation(levels: UserState) -> Self {
        Self {
            levels,
            confidence: [0.0; 3],
        }
    }

    pub fn update(self, observed: UserState) -> Self {
        update_estimate(self, observed)
    }
}

/// Exponential smoothing toward the observation, rounded to the nearest
/// grid level. Confidence moves toward 1 when the observation agrees with
/// the previous estimate and toward 0 otherwise.
pub fn update_estimate(est: StateEstimate, observed: UserState) -> StateEstimate {
    let mut levels = est.levels;
    let mut confidence = est.confidence;
    for (k, dim) in Dimension::ALL.into_iter().enumerate() {
        let prev = est.levels.level(dim) as f64;
        let obs = observed.level(dim) as f64;
        let smoothed = prev + ESTIMATE_BETA * (obs - prev);
        levels = levels.with_level(dim, smoothed.round() as i32);
        let agree = if obs == prev { 1.0 } else { 0.0 };
        confidence[k] = (1.0 - ESTIMATE_BETA) * confidence[k] + ESTIMATE_BETA * agree;
    }
    StateEstimate { levels, confidence }
}

/// Four history bits the policy conditions on besides the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ContextFlags(pub u8);

impl ContextFlags {
    pub const OFFER_PRESENTED: u8 = 1;
    pub const OBJECTION_PENDING: u8 = 2;
    pub const AI_QUESTION_PENDING: u8 = 4;
    pub const LATE: u8 = 8;

    pub fn bits(self) -> usize {
        self.0 as usize
    }

    pub fn has(self, bit: u8) -> bool {
        self.0 & bit != 0
    }
}

/// Agent-side bookkeeping of what the user has said so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DialogueMemory {
    pub turn: u32,
    pub offer_presented: bool,
    pub cost_pending: bool,
    pub ai_pending: bool,
    pub last_token: Option<UserToken>,
}

/// Turn after which the `LATE` flag is set.
const LATE_AFTER_TURN: u32 = 7;

impl DialogueMemory {
    pub fn observe(&mut self, action: AgentAction, token: UserToken) {
        use UserToken::*;
        self.turn += 1;
        let heard = token != Distracted;
        if action == AgentAction::PresentOffer && !matches!(token, Objection | Angry | Distracted) {
            self.offer_presented = true;
        }
        if action == AgentAction::AddressCostConcern && heard {
            self.cost_pending = false;
        }
        if action == AgentAction::IdentityDefense && heard {
            self.ai_pending = false;
        }
        match token {
            CostObjection => self.cost_pending = true,
            AiQuestion => self.ai_pending = true,
            _ => {}
        }
        self.last_token = Some(token);
    }

    pub fn flags(&self) -> ContextFlags {
        let mut bits = 0;
        if self.offer_presented {
            bits |= ContextFlags::OFFER_PRESENTED;
        }
        if self.cost_pending || self.last_token.is_some_and(UserToken::is_objection) {
            bits |= ContextFlags::OBJECTION_PENDING;
        }
        if self.ai_pending {
            bits |= ContextFlags::AI_QUESTION_PENDING;
        }
        if self.turn > LATE_AFTER_TURN {
            bits |= ContextFlags::LATE;
        }
        ContextFlags(bits)
    }
}

// ---------------------------------------------------------------------------
// Softmax tables

/// Row-wise softmax policy over a table of logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmax {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
}

impl TabularSoftmax {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            logits: vec![0.0; rows * cols],
        }
    }

    pub fn from_logits(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != rows * cols {
            return Err(Error::contract(format!(
                "expected {} logits, got {}",
                rows * cols,
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i}")));
        }
        Ok(Self { rows, cols, logits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.logits[r * self.cols..(r + 1) * self.cols]
    }

    /// Overflow-safe softmax of one row.
    pub fn probs(&self, r: usize) -> Vec<f64> {
        softmax(self.row(r))
    }

    pub fn log_prob(&self, r: usize, a: usize) -> f64 {
        log_softmax(self.row(r))[a]
    }

    pub fn sample(&self, r: usize, rng: &mut impl Rng) -> (usize, f64, Vec<f64>) {
        let probs = self.probs(r);
        let a = sample_index(&probs, rng);
        let lp = self.log_prob(r, a);
        (a, lp, probs)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final partial sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

// ---------------------------------------------------------------------------
// The trainable policy

/// Logit table indexed by (estimated-state bucket, context flags, action).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    table: TabularSoftmax,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

const CHECKPOINT_MAGIC: &str = "sead-policy";
const CHECKPOINT_VERSION: u32 = 1;

pub fn policy_row(bucket: usize, flags: ContextFlags) -> usize {
    bucket * FLAG_COMBINATIONS + flags.bits()
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            table: TabularSoftmax::zeros(POLICY_ROWS, ACTION_COUNT),
        }
    }

    pub fn table(&self) -> &TabularSoftmax {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut TabularSoftmax {
        &mut self.table
    }

    pub fn logit(&self, bucket: usize, flags: ContextFlags, action: AgentAction) -> f64 {
        self.table.row(policy_row(bucket, flags))[action.index()]
    }

    pub fn set_logit(&mut self, bucket: usize, flags: ContextFlags, action: AgentAction, value: f64) {
        self.table.row_mut(policy_row(bucket, flags))[action.index()] = value;
    }

    /// Header line, then little-endian f64 logits in row-major order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} rows={} cols={}",
            self.table.rows, self.table.cols
        )?;
        for x in &self.table.logits {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("checkpoint has no header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Parse(e.to_string()))?;
        let expected = format!(
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} rows={POLICY_ROWS} cols={ACTION_COUNT}"
        );
        if header != expected {
            return Err(Error::Parse(format!("unsupported checkpoint header {header:?}")));
        }
        let body = &bytes[nl + 1..];
        if body.len() != POLICY_ROWS * ACTION_COUNT * 8 {
            return Err(Error::Parse(format!("checkpoint body has {} bytes", body.len())));
        }
        let logits = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            table: TabularSoftmax::from_logits(POLICY_ROWS, ACTION_COUNT, logits)?,
        })
    }
}

/// One drawn action with the distribution it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub action: AgentAction,
    pub log_prob: f64,
    pub probs: [f64; ACTION_COUNT],
}

impl ActionSample {
    fn from_probs(probs: [f64; ACTION_COUNT], action: AgentAction) -> Self {
        Self {
            action,
            log_prob: probs[action.index()].ln(),
            probs,
        }
    }
}

pub fn select_action(
    params: &PolicyParams,
    est: &StateEstimate,
    flags: ContextFlags,
    rng: &mut impl Rng,
) -> ActionSample {
    let row = policy_row(est.levels.index(), flags);
    let (a, log_prob, probs) = params.table.sample(row, rng);
    ActionSample {
        action: AgentAction::ALL[a],
        log_prob,
        probs: probs.try_into().expect("ten actions"),
    }
}

// ---------------------------------------------------------------------------
// Agents

/// Everything an agent may look at when choosing its next action. Scripted
/// agents additionally peek at the live session.
pub struct AgentView<'a, 's> {
    pub estimate: &'a StateEstimate,
    pub flags: ContextFlags,
    pub memory: &'a DialogueMemory,
    /// Completed exchanges so far.
    pub transcript: &'a [(AgentAction, UserToken)],
    pub session: Option<&'a UserSession<'s>>,
}

pub trait Agent: Sync {
    fn act(&self, view: &AgentView<'_, '_>, rng: &mut SimRng) -> Result<ActionSample>;

    /// Trainable agents expose their parameters for the optimizer.
    fn params(&self) -> Option<&PolicyParams> {
        None
    }
}

impl Agent for PolicyParams {
    fn act(&self, view: &AgentView<'_, '_>, rng: &mut SimRng) -> Result<ActionSample> {
        Ok(select_action(self, view.estimate, view.flags, rng))
    }

    fn params(&self) -> Option<&PolicyParams> {
        Some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Expert,
    Mediocre,
    Random,
}

/// Calibration opponent with oracle access to the true user state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedAgent {
    pub skill: Skill,
}

pub fn scripted_agent(skill: Skill) -> ScriptedAgent {
    ScriptedAgent { skill }
}

/// Best action under the default dynamics for the session's true state.
pub fn expert_action(sess: &UserSession<'_>) -> AgentAction {
    use crate::behavior::BehaviorTrait;
    use AgentAction::*;

    let s = sess.state();
    let flags = sess.flags();
    let cfg = sess.config();
    if sess.close_would_succeed() {
        return CloseDeal;
    }
    if flags.cost_concern.is_pending() {
        return AddressCostConcern;
    }
    if flags.ai_question.is_pending() {
        return IdentityDefense;
    }
    if s.emotion() == 0 {
        return if sess.turn() == 0 { Greet } else { Apologize };
    }
    if s.cooperation() < cfg.close_min_cooperation {
        if sess.last_token().is_some_and(UserToken::is_objection) {
            return HandleObjection;
        }
        if !flags.asked_needs_used {
            return AskNeeds;
        }
        // The first offer to a cost-conscious user raises a concern whose
        // resolution is worth a cooperation level.
        if sess.profile().has(BehaviorTrait::CostConcern)
            && flags.cost_concern == crate::user_model::Concern::Unraised
            && s.cooperation() >= 2
        {
            return PresentOffer;
        }
        // Trade a trust level for an objection that can then be handled.
        return IdentityDefense;
    }
    if !flags.offer_presented {
        return PresentOffer;
    }
    if s.trust() < cfg.close_min_trust {
        return ProvideEvidence;
    }
    CloseDeal
}

impl ScriptedAgent {
    pub fn distribution(&self, sess: &UserSession<'_>) -> [f64; ACTION_COUNT] {
        let uniform = 1.0 / ACTION_COUNT as f64;
        let mut probs = [uniform; ACTION_COUNT];
        match self.skill {
            Skill::Random => {}
            Skill::Expert => {
                probs = [0.0; ACTION_COUNT];
                probs[expert_action(sess).index()] = 1.0;
            }
            Skill::Mediocre => {
                for p in probs.iter_mut() {
                    *p = 0.5 * uniform;
                }
                probs[expert_action(sess).index()] += 0.5;
            }
        }
        probs
    }
}

impl Agent for ScriptedAgent {
    fn act(&self, view: &AgentView<'_, '_>, rng: &mut SimRng) -> Result<ActionSample> {
        let probs = match (self.skill, view.session) {
            (Skill::Random, _) => [1.0 / ACTION_COUNT as f64; ACTION_COUNT],
            (_, Some(sess)) => self.distribution(sess),
            (_, None) => {
                return Err(Error::contract("scripted agent needs access to the user session"))
            }
        };
        let action = AgentAction::ALL[sample_index(&probs, rng)];
        Ok(ActionSample::from_probs(probs, action))
    }
}
