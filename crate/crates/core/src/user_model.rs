//! The frozen user role-play model.
//!
//! A [`UserSession`] holds the hidden [`UserState`] of one simulated user and
//! advances it one agent action at a time. State changes come from a
//! data-driven [`EffectTable`]; behavior traits modulate the table, a small
//! drift term adds irrationality, and the agent only ever sees a noisy
//! [`Observation`] plus a symbolic [`UserToken`].
//!
//! Success is reachable through exactly one path: `CloseDeal` after a
//! presented offer with cooperation and trust above the closing thresholds
//! and no pending cost concern.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{check_consistency, BehaviorTrait, UserProfile};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::state_space::{Dimension, StateDelta, UserState};

macro_rules! vocabulary {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        /// Accepts both the snake_case log form and the PascalCase form.
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text | stringify!($variant) => Ok($name::$variant),)+
                    _ => Err(Error::Parse(format!(
                        concat!("{:?} is not in the ", stringify!($name), " vocabulary"),
                        s
                    ))),
                }
            }
        }
    };
}

vocabulary! {
    /// The agent's closed action vocabulary.
    AgentAction {
        Greet => "greet",
        AskNeeds => "ask_needs",
        PresentOffer => "present_offer",
        BuildRapport => "build_rapport",
        ProvideEvidence => "provide_evidence",
        AddressCostConcern => "address_cost_concern",
        IdentityDefense => "identity_defense",
        HandleObjection => "handle_objection",
        Apologize => "apologize",
        CloseDeal => "close_deal",
    }
}

vocabulary! {
    /// Symbolic user utterances. `Agree` and `Refuse` only close a dialogue.
    UserToken {
        Positive => "positive",
        Neutral => "neutral",
        Objection => "objection",
        CostObjection => "cost_objection",
        AiQuestion => "ai_question",
        Distracted => "distracted",
        Angry => "angry",
        Agree => "agree",
        Refuse => "refuse",
    }
}

pub const ACTION_COUNT: usize = 10;

impl UserToken {
    pub fn is_objection(self) -> bool {
        matches!(self, UserToken::Objection | UserToken::CostObjection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueOutcome {
    Success,
    Refusal,
    Timeout,
    Ongoing,
}

impl DialogueOutcome {
    pub fn is_terminal(self) -> bool {
        self != DialogueOutcome::Ongoing
    }
}

/// Noisy readout of the hidden state together with the user's token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub levels: UserState,
    pub token: UserToken,
}

/// Lifecycle of a trait-driven concern: raised may become cleared, never back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concern {
    #[default]
    Unraised,
    Raised,
    Cleared,
}

impl Concern {
    pub fn is_pending(self) -> bool {
        self == Concern::Raised
    }

    fn raise(&mut self) -> bool {
        if *self == Concern::Unraised {
            *self = Concern::Raised;
            true
        } else {
            false
        }
    }

    fn clear(&mut self) {
        if *self == Concern::Raised {
            *self = Concern::Cleared;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionFlags {
    pub offer_presented: bool,
    pub cost_concern: Concern,
    pub ai_question: Concern,
    pub asked_needs_used: bool,
}

// ---------------------------------------------------------------------------
// Effect table

/// Guard on an effect-table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    FirstTurn,
    LaterTurn,
    EmotionAtMost { level: u8 },
    EmotionAtLeast { level: u8 },
    CooperationAtLeast { level: u8 },
    FirstUse,
    CostConcernPending,
    AiQuestionPending,
    PreviousObjection,
}

/// Flag change triggered by a matching row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagEffect {
    SetOfferPresented,
    MarkNeedsAsked,
    ClearCostConcern,
    ClearAiQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowClass {
    /// Right action with its precondition met.
    Helpful,
    /// No effect either way.
    Neutral,
    /// Wrong action for the situation.
    Misuse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectRow {
    pub action: AgentAction,
    #[serde(default)]
    pub when: Vec<Condition>,
    #[serde(default)]
    pub delta: StateDelta,
    #[serde(default)]
    pub effect: Option<FlagEffect>,
    pub class: RowClass,
}

/// Ordered rows; the first row for an action whose guards all hold applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
}

/// What a guard is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct RowContext {
    pub state: UserState,
    pub flags: SessionFlags,
    /// 1-based number of the turn being played.
    pub turn: u32,
    pub previous_token: Option<UserToken>,
}

impl Condition {
    pub fn holds(self, ctx: &RowContext) -> bool {
        match self {
            Condition::FirstTurn => ctx.turn == 1,
            Condition::LaterTurn => ctx.turn > 1,
            Condition::EmotionAtMost { level } => ctx.state.emotion() <= level,
            Condition::EmotionAtLeast { level } => ctx.state.emotion() >= level,
            Condition::CooperationAtLeast { level } => ctx.state.cooperation() >= level,
            Condition::FirstUse => !ctx.flags.asked_needs_used,
            Condition::CostConcernPending => ctx.flags.cost_concern.is_pending(),
            Condition::AiQuestionPending => ctx.flags.ai_question.is_pending(),
            Condition::PreviousObjection => ctx.previous_token.is_some_and(UserToken::is_objection),
        }
    }
}

fn row(
    action: AgentAction,
    when: &[Condition],
    delta: (i8, i8, i8),
    effect: Option<FlagEffect>,
    class: RowClass,
) -> EffectRow {
    EffectRow {
        action,
        when: when.to_vec(),
        delta: StateDelta::new(delta.0, delta.1, delta.2),
        effect,
        class,
    }
}

impl Default for EffectTable {
    fn default() -> Self {
        use AgentAction::*;
        use Condition::*;
        use FlagEffect::*;
        use RowClass::*;
        EffectTable {
            rows: vec![
                row(Greet, &[FirstTurn, EmotionAtMost { level: 1 }], (0, 1, 0), None, Helpful),
                row(Greet, &[FirstTurn], (0, 0, 0), None, Neutral),
                row(Greet, &[], (-1, 0, 0), None, Misuse),
                row(AskNeeds, &[FirstUse], (1, 0, 0), Some(MarkNeedsAsked), Helpful),
                row(AskNeeds, &[], (0, 0, 0), None, Neutral),
                row(BuildRapport, &[], (0, 1, 0), None, Helpful),
                row(ProvideEvidence, &[EmotionAtLeast { level: 1 }], (0, 0, 1), None, Helpful),
                row(ProvideEvidence, &[], (0, 0, 0), None, Neutral),
                row(PresentOffer, &[CooperationAtLeast { level: 2 }], (0, 0, 0), Some(SetOfferPresented), Helpful),
                row(PresentOffer, &[], (-1, 0, 0), None, Misuse),
                row(AddressCostConcern, &[CostConcernPending], (1, 0, 0), Some(ClearCostConcern), Helpful),
                row(AddressCostConcern, &[], (0, 0, 0), None, Neutral),
                row(IdentityDefense, &[AiQuestionPending], (0, 0, 1), Some(ClearAiQuestion), Helpful),
                row(IdentityDefense, &[], (0, 0, -1), None, Misuse),
                row(HandleObjection, &[PreviousObjection], (1, 0, 0), None, Helpful),
                row(HandleObjection, &[], (0, 0, 0), None, Neutral),
                row(Apologize, &[EmotionAtMost { level: 0 }], (0, 1, 0), None, Helpful),
                row(Apologize, &[], (0, 0, 0), None, Neutral),
                // A successful close is decided by the outcome rule before
                // the table is consulted; this row is the premature close.
                row(CloseDeal, &[], (-1, 0, 0), None, Misuse),
            ],
        }
    }
}

impl EffectTable {
    pub fn lookup(&self, action: AgentAction, ctx: &RowContext) -> Option<&EffectRow> {
        self.rows
            .iter()
            .filter(|r| r.action == action)
            .find(|r| r.when.iter().all(|c| c.holds(ctx)))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("effect table serializes")
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Dynamics parameters of the simulated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModelConfig {
    pub effects: EffectTable,
    pub t_max: u32,
    pub busy_t_max: u32,
    /// Probability per turn that one random dimension drifts down a level.
    pub drift_prob: f64,
    pub lapse_prob: f64,
    /// Observation noise: each dimension is misreported by one level with
    /// this probability.
    pub epsilon: f64,
    /// AI-skeptic users raise their question on a turn in `1..=this`.
    pub ai_question_latest_turn: u32,
    /// Hang-ups are only checked after this many turns.
    pub refusal_after_turn: u32,
    pub close_min_cooperation: u8,
    pub close_min_trust: u8,
    /// Disables drift and attention lapses.
    pub deterministic: bool,
}

impl Default for UserModelConfig {
    fn default() -> Self {
        Self {
            effects: EffectTable::default(),
            t_max: 15,
            busy_t_max: 10,
            drift_prob: 0.1,
            lapse_prob: 0.15,
            epsilon: 0.2,
            ai_question_latest_turn: 3,
            refusal_after_turn: 2,
            close_min_cooperation: 3,
            close_min_trust: 4,
            deterministic: false,
        }
    }
}

impl UserModelConfig {
    pub fn deterministic() -> Self {
        Self {
            deterministic: true,
            ..Self::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Sessions

/// What one user turn produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserTurn {
    pub token: UserToken,
    pub observation: Observation,
    pub outcome: DialogueOutcome,
}

/// One simulated user for the duration of one dialogue.
#[derive(Debug, Clone)]
pub struct UserSession<'c> {
    config: &'c UserModelConfig,
    profile: UserProfile,
    state: UserState,
    turn: u32,
    flags: SessionFlags,
    last_token: Option<UserToken>,
    outcome: DialogueOutcome,
    turn_cap: u32,
    ai_question_turn: u32,
}

pub fn init_session(profile: UserProfile, config: &UserModelConfig) -> Result<UserSession<'_>> {
    UserSession::new(profile, config)
}

impl<'c> UserSession<'c> {
    pub fn new(profile: UserProfile, config: &'c UserModelConfig) -> Result<Self> {
        check_consistency(&profile).map_err(|v| {
            Error::InconsistentProfile(v.iter().map(|x| x.message.to_string()).collect())
        })?;
        let turn_cap = if profile.has(BehaviorTrait::Busy) {
            config.t_max.min(config.busy_t_max)
        } else {
            config.t_max
        };
        let window = config.ai_question_latest_turn.max(1) as u64;
        Ok(Self {
            config,
            profile,
            state: profile.initial,
            turn: 0,
            flags: SessionFlags::default(),
            last_token: None,
            outcome: DialogueOutcome::Ongoing,
            turn_cap,
            ai_question_turn: 1 + (profile.profile_id % window) as u32,
        })
    }

    pub fn profile(&self) -> &UserProfile {
        &self.profile
    }

    pub fn state(&self) -> UserState {
        self.state
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn flags(&self) -> SessionFlags {
        self.flags
    }

    pub fn last_token(&self) -> Option<UserToken> {
        self.last_token
    }

    pub fn outcome(&self) -> DialogueOutcome {
        self.outcome
    }

    pub fn turn_cap(&self) -> u32 {
        self.turn_cap
    }

    pub fn config(&self) -> &UserModelConfig {
        self.config
    }

    /// Turn on which an AI-skeptic user raises their question.
    pub fn ai_question_turn(&self) -> u32 {
        self.ai_question_turn
    }

    pub fn close_would_succeed(&self) -> bool {
        self.flags.offer_presented
            && self.state.cooperation() >= self.config.close_min_cooperation
            && self.state.trust() >= self.config.close_min_trust
            && !self.flags.cost_concern.is_pending()
    }

    /// Opening observation before the agent's first action.
    pub fn open(&self, rng: &mut SimRng) -> Observation {
        Observation {
            levels: observe_state(self.state, self.config.epsilon, rng),
            token: UserToken::Neutral,
        }
    }

    pub fn step(&mut self, action: AgentAction, rng: &mut SimRng) -> Result<UserTurn> {
        if self.outcome.is_terminal() {
            return Err(Error::contract("step on a closed session"));
        }
        if self.turn >= self.turn_cap {
            return Err(Error::contract("step past the turn cap"));
        }
        let cfg = self.config;
        let turn = self.turn + 1;

        let lapse = !cfg.deterministic
            && self.profile.has(BehaviorTrait::AttentionLapse)
            && rng.gen_bool(cfg.lapse_prob);

        if action == AgentAction::CloseDeal && !lapse && self.close_would_succeed() {
            self.turn = turn;
            return Ok(self.close(DialogueOutcome::Success, UserToken::Agree, rng));
        }

        let mut nominal = StateDelta::ZERO;
        let mut raised_cost = false;
        if !lapse {
            let ctx = RowContext {
                state: self.state,
                flags: self.flags,
                turn,
                previous_token: self.last_token,
            };
            if let Some(row) = cfg.effects.lookup(action, &ctx) {
                nominal = row.delta;
                match row.effect {
                    Some(FlagEffect::SetOfferPresented) => self.flags.offer_presented = true,
                    Some(FlagEffect::MarkNeedsAsked) => self.flags.asked_needs_used = true,
                    Some(FlagEffect::ClearCostConcern) => self.flags.cost_concern.clear(),
                    Some(FlagEffect::ClearAiQuestion) => self.flags.ai_question.clear(),
                    None => {}
                }
            }
            if action == AgentAction::ProvideEvidence
                && self.flags.ai_question.is_pending()
                && nominal.dtr > 0
            {
                nominal.dtr /= 2;
            }
            if self.profile.has(BehaviorTrait::Irritable) {
                nominal = nominal.amplify_losses();
            }
            if action == AgentAction::PresentOffer && self.profile.has(BehaviorTrait::CostConcern) {
                raised_cost = self.flags.cost_concern.raise();
            }
            self.state = self.state.apply_delta(nominal);
        }

        let raised_ai = self.profile.has(BehaviorTrait::AiSkeptic)
            && turn == self.ai_question_turn
            && self.flags.ai_question.raise();

        if !cfg.deterministic && rng.gen_bool(cfg.drift_prob) {
            let dim = Dimension::ALL[rng.gen_range(0..3)];
            let level = self.state.level(dim) as i32 - 1;
            self.state = self.state.with_level(dim, level);
        }
        self.turn = turn;

        if self.state.cooperation() == 0 && self.state.emotion() == 0 && turn > cfg.refusal_after_turn {
            return Ok(self.close(DialogueOutcome::Refusal, UserToken::Refuse, rng));
        }

        let token = if raised_ai {
            UserToken::AiQuestion
        } else if lapse {
            UserToken::Distracted
        } else if raised_cost {
            UserToken::CostObjection
        } else if nominal.has_negative() {
            if self.state.emotion() == 0 {
                UserToken::Angry
            } else {
                UserToken::Objection
            }
        } else if nominal.has_positive() {
            UserToken::Positive
        } else {
            UserToken::Neutral
        };
        self.last_token = Some(token);
        if turn >= self.turn_cap {
            self.outcome = DialogueOutcome::Timeout;
        }
        Ok(UserTurn {
            token,
            observation: Observation {
                levels: observe_state(self.state, cfg.epsilon, rng),
                token,
            },
            outcome: self.outcome,
        })
    }

    fn close(&mut self, outcome: DialogueOutcome, token: UserToken, rng: &mut SimRng) -> UserTurn {
        self.outcome = outcome;
        self.last_token = Some(token);
        UserTurn {
            token,
            observation: Observation {
                levels: observe_state(self.state, self.config.epsilon, rng),
                token,
            },
            outcome,
        }
    }
}

pub fn step_user(sess: &mut UserSession<'_>, action: AgentAction, rng: &mut SimRng) -> Result<UserTurn> {
    sess.step(action, rng)
}

/// Reports each dimension exactly with probability `1 - epsilon`, otherwise
/// shifted one level up or down (clamped), independently per dimension.
pub fn observe_state(s: UserState, epsilon: f64, rng: &mut impl Rng) -> UserState {
    let mut out = s;
    for dim in Dimension::ALL {
        if rng.gen_bool(epsilon) {
            let shift = if rng.gen_bool(0.5) { 1 } else { -1 };
            out = out.with_level(dim, s.level(dim) as i32 + shift);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{build_profile, TraitSet};
    use crate::rng::{RootSeed, StreamId};
    use crate::state_space::enumerate_states;
    use AgentAction::*;
    use BehaviorTrait::*;

    fn st(c: u8, e: u8, tr: u8) -> UserState {
        UserState::new(c, e, tr).unwrap()
    }

    fn rng(i: u64) -> SimRng {
        RootSeed(42).stream(StreamId::test(i))
    }

    fn session<'c>(cfg: &'c UserModelConfig, s: UserState, traits: &[BehaviorTrait]) -> UserSession<'c> {
        UserSession::new(UserProfile::new(s, traits.iter().copied()), cfg).unwrap()
    }

    #[test]
    fn vocabularies_are_closed() {
        assert_eq!(AgentAction::ALL.len(), ACTION_COUNT);
        assert_eq!(UserToken::ALL.len(), 9);
        for a in AgentAction::ALL {
            assert_eq!(a.name().parse::<AgentAction>().unwrap(), *a);
            assert_eq!(AgentAction::from_index(a.index()), Some(*a));
        }
        assert_eq!("Neutral".parse::<UserToken>().unwrap(), UserToken::Neutral);
        assert!("Maybe".parse::<UserToken>().is_err());
    }

    #[test]
    fn init_examples() {
        let cfg = UserModelConfig::deterministic();
        let s = session(&cfg, st(1, 1, 2), &[CostConcern]);
        assert_eq!(s.state(), st(1, 1, 2));
        assert_eq!(s.turn(), 0);
        assert_eq!(s.flags(), SessionFlags::default());
        assert!(UserState::new(5, 1, 1).is_err());
        let bad = UserProfile::new(st(2, 1, 5), [AiSkeptic]);
        assert!(matches!(UserSession::new(bad, &cfg), Err(Error::InconsistentProfile(_))));

        let mut a = session(&cfg, st(2, 1, 3), &[]);
        let b = a.clone();
        a.step(ProvideEvidence, &mut rng(0)).unwrap();
        assert_eq!(b.state(), st(2, 1, 3));
        assert_ne!(a.state(), b.state());
    }

    #[test]
    fn step_examples() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(1);

        let mut s = session(&cfg, st(2, 1, 3), &[]);
        let out = s.step(ProvideEvidence, &mut r).unwrap();
        assert_eq!(s.state(), st(2, 1, 4));
        assert_eq!(out.outcome, DialogueOutcome::Ongoing);
        assert_eq!(out.token, UserToken::Positive);
        assert_eq!(s.turn(), 1);

        let mut s = session(&cfg, st(3, 2, 4), &[]);
        s.step(PresentOffer, &mut r).unwrap();
        assert!(s.flags().offer_presented);
        let out = s.step(CloseDeal, &mut r).unwrap();
        assert_eq!(out.outcome, DialogueOutcome::Success);
        assert_eq!(out.token, UserToken::Agree);

        let mut s = session(&cfg, st(2, 1, 3), &[]);
        let out = s.step(CloseDeal, &mut r).unwrap();
        assert_eq!(s.state(), st(1, 1, 3));
        assert_eq!(out.outcome, DialogueOutcome::Ongoing);
        assert_eq!(out.token, UserToken::Objection);
    }

    #[test]
    fn closed_session_rejects_steps() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(2);
        let mut s = session(&cfg, st(3, 2, 4), &[]);
        s.step(PresentOffer, &mut r).unwrap();
        s.step(CloseDeal, &mut r).unwrap();
        assert!(matches!(s.step(Greet, &mut r), Err(Error::Contract(_))));
    }

    #[test]
    fn greet_only_helps_on_the_first_turn() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(3);
        let mut s = session(&cfg, st(2, 1, 1), &[]);
        s.step(Greet, &mut r).unwrap();
        assert_eq!(s.state(), st(2, 2, 1));
        s.step(Greet, &mut r).unwrap();
        assert_eq!(s.state(), st(1, 2, 1));
    }

    #[test]
    fn hang_up_after_turn_two() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(4);
        let mut s = session(&cfg, st(2, 0, 3), &[]);
        // Later greets cost cooperation; c reaches 0 on turn 3.
        s.step(AskNeeds, &mut r).unwrap(); // c=3
        assert_eq!(s.step(Greet, &mut r).unwrap().outcome, DialogueOutcome::Ongoing);
        assert_eq!(s.step(Greet, &mut r).unwrap().outcome, DialogueOutcome::Ongoing);
        let out = s.step(Greet, &mut r).unwrap();
        assert_eq!(s.state().cooperation(), 0);
        assert_eq!(out.outcome, DialogueOutcome::Refusal);
        assert_eq!(out.token, UserToken::Refuse);
    }

    #[test]
    fn no_hang_up_in_first_two_turns() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(5);
        let mut s = session(&cfg, st(1, 0, 3), &[]);
        assert_eq!(s.step(Greet, &mut r).unwrap().outcome, DialogueOutcome::Ongoing); // e=1
        let mut s = session(&cfg, st(1, 1, 3), &[]);
        s.step(Greet, &mut r).unwrap(); // e=2
        s.step(Greet, &mut r).unwrap(); // c=0
        assert_eq!(s.state(), st(0, 2, 3));
        let mut s = session(&cfg, st(0, 0, 3), &[]);
        assert_eq!(s.step(AskNeeds, &mut r).unwrap().outcome, DialogueOutcome::Ongoing);
        let mut s = session(&cfg, st(0, 0, 3), &[]);
        assert_eq!(s.step(ProvideEvidence, &mut r).unwrap().outcome, DialogueOutcome::Ongoing);
        assert_eq!(s.step(ProvideEvidence, &mut r).unwrap().outcome, DialogueOutcome::Ongoing);
        assert_eq!(s.step(ProvideEvidence, &mut r).unwrap().outcome, DialogueOutcome::Refusal);
    }

    #[test]
    fn timeout_at_cap_and_busy_cap() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(6);
        let mut s = session(&cfg, st(3, 2, 2), &[]);
        for t in 1..=15 {
            let out = s.step(BuildRapport, &mut r).unwrap();
            let expected = if t == 15 { DialogueOutcome::Timeout } else { DialogueOutcome::Ongoing };
            assert_eq!(out.outcome, expected, "turn {t}");
        }
        let mut s = session(&cfg, st(3, 2, 2), &[Busy]);
        assert_eq!(s.turn_cap(), 10);
        for _ in 0..9 {
            s.step(BuildRapport, &mut r).unwrap();
        }
        assert_eq!(s.step(BuildRapport, &mut r).unwrap().outcome, DialogueOutcome::Timeout);
    }

    #[test]
    fn direction_fidelity_of_default_table() {
        for row in &EffectTable::default().rows {
            match row.class {
                RowClass::Helpful => assert!(!row.delta.has_negative(), "{row:?}"),
                RowClass::Misuse => {
                    assert!(!row.delta.has_positive(), "{row:?}");
                    assert!(row.delta.has_negative(), "{row:?}");
                }
                RowClass::Neutral => assert!(row.delta.is_zero(), "{row:?}"),
            }
        }
        // Every action has a fallback row with no guards.
        let table = EffectTable::default();
        for a in AgentAction::ALL {
            assert!(table.rows.iter().any(|r| r.action == *a && r.when.is_empty()), "{a}");
        }
    }

    fn all_flags() -> Vec<SessionFlags> {
        let concerns = [Concern::Unraised, Concern::Raised, Concern::Cleared];
        let mut out = Vec::new();
        for offer in [false, true] {
            for cost in concerns {
                for ai in concerns {
                    for asked in [false, true] {
                        out.push(SessionFlags {
                            offer_presented: offer,
                            cost_concern: cost,
                            ai_question: ai,
                            asked_needs_used: asked,
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn success_only_through_a_qualified_close() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(7);
        let prev_tokens = [None, Some(UserToken::Objection), Some(UserToken::Neutral)];
        for s in enumerate_states() {
            for flags in all_flags() {
                for prev in prev_tokens {
                    for &action in AgentAction::ALL {
                        let mut sess = session(&cfg, s, &[]);
                        sess.flags = flags;
                        sess.last_token = prev;
                        sess.turn = 3;
                        let out = sess.step(action, &mut r).unwrap();
                        let qualified = action == CloseDeal
                            && flags.offer_presented
                            && s.cooperation() >= 3
                            && s.trust() >= 4
                            && !flags.cost_concern.is_pending();
                        assert_eq!(
                            out.outcome == DialogueOutcome::Success,
                            qualified,
                            "{s} {flags:?} {action}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn cost_concern_blocks_success_until_addressed() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(8);
        let mut s = session(&cfg, st(3, 2, 4), &[CostConcern]);
        let out = s.step(PresentOffer, &mut r).unwrap();
        assert_eq!(out.token, UserToken::CostObjection);
        assert!(s.flags().offer_presented);
        assert!(s.flags().cost_concern.is_pending());
        assert_eq!(s.step(CloseDeal, &mut r).unwrap().outcome, DialogueOutcome::Ongoing);
        assert_eq!(s.state(), st(2, 2, 4));
        s.step(AddressCostConcern, &mut r).unwrap();
        assert_eq!(s.state(), st(3, 2, 4));
        assert_eq!(s.flags().cost_concern, Concern::Cleared);
        assert_eq!(s.step(CloseDeal, &mut r).unwrap().outcome, DialogueOutcome::Success);
    }

    #[test]
    fn handle_objection_needs_a_previous_objection() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(9);
        let mut s = session(&cfg, st(2, 2, 3), &[]);
        s.step(HandleObjection, &mut r).unwrap();
        assert_eq!(s.state(), st(2, 2, 3));
        assert_eq!(s.step(IdentityDefense, &mut r).unwrap().token, UserToken::Objection);
        assert_eq!(s.state(), st(2, 2, 2));
        s.step(HandleObjection, &mut r).unwrap();
        assert_eq!(s.state(), st(3, 2, 2));
    }

    #[test]
    fn ai_skeptic_halves_evidence_until_defended() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(10);
        let profile = UserProfile::new(st(2, 2, 1), [AiSkeptic]);
        let mut s = UserSession::new(profile, &cfg).unwrap();
        let raise_turn = s.ai_question_turn();
        assert!((1..=3).contains(&raise_turn));
        // Rapport is harmless filler until the question comes up.
        for _ in 1..raise_turn {
            assert_ne!(s.step(BuildRapport, &mut r).unwrap().token, UserToken::AiQuestion);
        }
        assert_eq!(s.step(BuildRapport, &mut r).unwrap().token, UserToken::AiQuestion);
        assert!(s.flags().ai_question.is_pending());
        let before = s.state().trust();
        s.step(ProvideEvidence, &mut r).unwrap();
        assert_eq!(s.state().trust(), before, "floor(1/2) = 0 while pending");
        s.step(IdentityDefense, &mut r).unwrap();
        assert_eq!(s.state().trust(), before + 1);
        assert_eq!(s.flags().ai_question, Concern::Cleared);
        s.step(ProvideEvidence, &mut r).unwrap();
        assert_eq!(s.state().trust(), before + 2);
    }

    #[test]
    fn irritable_doubles_losses() {
        let cfg = UserModelConfig::deterministic();
        let mut r = rng(11);
        let mut s = session(&cfg, st(3, 1, 4), &[Irritable]);
        s.step(IdentityDefense, &mut r).unwrap();
        assert_eq!(s.state(), st(3, 1, 2));
        s.step(CloseDeal, &mut r).unwrap();
        assert_eq!(s.state(), st(1, 1, 2));
    }

    #[test]
    fn attention_lapse_nullifies_sometimes() {
        let cfg = UserModelConfig {
            drift_prob: 0.0,
            epsilon: 0.0,
            ..UserModelConfig::default()
        };
        let mut r = rng(12);
        let (mut lapses, mut n) = (0, 0);
        for _ in 0..4000 {
            let mut s = session(&cfg, st(2, 1, 1), &[AttentionLapse]);
            let out = s.step(BuildRapport, &mut r).unwrap();
            n += 1;
            if out.token == UserToken::Distracted {
                lapses += 1;
                assert_eq!(s.state(), st(2, 1, 1));
            } else {
                assert_eq!(s.state(), st(2, 2, 1));
            }
        }
        let freq = lapses as f64 / n as f64;
        assert!((freq - 0.15).abs() < 0.02, "{freq}");
    }

    #[test]
    fn observation_examples() {
        let mut r = rng(13);
        for s in enumerate_states() {
            assert_eq!(observe_state(s, 0.0, &mut r), s);
        }
        for _ in 0..200 {
            let o = observe_state(st(0, 0, 0), 1.0, &mut r);
            assert!(o.cooperation() <= 1 && o.emotion() <= 1 && o.trust() <= 1);
        }
    }

    #[test]
    fn observation_exact_match_frequency() {
        // Emission law: exact with probability 1 - eps. Interior state so the
        // clamp never maps a shift back onto the true level.
        let mut r = rng(14);
        let s = st(2, 1, 3);
        let n = 100_000;
        let exact = (0..n)
            .filter(|_| observe_state(s, 0.2, &mut r).cooperation() == 2)
            .count();
        let freq = exact as f64 / n as f64;
        assert!((freq - 0.8).abs() <= 0.01, "{freq}");
    }

    #[test]
    fn sessions_always_terminate() {
        let cfg = UserModelConfig::default();
        let mut r = rng(15);
        for (i, p) in crate::behavior::profile_universe().iter().enumerate().step_by(7) {
            let mut s = UserSession::new(*p, &cfg).unwrap();
            let mut steps = 0;
            loop {
                let a = AgentAction::ALL[r.gen_range(0..ACTION_COUNT)];
                let out = s.step(a, &mut r).unwrap();
                steps += 1;
                if out.outcome.is_terminal() {
                    break;
                }
                assert!(steps < 15, "profile {i}");
            }
            assert!(steps <= 15);
            assert!(s.step(Greet, &mut r).is_err());
        }
    }

    #[test]
    fn identical_inputs_give_identical_sessions() {
        let cfg = UserModelConfig::default();
        let p = build_profile(st(2, 1, 2), TraitSet::from_mask(0b10111).unwrap());
        assert!(check_consistency(&p).is_ok());
        let run = || {
            let mut r = rng(16);
            let mut s = UserSession::new(p, &cfg).unwrap();
            let mut out = vec![];
            for a in [Greet, AskNeeds, PresentOffer, AddressCostConcern, ProvideEvidence, IdentityDefense, CloseDeal] {
                let t = s.step(a, &mut r).unwrap();
                out.push(t);
                if t.outcome.is_terminal() {
                    break;
                }
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn effect_table_toml_round_trip() {
        let table = EffectTable::default();
        let text = table.to_toml_string();
        assert_eq!(EffectTable::from_toml_str(&text).unwrap(), table);
        let custom = r#"
            [[rows]]
            action = "build_rapport"
            delta = { de = 2 }
            class = "helpful"
        "#;
        let t = EffectTable::from_toml_str(custom).unwrap();
        let cfg = UserModelConfig {
            effects: t,
            ..UserModelConfig::deterministic()
        };
        let mut s = session(&cfg, st(1, 0, 1), &[]);
        s.step(BuildRapport, &mut rng(17)).unwrap();
        assert_eq!(s.state(), st(1, 2, 1));
        assert!(EffectTable::from_toml_str("[[rows]]\naction = \"fly\"\nclass = \"helpful\"").is_err());
    }
}
