//! Curriculum-driven self-play training for multi-turn service dialogue.
//!
//! A profile controller samples initial user profiles, a frozen rule-based
//! user model plays them out against a tabular softmax agent, and a
//! group-relative policy-gradient optimizer trains the agent from binary
//! task rewards. Completion-rate statistics per initial state feed back
//! into the sampler so training concentrates on states the agent completes
//! about half the time.

pub mod agent;
pub mod arena;
pub mod backend;
pub mod behavior;
pub mod controller;
pub mod error;
pub mod grpo;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod state_space;
pub mod user_model;

pub use agent::{PolicyParams, ScriptedAgent, Skill, StateEstimate};
pub use arena::{evaluate, run_dialogue, Arena, ArenaConfig, Trajectory};
pub use behavior::{BehaviorTrait, TraitSet, UserProfile};
pub use controller::{classify, CompletionStats, DifficultyClass};
pub use error::{Error, Result};
pub use metrics::MetricBundle;
pub use rng::{RootSeed, SimRng, StreamId};
pub use state_space::{StateDelta, UserState, STATE_COUNT};
pub use user_model::{AgentAction, DialogueOutcome, UserModelConfig, UserSession, UserToken};
