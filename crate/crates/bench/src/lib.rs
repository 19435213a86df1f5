//! Shared fixtures for the benchmarks in `benches/`.

use sead_core::agent::PolicyParams;
use sead_core::arena::{run_dialogue, Environment, Trajectory};
use sead_core::controller::{CompletionStats, TraitLibrary};
use sead_core::{DialogueOutcome, RootSeed, StreamId, UserModelConfig, STATE_COUNT};

/// `n` dialogues of the zero-logit policy from evenly spread profiles.
pub fn zero_policy_rollouts(n: usize) -> Vec<Trajectory> {
    let env = Environment::frozen(UserModelConfig::default());
    let library = TraitLibrary::default();
    let universe = library.universe();
    let policy = PolicyParams::zeros();
    (0..n)
        .map(|i| {
            let profile = universe[i * 7919 % universe.len()];
            run_dialogue(&policy, profile, &env, RootSeed(1), StreamId::test(i as u64)).expect("valid profile")
        })
        .collect()
}

/// A stats table where state `i` has completion rate `i / 119`.
pub fn graded_stats() -> CompletionStats {
    let mut stats = CompletionStats::new();
    for i in 0..STATE_COUNT {
        for k in 0..119 {
            let outcome = if k < i { DialogueOutcome::Success } else { DialogueOutcome::Refusal };
            stats.update(i, outcome).expect("terminal outcome");
        }
    }
    stats
}
