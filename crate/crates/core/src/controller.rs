//! Profile controller: completion-rate bookkeeping per initial state,
//! difficulty classes, completion-rate-weighted state sampling and batch
//! assembly.
//!
//! Sampling weight of a state is `1 - |cr - 0.5|`, so states the agent
//! completes about half the time are drawn most often. Weights are computed
//! per initial state (120 of them), never per full profile.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{build_profile, consistent_subsets, profile_universe, TraitSet, UserProfile};
use crate::error::{Error, Result};
use crate::state_space::{enumerate_states, UserState, STATE_COUNT};
use crate::user_model::DialogueOutcome;

/// Outcomes remembered per state for the completion rate.
pub const STATS_WINDOW: usize = 200;
/// Below this many windowed attempts the rate is Laplace-smoothed.
pub const SMOOTHING_MIN_ATTEMPTS: usize = 5;
/// Cap on distinct trait combinations drawn per initial state.
pub const N_MAX: usize = 200;

pub const TOO_EASY_ABOVE: f64 = 0.6;
pub const TOO_DIFFICULT_BELOW: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyClass {
    TooEasy,
    Ideal,
    TooDifficult,
}

impl DifficultyClass {
    pub fn name(self) -> &'static str {
        match self {
            DifficultyClass::TooEasy => "too_easy",
            DifficultyClass::Ideal => "ideal",
            DifficultyClass::TooDifficult => "too_difficult",
        }
    }
}

pub fn classify(cr: f64) -> DifficultyClass {
    assert!((0.0..=1.0).contains(&cr), "completion rate {cr} outside [0, 1]");
    if cr > TOO_EASY_ABOVE {
        DifficultyClass::TooEasy
    } else if cr < TOO_DIFFICULT_BELOW {
        DifficultyClass::TooDifficult
    } else {
        DifficultyClass::Ideal
    }
}

/// Unnormalized sampling weight of a completion rate.
pub fn raw_weight(cr: f64) -> f64 {
    1.0 - (cr - 0.5).abs()
}

/// Normalizes `raw_weight` over a list of completion rates.
pub fn normalized_weights(crs: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = crs.iter().map(|&c| raw_weight(c)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateStats {
    pub attempts: u64,
    pub successes: u64,
    window: VecDeque<bool>,
}

impl StateStats {
    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn window_successes(&self) -> usize {
        self.window.iter().filter(|&&s| s).count()
    }

    /// Windowed completion rate, `None` before the first attempt.
    pub fn cr(&self) -> Option<f64> {
        let n = self.window.len();
        (n > 0).then(|| self.window_successes() as f64 / n as f64)
    }

    /// The rate fed to the sampler: 0.5 when unvisited, Laplace-smoothed
    /// while the window is short, raw afterwards.
    pub fn effective_cr(&self) -> f64 {
        let n = self.window.len();
        let s = self.window_successes();
        if n < SMOOTHING_MIN_ATTEMPTS {
            (s as f64 + 1.0) / (n as f64 + 2.0)
        } else {
            s as f64 / n as f64
        }
    }

    fn record(&mut self, success: bool) {
        self.attempts += 1;
        self.successes += success as u64;
        if self.window.len() == STATS_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(success);
    }
}

/// Completion statistics for each of the 120 initial states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionStats {
    states: Vec<StateStats>,
}

impl Default for CompletionStats {
    fn default() -> Self {
        Self::new()
    }
}

impl CompletionStats {
    pub fn new() -> Self {
        Self {
            states: vec![StateStats::default(); STATE_COUNT],
        }
    }

    pub fn get(&self, index: usize) -> &StateStats {
        &self.states[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &StateStats> {
        self.states.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.states.iter().all(|s| s.attempts == 0)
    }

    pub fn cr(&self, index: usize) -> Option<f64> {
        self.states[index].cr()
    }

    pub fn update(&mut self, index: usize, outcome: DialogueOutcome) -> Result<()> {
        if index >= STATE_COUNT {
            return Err(Error::InvalidStateIndex(index));
        }
        if !outcome.is_terminal() {
            return Err(Error::contract("stats update with an ongoing outcome"));
        }
        self.states[index].record(outcome == DialogueOutcome::Success);
        Ok(())
    }

    /// Rebuilds stats from lifetime counts. The window keeps the same
    /// success proportion; the order of outcomes inside it is not recoverable.
    pub fn from_counts(counts: &[(u64, u64)]) -> Result<Self> {
        if counts.len() != STATE_COUNT {
            return Err(Error::Parse(format!("expected {STATE_COUNT} rows, got {}", counts.len())));
        }
        let mut stats = Self::new();
        for (slot, &(attempts, successes)) in stats.states.iter_mut().zip(counts) {
            if successes > attempts {
                return Err(Error::Parse(format!("{successes} successes exceed {attempts} attempts")));
            }
            let n = (attempts as usize).min(STATS_WINDOW);
            let s = if attempts == 0 {
                0
            } else {
                ((successes as f64) * n as f64 / attempts as f64).round() as usize
            };
            slot.attempts = attempts;
            slot.successes = successes;
            slot.window = (0..n).map(|i| i < s).collect();
        }
        Ok(stats)
    }

    pub fn classes(&self) -> Vec<Option<DifficultyClass>> {
        self.states.iter().map(|s| s.cr().map(classify)).collect()
    }

    /// Number of visited states per class: `[too_easy, ideal, too_difficult]`.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for class in self.classes().into_iter().flatten() {
            counts[match class {
                DifficultyClass::TooEasy => 0,
                DifficultyClass::Ideal => 1,
                DifficultyClass::TooDifficult => 2,
            }] += 1;
        }
        counts
    }

    /// 120-row table: `index,c,e,tr,attempts,successes,cr,class,weight`.
    pub fn to_csv(&self) -> String {
        let weights = sampling_weights(self);
        let mut out = String::from("index,c,e,tr,attempts,successes,cr,class,weight\n");
        for (i, (st, s)) in self.states.iter().zip(enumerate_states()).enumerate() {
            let (cr, class) = match st.cr() {
                Some(cr) => (format!("{cr:.6}"), classify(cr).name()),
                None => (String::new(), ""),
            };
            writeln!(
                out,
                "{i},{},{},{},{},{},{cr},{class},{:.9}",
                s.cooperation(),
                s.emotion(),
                s.trust(),
                st.attempts,
                st.successes,
                weights[i]
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Empty("stats table"))?;
        if !header.starts_with("index,c,e,tr,attempts,successes") {
            return Err(Error::Parse(format!("unexpected stats header {header:?}")));
        }
        let mut counts = Vec::with_capacity(STATE_COUNT);
        for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| -> Result<u64> {
                fields
                    .get(i)
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("stats row {}: bad field {i}", n + 2)))
            };
            if parse(0)? as usize != n {
                return Err(Error::Parse(format!("stats row {} out of order", n + 2)));
            }
            counts.push((parse(4)?, parse(5)?));
        }
        Self::from_counts(&counts)
    }
}

pub fn update_stats(stats: &mut CompletionStats, index: usize, outcome: DialogueOutcome) -> Result<()> {
    stats.update(index, outcome)
}

/// Normalized sampling probability of each initial state.
pub fn sampling_weights(stats: &CompletionStats) -> Vec<f64> {
    let crs: Vec<f64> = stats.states.iter().map(StateStats::effective_cr).collect();
    normalized_weights(&crs)
}

/// Consistent trait subsets per initial state, with the per-state cap.
#[derive(Debug, Clone)]
pub struct TraitLibrary {
    per_state: Vec<Vec<TraitSet>>,
    universe: Vec<UserProfile>,
    n_max: usize,
}

impl Default for TraitLibrary {
    fn default() -> Self {
        Self::new(N_MAX)
    }
}

impl TraitLibrary {
    pub fn new(n_max: usize) -> Self {
        Self {
            per_state: enumerate_states().into_iter().map(consistent_subsets).collect(),
            universe: profile_universe(),
            n_max,
        }
    }

    pub fn subsets(&self, index: usize) -> &[TraitSet] {
        &self.per_state[index]
    }

    /// Distinct profiles a batch may hold for one state.
    pub fn cap(&self, index: usize) -> usize {
        self.per_state[index].len().min(self.n_max)
    }

    pub fn universe(&self) -> &[UserProfile] {
        &self.universe
    }

    pub fn random_profile(&self, state: UserState, rng: &mut impl Rng) -> UserProfile {
        let subsets = &self.per_state[state.index()];
        build_profile(state, subsets[rng.gen_range(0..subsets.len())])
    }
}

/// Draws `b` distinct consistent profiles whose initial states follow
/// `state_weights`. Duplicates are discarded and replaced by fresh draws
/// until the batch is full or every state with positive weight is at its cap.
pub fn sample_from_state_weights(
    state_weights: &[f64],
    b: usize,
    library: &TraitLibrary,
    rng: &mut impl Rng,
) -> Result<Vec<UserProfile>> {
    if b == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let dist = WeightedIndex::new(state_weights)
        .map_err(|e| Error::contract(format!("bad state weights: {e}")))?;
    let capacity: usize = (0..STATE_COUNT)
        .filter(|&i| state_weights[i] > 0.0)
        .map(|i| library.cap(i))
        .sum();
    let target = b.min(capacity);
    let mut used = vec![0usize; STATE_COUNT];
    let mut seen = HashSet::with_capacity(target);
    let mut batch = Vec::with_capacity(target);
    while batch.len() < target {
        let index = dist.sample(rng);
        if used[index] >= library.cap(index) {
            continue;
        }
        let subsets = library.subsets(index);
        let traits = subsets[rng.gen_range(0..subsets.len())];
        let profile = build_profile(UserState::from_index(index)?, traits);
        if seen.insert(profile.profile_id) {
            used[index] += 1;
            batch.push(profile);
        }
    }
    Ok(batch)
}

/// Difficulty-weighted batch; uniform over states when `stats` is empty.
pub fn sample_batch(
    stats: &CompletionStats,
    b: usize,
    rng: &mut impl Rng,
    library: &TraitLibrary,
) -> Result<Vec<UserProfile>> {
    sample_from_state_weights(&sampling_weights(stats), b, library, rng)
}

/// `b` distinct profiles drawn uniformly from the consistent universe.
pub fn sample_uniform_profiles(b: usize, rng: &mut impl Rng, library: &TraitLibrary) -> Result<Vec<UserProfile>> {
    if b == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let universe = library.universe();
    let target = b.min(universe.len());
    let picks = rand::seq::index::sample(rng, universe.len(), target);
    Ok(picks.into_iter().map(|i| universe[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::is_consistent;
    use crate::rng::{RootSeed, StreamId};

    #[test]
    fn update_examples() {
        let mut stats = CompletionStats::new();
        stats.update(0, DialogueOutcome::Success).unwrap();
        assert_eq!(stats.get(0).attempts, 1);
        assert_eq!(stats.get(0).successes, 1);
        assert_eq!(stats.cr(0), Some(1.0));

        for o in [DialogueOutcome::Success, DialogueOutcome::Timeout, DialogueOutcome::Refusal] {
            stats.update(1, o).unwrap();
        }
        stats.update(1, DialogueOutcome::Success).unwrap();
        assert_eq!((stats.get(1).attempts, stats.get(1).successes), (4, 2));
        stats.update(1, DialogueOutcome::Refusal).unwrap();
        assert_eq!((stats.get(1).attempts, stats.get(1).successes), (5, 2));
        assert!((stats.cr(1).unwrap() - 0.4).abs() < 1e-15);

        assert!(matches!(stats.update(2, DialogueOutcome::Ongoing), Err(Error::Contract(_))));
        assert!(stats.update(120, DialogueOutcome::Success).is_err());
    }

    #[test]
    fn classify_partition() {
        assert_eq!(classify(0.7), DifficultyClass::TooEasy);
        assert_eq!(classify(0.4), DifficultyClass::Ideal);
        assert_eq!(classify(0.35), DifficultyClass::TooDifficult);
        assert_eq!(classify(0.6), DifficultyClass::Ideal);
        assert_eq!(classify(0.61), DifficultyClass::TooEasy);
        assert_eq!(classify(0.0), DifficultyClass::TooDifficult);
        assert_eq!(classify(1.0), DifficultyClass::TooEasy);
    }

    #[test]
    fn classes_cover_all_reachable_rates() {
        for attempts in 1..=50u32 {
            for successes in 0..=attempts {
                let cr = successes as f64 / attempts as f64;
                let class = classify(cr);
                let easy = cr > 0.6;
                let hard = cr < 0.4;
                let ideal = (0.4..=0.6).contains(&cr);
                assert_eq!(easy as u8 + hard as u8 + ideal as u8, 1);
                let expected = if easy {
                    DifficultyClass::TooEasy
                } else if hard {
                    DifficultyClass::TooDifficult
                } else {
                    DifficultyClass::Ideal
                };
                assert_eq!(class, expected, "{successes}/{attempts}");
            }
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(raw_weight(0.5), 1.0);
        assert_eq!(raw_weight(0.0), 0.5);
        assert_eq!(raw_weight(1.0), 0.5);
        let w = normalized_weights(&[0.5, 0.3, 0.9]);
        let raw = [1.0, 0.8, 0.6];
        for (i, r) in raw.iter().enumerate() {
            assert!((raw_weight([0.5, 0.3, 0.9][i]) - r).abs() < 1e-15);
        }
        for (got, want) in w.iter().zip([1.0 / 2.4, 0.8 / 2.4, 0.6 / 2.4]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((w[0] - 0.41667).abs() < 5e-6);
        assert!((w[1] - 0.33333).abs() < 5e-6);
        assert!((w[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_are_symmetric_about_half() {
        // Dyadic offsets keep 0.5 ± x exact, so only the weight itself is tested.
        for k in 0..=512 {
            let x = k as f64 / 1024.0;
            assert_eq!(raw_weight(0.5 + x), raw_weight(0.5 - x), "x = {x}");
        }
    }

    #[test]
    fn empty_stats_give_uniform_weights() {
        let w = sampling_weights(&CompletionStats::new());
        assert_eq!(w.len(), 120);
        for x in &w {
            assert!((x - 1.0 / 120.0).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_applies_to_short_windows_only() {
        let mut stats = CompletionStats::new();
        stats.update(3, DialogueOutcome::Success).unwrap();
        assert!((stats.get(3).effective_cr() - 2.0 / 3.0).abs() < 1e-15);
        for _ in 0..4 {
            stats.update(3, DialogueOutcome::Success).unwrap();
        }
        assert_eq!(stats.get(3).effective_cr(), 1.0);
    }

    #[test]
    fn window_forgets_old_outcomes() {
        let mut stats = CompletionStats::new();
        for _ in 0..STATS_WINDOW {
            stats.update(7, DialogueOutcome::Timeout).unwrap();
        }
        for _ in 0..STATS_WINDOW {
            stats.update(7, DialogueOutcome::Success).unwrap();
        }
        assert_eq!(stats.get(7).attempts, 400);
        assert_eq!(stats.get(7).successes, 200);
        assert_eq!(stats.cr(7), Some(1.0));
    }

    #[test]
    fn success_never_raises_weight_of_easy_states() {
        // Exhaustive over windowed histories up to 60 outcomes.
        for n in 0..60u32 {
            for s in 0..=n {
                let mut stats = CompletionStats::new();
                for i in 0..n {
                    let o = if i < s { DialogueOutcome::Success } else { DialogueOutcome::Timeout };
                    stats.update(0, o).unwrap();
                }
                let before = stats.get(0).effective_cr();
                if before < 0.5 {
                    continue;
                }
                let w_before = raw_weight(before);
                stats.update(0, DialogueOutcome::Success).unwrap();
                assert!(raw_weight(stats.get(0).effective_cr()) <= w_before, "{s}/{n}");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut stats = CompletionStats::new();
        let mut rng = RootSeed(3).stream(StreamId::test(0));
        for _ in 0..2000 {
            let i = rng.gen_range(0..STATE_COUNT);
            let o = if rng.gen_bool(0.4) { DialogueOutcome::Success } else { DialogueOutcome::Refusal };
            stats.update(i, o).unwrap();
        }
        let csv = stats.to_csv();
        assert_eq!(csv.lines().count(), 121);
        let back = CompletionStats::from_csv(&csv).unwrap();
        for i in 0..STATE_COUNT {
            assert_eq!(back.get(i).attempts, stats.get(i).attempts);
            assert_eq!(back.get(i).successes, stats.get(i).successes);
        }
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn batch_is_unique_and_consistent() {
        let lib = TraitLibrary::default();
        let mut rng = RootSeed(5).stream(StreamId::test(1));
        let stats = CompletionStats::new();
        for b in [1, 60, 500] {
            let batch = sample_batch(&stats, b, &mut rng, &lib).unwrap();
            assert_eq!(batch.len(), b);
            assert!(batch.iter().all(is_consistent));
            let ids: HashSet<u64> = batch.iter().map(|p| p.profile_id).collect();
            assert_eq!(ids.len(), b);
        }
        assert!(sample_batch(&stats, 0, &mut rng, &lib).is_err());
    }

    #[test]
    fn batch_respects_state_capacity() {
        let lib = TraitLibrary::default();
        let mut rng = RootSeed(5).stream(StreamId::test(2));
        let mut weights = vec![0.0; STATE_COUNT];
        weights[119] = 1.0; // (4,3,5): all three rules bind, 4 subsets remain
        let batch = sample_from_state_weights(&weights, 60, &lib, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let lib2 = TraitLibrary::new(2);
        weights[0] = 1.0;
        let batch = sample_from_state_weights(&weights, 60, &lib2, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
    }

    #[test]
    fn uniform_profiles_come_from_the_universe() {
        let lib = TraitLibrary::default();
        let mut rng = RootSeed(5).stream(StreamId::test(3));
        let batch = sample_uniform_profiles(60, &mut rng, &lib).unwrap();
        assert_eq!(batch.len(), 60);
        assert!(batch.iter().all(is_consistent));
        let brute = enumerate_states()
            .into_iter()
            .flat_map(|s| (0u8..32).map(move |m| (s, m)))
            .filter(|&(s, m)| {
                !(s.trust() == 5 && m & 1 != 0)
                    && !(s.emotion() == 3 && m & 8 != 0)
                    && !(s.cooperation() == 4 && m & 16 != 0)
            })
            .count();
        assert_eq!(lib.universe().len(), brute);
    }
}
