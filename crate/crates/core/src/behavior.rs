//! Behavior-trait catalog, user profiles, consistency rules and deduplication.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::state_space::{enumerate_states, UserState, MAX_COOPERATION, MAX_EMOTION, MAX_TRUST};

/// Persona modifiers. Declaration order is the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorTrait {
    AiSkeptic,
    CostConcern,
    AttentionLapse,
    Irritable,
    Busy,
}

impl BehaviorTrait {
    pub const ALL: [BehaviorTrait; 5] = [
        BehaviorTrait::AiSkeptic,
        BehaviorTrait::CostConcern,
        BehaviorTrait::AttentionLapse,
        BehaviorTrait::Irritable,
        BehaviorTrait::Busy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BehaviorTrait::AiSkeptic => "ai_skeptic",
            BehaviorTrait::CostConcern => "cost_concern",
            BehaviorTrait::AttentionLapse => "attention_lapse",
            BehaviorTrait::Irritable => "irritable",
            BehaviorTrait::Busy => "busy",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for BehaviorTrait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BehaviorTrait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BehaviorTrait::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown behavior trait {s:?}")))
    }
}

/// A set of traits stored as a bitmask over the catalog order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct TraitSet(u8);

/// Number of distinct trait subsets.
pub const TRAIT_SUBSETS: usize = 1 << BehaviorTrait::ALL.len();

impl TraitSet {
    pub const EMPTY: TraitSet = TraitSet(0);

    pub fn from_mask(mask: u8) -> Result<Self> {
        if mask as usize >= TRAIT_SUBSETS {
            return Err(Error::Parse(format!("trait mask {mask} out of range")));
        }
        Ok(TraitSet(mask))
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn contains(self, t: BehaviorTrait) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn with(self, t: BehaviorTrait) -> Self {
        TraitSet(self.0 | t.bit())
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Traits in canonical order.
    pub fn iter(self) -> impl Iterator<Item = BehaviorTrait> {
        BehaviorTrait::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    pub fn all_subsets() -> impl Iterator<Item = TraitSet> {
        (0..TRAIT_SUBSETS as u8).map(TraitSet)
    }
}

impl FromIterator<BehaviorTrait> for TraitSet {
    fn from_iter<I: IntoIterator<Item = BehaviorTrait>>(iter: I) -> Self {
        iter.into_iter().fold(TraitSet::EMPTY, TraitSet::with)
    }
}

/// Initial state plus behavior traits, identified by a content hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UserProfile {
    pub initial: UserState,
    pub traits: TraitSet,
    pub profile_id: u64,
}

/// A failed consistency rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub message: &'static str,
}

struct Rule {
    name: &'static str,
    message: &'static str,
    applies: fn(UserState) -> bool,
    excludes: BehaviorTrait,
}

const RULES: [Rule; 3] = [
    Rule {
        name: "trust-vs-skepticism",
        message: "max-trust contradicts skepticism",
        applies: |s| s.trust() == MAX_TRUST,
        excludes: BehaviorTrait::AiSkeptic,
    },
    Rule {
        name: "emotion-vs-irritability",
        message: "max-emotion contradicts irritability",
        applies: |s| s.emotion() == MAX_EMOTION,
        excludes: BehaviorTrait::Irritable,
    },
    Rule {
        name: "cooperation-vs-busyness",
        message: "max-cooperation contradicts busyness",
        applies: |s| s.cooperation() == MAX_COOPERATION,
        excludes: BehaviorTrait::Busy,
    },
];

fn content_hash(initial: UserState, traits: TraitSet) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&[initial.cooperation(), initial.emotion(), initial.trust(), traits.mask()]);
    h.finish()
}

pub fn build_profile(initial: UserState, traits: TraitSet) -> UserProfile {
    UserProfile {
        initial,
        traits,
        profile_id: content_hash(initial, traits),
    }
}

impl UserProfile {
    pub fn new(initial: UserState, traits: impl IntoIterator<Item = BehaviorTrait>) -> Self {
        build_profile(initial, traits.into_iter().collect())
    }

    pub fn has(&self, t: BehaviorTrait) -> bool {
        self.traits.contains(t)
    }
}

pub fn check_consistency(p: &UserProfile) -> std::result::Result<(), Vec<Violation>> {
    let violations: Vec<Violation> = RULES
        .iter()
        .filter(|r| (r.applies)(p.initial) && p.traits.contains(r.excludes))
        .map(|r| Violation {
            rule: r.name,
            message: r.message,
        })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

pub fn is_consistent(p: &UserProfile) -> bool {
    check_consistency(p).is_ok()
}

/// Keeps the first occurrence of every profile id.
pub fn dedup(batch: &[UserProfile]) -> Vec<UserProfile> {
    let mut seen = HashSet::with_capacity(batch.len());
    batch
        .iter()
        .filter(|p| seen.insert(p.profile_id))
        .copied()
        .collect()
}

/// Trait subsets that pass the consistency rules for `initial`, in mask order.
pub fn consistent_subsets(initial: UserState) -> Vec<TraitSet> {
    TraitSet::all_subsets()
        .filter(|&t| is_consistent(&build_profile(initial, t)))
        .collect()
}

/// Every consistent profile, ordered by state index then trait mask.
pub fn profile_universe() -> Vec<UserProfile> {
    enumerate_states()
        .into_iter()
        .flat_map(|s| consistent_subsets(s).into_iter().map(move |t| build_profile(s, t)))
        .collect()
}

impl Serialize for TraitSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for TraitSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let traits = Vec::<BehaviorTrait>::deserialize(deserializer)?;
        Ok(traits.into_iter().collect())
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    initial: UserState,
    traits: TraitSet,
    id: u64,
}

impl Serialize for UserProfile {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ProfileRecord {
            initial: self.initial,
            traits: self.traits,
            id: self.profile_id,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for UserProfile {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = ProfileRecord::deserialize(deserializer)?;
        let p = build_profile(rec.initial, rec.traits);
        if p.profile_id != rec.id {
            return Err(serde::de::Error::custom(format!(
                "profile id {} does not match content (expected {})",
                rec.id, p.profile_id
            )));
        }
        Ok(p)
    }
}

impl fmt::Display for UserProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.traits.iter().map(BehaviorTrait::name).collect();
        write!(f, "({}) {{{}}} #{:016x}", self.initial, names.join(","), self.profile_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::UserState;
    use proptest::prelude::*;
    use BehaviorTrait::*;

    fn st(c: u8, e: u8, tr: u8) -> UserState {
        UserState::new(c, e, tr).unwrap()
    }

    #[test]
    fn profile_ids_are_content_hashes() {
        let a = UserProfile::new(st(2, 1, 3), [CostConcern]);
        let b = UserProfile::new(st(2, 1, 3), [CostConcern]);
        assert_eq!(a, b);
        assert_eq!(a.profile_id, b.profile_id);
        let x = UserProfile::new(st(2, 1, 3), [CostConcern, AiSkeptic]);
        let y = UserProfile::new(st(2, 1, 3), [AiSkeptic, CostConcern]);
        assert_eq!(x.profile_id, y.profile_id);
        assert_ne!(a.profile_id, x.profile_id);
    }

    #[test]
    fn ids_are_unique_over_the_universe() {
        let all: Vec<_> = enumerate_states()
            .into_iter()
            .flat_map(|s| TraitSet::all_subsets().map(move |t| build_profile(s, t)))
            .collect();
        assert_eq!(all.len(), 3840);
        let ids: HashSet<u64> = all.iter().map(|p| p.profile_id).collect();
        assert_eq!(ids.len(), 3840);
    }

    #[test]
    fn consistency_examples() {
        let v = check_consistency(&UserProfile::new(st(2, 1, 5), [AiSkeptic])).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "max-trust contradicts skepticism");

        assert!(check_consistency(&UserProfile::new(st(2, 1, 3), [])).is_ok());

        let v = check_consistency(&UserProfile::new(st(1, 3, 1), [Irritable])).unwrap_err();
        assert_eq!(v[0].message, "max-emotion contradicts irritability");

        let v = check_consistency(&UserProfile::new(st(4, 3, 5), [AiSkeptic, Irritable, Busy]))
            .unwrap_err();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn consistent_subset_counts_match_brute_force() {
        // Independent count: a trait is forbidden iff its rule's state
        // condition holds; remaining traits combine freely.
        for s in enumerate_states() {
            let forbidden = [s.trust() == 5, s.emotion() == 3, s.cooperation() == 4]
                .iter()
                .filter(|&&f| f)
                .count();
            let expected = 1usize << (5 - forbidden);
            assert_eq!(consistent_subsets(s).len(), expected, "state {s}");
        }
    }

    #[test]
    fn dedup_examples() {
        let p1 = UserProfile::new(st(1, 1, 1), []);
        let p2 = UserProfile::new(st(2, 2, 2), [Busy]);
        assert_eq!(dedup(&[p1, p1, p2]), vec![p1, p2]);
        assert_eq!(dedup(&[]), Vec::<UserProfile>::new());
        assert_eq!(dedup(&[p2, p1, p2, p1]), vec![p2, p1]);
    }

    #[test]
    fn serde_round_trip_and_tamper_check() {
        let p = UserProfile::new(st(3, 0, 2), [CostConcern, Busy]);
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"cost_concern\""));
        assert!(json.contains("\"3,0,2\""));
        let back: UserProfile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let tampered = json.replace("\"3,0,2\"", "\"3,0,3\"");
        assert!(serde_json::from_str::<UserProfile>(&tampered).is_err());
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_unique(picks in proptest::collection::vec((0usize..120, 0u8..32), 0..40)) {
            let batch: Vec<UserProfile> = picks
                .iter()
                .map(|&(i, m)| build_profile(UserState::from_index(i).unwrap(), TraitSet::from_mask(m).unwrap()))
                .collect();
            let once = dedup(&batch);
            prop_assert_eq!(dedup(&once), once.clone());
            let ids: HashSet<u64> = once.iter().map(|p| p.profile_id).collect();
            prop_assert_eq!(ids.len(), once.len());
        }
    }
}
