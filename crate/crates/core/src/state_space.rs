//! The discrete user-state grid: cooperation, emotion and trust levels.
//!
//! States are ordered lexicographically by `(cooperation, emotion, trust)`
//! with trust varying fastest, which gives every state a stable index in
//! `0..STATE_COUNT`. Stats tables, policy buckets and logs all use that index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const COOPERATION_LEVELS: u8 = 5;
pub const EMOTION_LEVELS: u8 = 4;
pub const TRUST_LEVELS: u8 = 6;

pub const MAX_COOPERATION: u8 = COOPERATION_LEVELS - 1;
pub const MAX_EMOTION: u8 = EMOTION_LEVELS - 1;
pub const MAX_TRUST: u8 = TRUST_LEVELS - 1;

/// Number of distinct user states (5 x 4 x 6).
pub const STATE_COUNT: usize =
    COOPERATION_LEVELS as usize * EMOTION_LEVELS as usize * TRUST_LEVELS as usize;

/// The hidden user state `(cooperation, emotion, trust)`.
///
/// Fields are private so a value can only be built through [`UserState::new`]
/// or by clamping, which keeps every level inside its range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserState {
    c: u8,
    e: u8,
    tr: u8,
}

/// Signed per-dimension level change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateDelta {
    #[serde(default)]
    pub dc: i8,
    #[serde(default)]
    pub de: i8,
    #[serde(default)]
    pub dtr: i8,
}

/// One of the three state dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    Cooperation,
    Emotion,
    Trust,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Cooperation, Dimension::Emotion, Dimension::Trust];

    pub fn max_level(self) -> u8 {
        match self {
            Dimension::Cooperation => MAX_COOPERATION,
            Dimension::Emotion => MAX_EMOTION,
            Dimension::Trust => MAX_TRUST,
        }
    }
}

impl UserState {
    pub fn new(c: u8, e: u8, tr: u8) -> Result<Self> {
        if c > MAX_COOPERATION || e > MAX_EMOTION || tr > MAX_TRUST {
            return Err(Error::InvalidState { c, e, tr });
        }
        Ok(Self { c, e, tr })
    }

    /// Builds a state from arbitrary signed levels, clamping each into range.
    pub fn clamped(c: i32, e: i32, tr: i32) -> Self {
        Self {
            c: c.clamp(0, MAX_COOPERATION as i32) as u8,
            e: e.clamp(0, MAX_EMOTION as i32) as u8,
            tr: tr.clamp(0, MAX_TRUST as i32) as u8,
        }
    }

    pub fn cooperation(self) -> u8 {
        self.c
    }

    pub fn emotion(self) -> u8 {
        self.e
    }

    pub fn trust(self) -> u8 {
        self.tr
    }

    pub fn level(self, dim: Dimension) -> u8 {
        match dim {
            Dimension::Cooperation => self.c,
            Dimension::Emotion => self.e,
            Dimension::Trust => self.tr,
        }
    }

    pub fn with_level(self, dim: Dimension, level: i32) -> Self {
        let (mut c, mut e, mut tr) = (self.c as i32, self.e as i32, self.tr as i32);
        match dim {
            Dimension::Cooperation => c = level,
            Dimension::Emotion => e = level,
            Dimension::Trust => tr = level,
        }
        Self::clamped(c, e, tr)
    }

    pub fn apply_delta(self, d: StateDelta) -> Self {
        Self::clamped(
            self.c as i32 + d.dc as i32,
            self.e as i32 + d.de as i32,
            self.tr as i32 + d.dtr as i32,
        )
    }

    /// Position of the state in lexicographic `(c, e, tr)` order.
    pub fn index(self) -> usize {
        (self.c as usize * EMOTION_LEVELS as usize + self.e as usize) * TRUST_LEVELS as usize
            + self.tr as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        if index >= STATE_COUNT {
            return Err(Error::InvalidStateIndex(index));
        }
        let tr = index % TRUST_LEVELS as usize;
        let rest = index / TRUST_LEVELS as usize;
        let e = rest % EMOTION_LEVELS as usize;
        let c = rest / EMOTION_LEVELS as usize;
        Ok(Self {
            c: c as u8,
            e: e as u8,
            tr: tr as u8,
        })
    }
}

impl StateDelta {
    pub const ZERO: StateDelta = StateDelta { dc: 0, de: 0, dtr: 0 };

    pub fn new(dc: i8, de: i8, dtr: i8) -> Self {
        Self { dc, de, dtr }
    }

    pub fn components(self) -> [i8; 3] {
        [self.dc, self.de, self.dtr]
    }

    pub fn is_zero(self) -> bool {
        self == Self::ZERO
    }

    pub fn has_negative(self) -> bool {
        self.components().iter().any(|&d| d < 0)
    }

    pub fn has_positive(self) -> bool {
        self.components().iter().any(|&d| d > 0)
    }

    /// Doubles every negative component, leaving gains untouched.
    pub fn amplify_losses(self) -> Self {
        let f = |d: i8| if d < 0 { d.saturating_mul(2) } else { d };
        Self::new(f(self.dc), f(self.de), f(self.dtr))
    }
}

/// All 120 states in lexicographic order.
pub fn enumerate_states() -> Vec<UserState> {
    let mut out = Vec::with_capacity(STATE_COUNT);
    for c in 0..COOPERATION_LEVELS {
        for e in 0..EMOTION_LEVELS {
            for tr in 0..TRUST_LEVELS {
                out.push(UserState { c, e, tr });
            }
        }
    }
    out
}

pub fn state_index(s: UserState) -> usize {
    s.index()
}

pub fn index_state(index: usize) -> Result<UserState> {
    UserState::from_index(index)
}

pub fn apply_delta(s: UserState, d: StateDelta) -> UserState {
    s.apply_delta(d)
}

impl fmt::Display for UserState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.c, self.e, self.tr)
    }
}

impl FromStr for UserState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("expected \"c,e,tr\", got {s:?}")));
        }
        let mut levels = [0u8; 3];
        for (slot, part) in levels.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| Error::Parse(format!("bad state level {part:?} in {s:?}")))?;
        }
        UserState::new(levels[0], levels[1], levels[2])
    }
}

impl Serialize for UserState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UserState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
