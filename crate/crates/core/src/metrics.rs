//! Service-agent metrics over sets of finished dialogues.
//!
//! * CR: fraction of dialogues ending in agreement.
//! * ATT: mean length of successful dialogues; absent without successes.
//! * UPA: `1 - (MAE_c/4 + MAE_e/3 + MAE_tr/5) / 3`, with absolute errors of
//!   the agent's estimate averaged over every turn of every dialogue.
//! * EI / TI / CI: mean final-minus-initial emotion, trust and cooperation.
//!
//! Standard deviations are taken across dialogues (sample deviation).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arena::Trajectory;
use crate::error::{Error, Result};
use crate::state_space::{Dimension, MAX_COOPERATION, MAX_EMOTION, MAX_TRUST};
use crate::user_model::DialogueOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub dialogues: usize,
    pub cr: MeanStd,
    pub att: Option<MeanStd>,
    pub upa: MeanStd,
    pub ei: MeanStd,
    pub ti: MeanStd,
    pub ci: MeanStd,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

fn ensure_terminal(trajectories: &[Trajectory]) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    if trajectories.iter().any(|t| !t.outcome.is_terminal()) {
        return Err(Error::contract("metrics over an unfinished dialogue"));
    }
    Ok(())
}

pub fn completion_rate(trajectories: &[Trajectory]) -> Result<f64> {
    ensure_terminal(trajectories)?;
    let successes = trajectories
        .iter()
        .filter(|t| t.outcome == DialogueOutcome::Success)
        .count();
    Ok(successes as f64 / trajectories.len() as f64)
}

pub fn avg_turns_to_target(trajectories: &[Trajectory]) -> Option<f64> {
    let lengths: Vec<f64> = trajectories
        .iter()
        .filter(|t| t.outcome == DialogueOutcome::Success)
        .map(|t| t.turn_count() as f64)
        .collect();
    (!lengths.is_empty()).then(|| lengths.iter().sum::<f64>() / lengths.len() as f64)
}

pub fn upa_from_maes(mae_c: f64, mae_e: f64, mae_tr: f64) -> f64 {
    1.0 - (mae_c / MAX_COOPERATION as f64 + mae_e / MAX_EMOTION as f64 + mae_tr / MAX_TRUST as f64) / 3.0
}

/// Per-dimension absolute-error sums and the number of turns they cover.
fn error_sums(t: &Trajectory) -> ([f64; 3], usize) {
    let mut sums = [0.0; 3];
    for turn in &t.turns {
        for (k, dim) in Dimension::ALL.into_iter().enumerate() {
            sums[k] += (turn.estimate.level(dim) as f64 - turn.state.level(dim) as f64).abs();
        }
    }
    (sums, t.turns.len())
}

pub fn upa(trajectories: &[Trajectory]) -> Result<f64> {
    let mut sums = [0.0; 3];
    let mut turns = 0usize;
    for t in trajectories {
        let (s, n) = error_sums(t);
        for k in 0..3 {
            sums[k] += s[k];
        }
        turns += n;
    }
    if turns == 0 {
        return Err(Error::Empty("turns with state estimates"));
    }
    let n = turns as f64;
    Ok(upa_from_maes(sums[0] / n, sums[1] / n, sums[2] / n))
}

/// `(ei, ti, ci)`: mean final-minus-initial emotion, trust, cooperation.
pub fn improvements(trajectories: &[Trajectory]) -> Result<(f64, f64, f64)> {
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let n = trajectories.len() as f64;
    let mut sums = [0.0; 3];
    for t in trajectories {
        let d = t.state_change();
        sums[0] += d[1] as f64;
        sums[1] += d[2] as f64;
        sums[2] += d[0] as f64;
    }
    Ok((sums[0] / n, sums[1] / n, sums[2] / n))
}

pub fn compute(trajectories: &[Trajectory]) -> Result<MetricBundle> {
    ensure_terminal(trajectories)?;
    let success: Vec<f64> = trajectories
        .iter()
        .map(|t| (t.outcome == DialogueOutcome::Success) as u8 as f64)
        .collect();
    let lengths: Vec<f64> = trajectories
        .iter()
        .filter(|t| t.outcome == DialogueOutcome::Success)
        .map(|t| t.turn_count() as f64)
        .collect();
    let per_dialogue_upa: Vec<f64> = trajectories
        .iter()
        .filter(|t| !t.turns.is_empty())
        .map(|t| {
            let (s, n) = error_sums(t);
            let n = n as f64;
            upa_from_maes(s[0] / n, s[1] / n, s[2] / n)
        })
        .collect();
    let change = |k: usize| -> Vec<f64> {
        trajectories.iter().map(|t| t.state_change()[k] as f64).collect()
    };
    let upa_std = if per_dialogue_upa.is_empty() {
        0.0
    } else {
        mean_std(&per_dialogue_upa).std
    };
    Ok(MetricBundle {
        dialogues: trajectories.len(),
        cr: mean_std(&success),
        att: (!lengths.is_empty()).then(|| mean_std(&lengths)),
        upa: MeanStd {
            mean: upa(trajectories)?,
            std: upa_std,
        },
        ei: mean_std(&change(1)),
        ti: mean_std(&change(2)),
        ci: mean_std(&change(0)),
    })
}

impl MetricBundle {
    pub const HEADER: &'static str = "dialogues,cr,cr_std,att,att_std,upa,upa_std,ei,ei_std,ti,ti_std,ci,ci_std";

    pub fn csv_row(&self) -> String {
        let (att, att_std) = match self.att {
            Some(a) => (format!("{:.6}", a.mean), format!("{:.6}", a.std)),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{:.6},{:.6},{att},{att_std},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.dialogues,
            self.cr.mean,
            self.cr.std,
            self.upa.mean,
            self.upa.std,
            self.ei.mean,
            self.ei.std,
            self.ti.mean,
            self.ti.std,
            self.ci.mean,
            self.ci.std
        )
    }
}

/// One-row table in the order CR (%), ATT, UPA, EI, TI, CI.
impl fmt::Display for MetricBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>14} {:>14} {:>16} {:>14} {:>14} {:>14}",
            "CR (%)", "ATT", "UPA", "EI", "TI", "CI"
        )?;
        let att = match self.att {
            Some(a) => format!("{:.1}±{:.1}", a.mean, a.std),
            None => "n/a".to_string(),
        };
        write!(
            f,
            "{:>14} {:>14} {:>16} {:>14} {:>14} {:>14}",
            format!("{:.1}±{:.1}", 100.0 * self.cr.mean, 100.0 * self.cr.std),
            att,
            format!("{:.3}±{:.3}", self.upa.mean, self.upa.std),
            format!("{:.2}±{:.2}", self.ei.mean, self.ei.std),
            format!("{:.2}±{:.2}", self.ti.mean, self.ti.std),
            format!("{:.2}±{:.2}", self.ci.mean, self.ci.std),
        )
    }
}
