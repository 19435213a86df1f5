//! Group-relative policy optimization for tabular softmax policies.
//!
//! Each group holds rollouts of one initial profile. A trajectory's
//! advantage is its reward minus the group mean, and the gradient is
//! `sum_i A_i sum_t grad log pi(a_t | row_t)`, the exact gradient of the
//! surrogate `sum_i A_i sum_t log pi(a_t | row_t)` at the current logits.
//! There is no value network, ratio clipping or KL term.

use crate::agent::{log_softmax, softmax, TabularSoftmax};
use crate::error::{Error, Result};
use crate::user_model::DialogueOutcome;

/// Tolerance for the stale-parameter check on stored log-probabilities.
pub const LOG_PROB_TOLERANCE: f64 = 1e-9;

pub fn task_reward(outcome: DialogueOutcome) -> Result<f64> {
    match outcome {
        DialogueOutcome::Success => Ok(1.0),
        DialogueOutcome::Refusal | DialogueOutcome::Timeout => Ok(0.0),
        DialogueOutcome::Ongoing => Err(Error::contract("reward requested for an ongoing dialogue")),
    }
}

/// `A_i = R_i - mean(R)`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardedGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RewardedGroup {
    pub fn new(rewards: Vec<f64>) -> Self {
        let advantages = group_advantages(&rewards);
        Self { rewards, advantages }
    }

    pub fn is_uniform(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

/// One decision of a tabular policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStep {
    pub row: usize,
    pub action: usize,
    pub log_prob: f64,
}

/// Accumulates `A * grad log pi` for every step of every episode.
///
/// A stored log-probability that no longer matches the table means the
/// episode was generated under different parameters; that is rejected.
pub fn policy_gradient<'a>(
    table: &TabularSoftmax,
    episodes: impl IntoIterator<Item = (f64, &'a [PolicyStep])>,
) -> Result<Vec<f64>> {
    let cols = table.cols();
    let mut grad = vec![0.0; table.logits().len()];
    let mut step_no = 0usize;
    for (advantage, steps) in episodes {
        for step in steps {
            step_no += 1;
            if step.row >= table.rows() || step.action >= cols {
                return Err(Error::contract(format!(
                    "step ({}, {}) outside the {}x{} table",
                    step.row,
                    step.action,
                    table.rows(),
                    cols
                )));
            }
            if advantage == 0.0 {
                continue;
            }
            let row = table.row(step.row);
            let recomputed = log_softmax(row)[step.action];
            if (recomputed - step.log_prob).abs() > LOG_PROB_TOLERANCE {
                return Err(Error::StaleLogProb {
                    step: step_no - 1,
                    stored: step.log_prob,
                    recomputed,
                });
            }
            let probs = softmax(row);
            let out = &mut grad[step.row * cols..(step.row + 1) * cols];
            for (a, (g, p)) in out.iter_mut().zip(&probs).enumerate() {
                let indicator = if a == step.action { 1.0 } else { 0.0 };
                *g += advantage * (indicator - p);
            }
        }
    }
    Ok(grad)
}

/// The surrogate whose gradient [`policy_gradient`] returns.
pub fn surrogate_objective<'a>(
    table: &TabularSoftmax,
    episodes: impl IntoIterator<Item = (f64, &'a [PolicyStep])>,
) -> f64 {
    episodes
        .into_iter()
        .map(|(adv, steps)| {
            adv * steps
                .iter()
                .map(|s| log_softmax(table.row(s.row))[s.action])
                .sum::<f64>()
        })
        .sum()
}

/// Gradient ascent step `logits += lr * grad`. Nothing is written when any
/// gradient entry is non-finite.
pub fn apply_update(table: &mut TabularSoftmax, grad: &[f64], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate {lr} must be positive")));
    }
    if grad.len() != table.logits().len() {
        return Err(Error::contract("gradient shape does not match parameters"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} (row {}, column {})",
            i / table.cols(),
            i % table.cols()
        )));
    }
    for (x, g) in table.logits_mut().iter_mut().zip(grad) {
        *x += lr * g;
    }
    Ok(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RootSeed, StreamId};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn reward_is_success_indicator() {
        assert_eq!(task_reward(DialogueOutcome::Success).unwrap(), 1.0);
        assert_eq!(task_reward(DialogueOutcome::Refusal).unwrap(), 0.0);
        assert_eq!(task_reward(DialogueOutcome::Timeout).unwrap(), 0.0);
        assert!(task_reward(DialogueOutcome::Ongoing).is_err());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
        assert_eq!(group_advantages(&[1.0, 0.0]), vec![0.5, -0.5]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        for (x, r) in a.iter().zip([1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]) {
            let want = if r == 1.0 { 0.625 } else { -0.375 };
            assert_eq!(*x, want);
        }
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let table = TabularSoftmax::zeros(3, 10);
        let steps = [PolicyStep { row: 1, action: 2, log_prob: 0.1f64.ln() }];
        let g = policy_gradient(&table, [(0.0, &steps[..])]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_gradient_identity() {
        let table = TabularSoftmax::zeros(4, 10);
        let k = 7;
        let steps = [PolicyStep { row: 2, action: k, log_prob: 0.1f64.ln() }];
        let g = policy_gradient(&table, [(1.0, &steps[..])]).unwrap();
        for (i, x) in g.iter().enumerate() {
            let (row, a) = (i / 10, i % 10);
            let want = if row != 2 {
                0.0
            } else if a == k {
                0.9
            } else {
                -0.1
            };
            assert!((x - want).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn stale_log_prob_is_rejected() {
        let table = TabularSoftmax::zeros(2, 10);
        let steps = [PolicyStep { row: 0, action: 0, log_prob: -0.5 }];
        assert!(matches!(
            policy_gradient(&table, [(1.0, &steps[..])]),
            Err(Error::StaleLogProb { .. })
        ));
    }

    #[test]
    fn update_examples() {
        let mut rng = RootSeed(9).stream(StreamId::test(0));
        let logits: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = TabularSoftmax::from_logits(3, 10, logits).unwrap();

        let mut t = base.clone();
        apply_update(&mut t, &[0.0; 30], 0.05).unwrap();
        assert_eq!(t, base);

        let g: Vec<f64> = (0..30).map(|i| i as f64 * 0.25 - 3.0).collect();
        let mut t = base.clone();
        apply_update(&mut t, &g, 1.0).unwrap();
        for ((x, b), g) in t.logits().iter().zip(base.logits()).zip(&g) {
            assert_eq!(*x, b + g);
        }

        let g2: Vec<f64> = (0..30).map(|i| 0.5 - i as f64 * 0.125).collect();
        let mut seq = base.clone();
        apply_update(&mut seq, &g, 0.5).unwrap();
        apply_update(&mut seq, &g2, 0.5).unwrap();
        let sum: Vec<f64> = g.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let mut once = base.clone();
        apply_update(&mut once, &sum, 0.5).unwrap();
        for (a, b) in seq.logits().iter().zip(once.logits()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_writing() {
        let mut t = TabularSoftmax::zeros(1, 10);
        let mut g = vec![1.0; 10];
        g[4] = f64::NAN;
        assert!(matches!(apply_update(&mut t, &g, 0.1), Err(Error::NonFinite(_))));
        assert!(t.logits().iter().all(|&x| x == 0.0));
        assert!(apply_update(&mut t, &[0.0; 10], 0.0).is_err());
    }

    #[test]
    fn uniform_group_yields_no_update() {
        let table = TabularSoftmax::zeros(2, 10);
        let steps = [
            PolicyStep { row: 0, action: 3, log_prob: 0.1f64.ln() },
            PolicyStep { row: 1, action: 4, log_prob: 0.1f64.ln() },
        ];
        for reward in [0.0, 1.0] {
            let group = RewardedGroup::new(vec![reward; 8]);
            assert!(group.is_uniform());
            let g = policy_gradient(&table, group.advantages.iter().map(|&a| (a, &steps[..]))).unwrap();
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rewards in proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 1..=64)) {
            let a = group_advantages(&rewards);
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}
