//! Numerical checks of the standard bounds for sequences obeying
//! `x_t ≈ x_{t-1} ± c x_{t-1}^2` recursions.
//!
//! Each mode reports separately whether the recursion hypothesis holds along
//! the supplied sequence and whether the corresponding conclusion does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SequenceMode {
    /// Non-increasing with `x_t >= x_{t-1} - c x_{t-1}^2` and `c x_0 <= 1/2`
    /// gives `x_t >= 1 / (2 c t + 1/x_0)`.
    DecayLower { c: f64 },
    /// `x_t <= x_{t-1} - c x_{t-1}^2` gives `x_t <= 1 / (c t + 1/x_0)`.
    DecayUpper { c: f64 },
    /// `x_t >= x_{t-1} + c x_{t-1}^2` up to the first `t_0` with `x_{t_0} >= c_x`
    /// gives `t_0 <= (1 + c c_x) / (c x_0)`.
    HittingUpper { c: f64, c_x: f64 },
    /// `x_t <= x_{t-1} + c x_{t-1}^2` up to `t_0` gives
    /// `t_0 >= (1/x_0 - 1/x_{t_0}) / c`; checked for every prefix.
    HittingLower { c: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub mode: SequenceMode,
    /// First index at which the recursion hypothesis fails.
    pub hypothesis_failure: Option<usize>,
    /// First index at which the conclusion fails.
    pub violation: Option<usize>,
    /// Smallest slack of the conclusion over the checked indices.
    pub margin: f64,
}

impl SequenceReport {
    pub fn consistent(&self) -> bool {
        self.violation.is_none()
    }
}

fn leq(a: f64, b: f64) -> bool {
    a <= b + REL_TOL * a.abs().max(b.abs())
}

/// Checks the conclusion of the selected mode along `x`.
pub fn sequence_bound_check(x: &[f64], mode: SequenceMode) -> Result<SequenceReport> {
    if x.is_empty() {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    if let Some(t) = x.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput(format!("entry {t} is not positive: {}", x[t])));
    }
    let c = match mode {
        SequenceMode::DecayLower { c }
        | SequenceMode::DecayUpper { c }
        | SequenceMode::HittingUpper { c, .. }
        | SequenceMode::HittingLower { c } => c,
    };
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::InvalidInput(format!("constant must be nonnegative, got {c}")));
    }
    let x0 = x[0];
    let first = |pred: &dyn Fn(usize) -> bool, range: std::ops::Range<usize>| range.into_iter().find(|&t| !pred(t));
    let mut margin = f64::INFINITY;
    let (hypothesis_failure, violation) = match mode {
        SequenceMode::DecayLower { c } => {
            let hyp = if c * x0 > 0.5 {
                Some(0)
            } else {
                first(
                    &|t| leq(x[t], x[t - 1]) && leq(x[t - 1] - c * x[t - 1] * x[t - 1], x[t]),
                    1..x.len(),
                )
            };
            let mut bad = None;
            for (t, &v) in x.iter().enumerate() {
                let bound = 1.0 / (2.0 * c * t as f64 + 1.0 / x0);
                margin = margin.min(v - bound);
                if bad.is_none() && !leq(bound, v) {
                    bad = Some(t);
                }
            }
            (hyp, bad)
        }
        SequenceMode::DecayUpper { c } => {
            let hyp = first(&|t| leq(x[t], x[t - 1] - c * x[t - 1] * x[t - 1]), 1..x.len());
            let mut bad = None;
            for (t, &v) in x.iter().enumerate() {
                let bound = 1.0 / (c * t as f64 + 1.0 / x0);
                margin = margin.min(bound - v);
                if bad.is_none() && !leq(v, bound) {
                    bad = Some(t);
                }
            }
            (hyp, bad)
        }
        SequenceMode::HittingUpper { c, c_x } => match x.iter().position(|&v| v >= c_x) {
            None => (Some(x.len()), None),
            Some(t0) => {
                let hyp = first(&|t| leq(x[t - 1] + c * x[t - 1] * x[t - 1], x[t]), 1..t0 + 1);
                let bound = (1.0 + c * c_x) / (c * x0);
                margin = bound - t0 as f64;
                (hyp, (!leq(t0 as f64, bound)).then_some(t0))
            }
        },
        SequenceMode::HittingLower { c } => {
            let hyp = first(&|t| leq(x[t], x[t - 1] + c * x[t - 1] * x[t - 1]), 1..x.len());
            let mut bad = None;
            for (t0, &v) in x.iter().enumerate() {
                let bound = (1.0 / x0 - 1.0 / v) / c;
                let slack = t0 as f64 - bound;
                if slack.is_finite() {
                    margin = margin.min(slack);
                }
                if bad.is_none() && c > 0.0 && !leq(bound, t0 as f64) {
                    bad = Some(t0);
                }
            }
            (hyp, bad)
        }
    };
    Ok(SequenceReport {
        mode,
        hypothesis_failure,
        violation,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn harmonic(n: usize) -> Vec<f64> {
        (0..n).map(|t| 1.0 / (t as f64 + 1.0)).collect()
    }

    #[test]
    fn harmonic_sequence_meets_the_upper_decay_bound() {
        let rep = sequence_bound_check(&harmonic(50), SequenceMode::DecayUpper { c: 1.0 }).unwrap();
        assert!(rep.consistent());
        assert!(rep.margin.abs() < 1e-15);
    }

    #[test]
    fn constant_sequence_with_zero_constant() {
        let x = vec![0.3; 20];
        for mode in [SequenceMode::DecayUpper { c: 0.0 }, SequenceMode::DecayLower { c: 0.0 }] {
            let rep = sequence_bound_check(&x, mode).unwrap();
            assert!(rep.consistent());
            assert_eq!(rep.hypothesis_failure, None);
        }
    }

    #[test]
    fn planted_violation_is_located() {
        let mut x = harmonic(20);
        x[5] = 1.0;
        let rep = sequence_bound_check(&x, SequenceMode::DecayUpper { c: 1.0 }).unwrap();
        assert_eq!(rep.violation, Some(5));
        assert!(rep.margin < 0.0);
    }

    #[test]
    fn nonpositive_entries_are_rejected() {
        assert!(sequence_bound_check(&[1.0, 0.0], SequenceMode::DecayUpper { c: 1.0 }).is_err());
        assert!(sequence_bound_check(&[], SequenceMode::DecayUpper { c: 1.0 }).is_err());
    }

    #[test]
    fn hitting_time_too_late_is_flagged() {
        // Grows far more slowly than the hypothesis allows, so the crossing is late.
        let x: Vec<f64> = (0..200).map(|t| 0.1 + 1e-3 * t as f64).collect();
        let rep = sequence_bound_check(&x, SequenceMode::HittingUpper { c: 1.0, c_x: 0.2 }).unwrap();
        assert_eq!(rep.violation, Some(100));
        assert!(rep.hypothesis_failure.is_some());
    }

    fn run_recursion(x0: f64, c: f64, sign: f64, shrink: f64, n: usize) -> Vec<f64> {
        let mut x = vec![x0];
        for _ in 1..n {
            let prev = *x.last().unwrap();
            if prev > 1.0 {
                break;
            }
            x.push(prev + sign * shrink * c * prev * prev);
        }
        x
    }

    proptest! {
        #[test]
        fn decay_recursions_satisfy_both_bounds(x0 in 0.01f64..1.0, c in 0.01f64..0.5, slack in 0.0f64..1.0) {
            prop_assume!(c * x0 <= 0.5);
            let x = run_recursion(x0, c, -1.0, 1.0, 300);
            let lower = sequence_bound_check(&x, SequenceMode::DecayLower { c }).unwrap();
            let upper = sequence_bound_check(&x, SequenceMode::DecayUpper { c }).unwrap();
            prop_assert_eq!(lower.hypothesis_failure, None);
            prop_assert!(lower.consistent());
            prop_assert!(upper.consistent());
            // a faster decay still satisfies the upper bound
            let faster = run_recursion(x0, c, -1.0, 1.0 + slack, 300);
            if faster.iter().all(|v| *v > 0.0) {
                let rep = sequence_bound_check(&faster, SequenceMode::DecayUpper { c }).unwrap();
                prop_assert!(rep.consistent());
            }
        }

        #[test]
        fn growth_recursions_satisfy_hitting_bounds(x0 in 0.01f64..0.2, c in 0.05f64..1.0) {
            let x = run_recursion(x0, c, 1.0, 1.0, 2000);
            let upper = sequence_bound_check(&x, SequenceMode::HittingUpper { c, c_x: 0.5 }).unwrap();
            prop_assert!(upper.consistent());
            let lower = sequence_bound_check(&x, SequenceMode::HittingLower { c }).unwrap();
            prop_assert!(lower.consistent());
        }
    }
}
