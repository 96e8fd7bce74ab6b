//! Bayesian (Newbold) allocation of a sampling budget across strata.
//!
//! Each stratum's share is
//!
//! ```text
//! q_i = sqrt(C_i) sqrt(A_i) sqrt(n_i + 1) / sum_j sqrt(C_j) sqrt(A_j) sqrt(n_j + 1)
//! A_i = Pi_i^2 P_i (1 - P_i) / (n_i + 2)
//! ```
//!
//! with `Pi_i` the stratum's share of the corpus, `P_i` its presample
//! posterior mean, `n_i` its presample size and `C_i` its per-document cost.
//! The cost enters the numerator exactly as written above; with the default
//! `C_i = 1` its direction does not matter.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::GridDensity;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error(
        "allocation undefined: all strata degenerate (every A_i is zero); \
         add presample data or widen the priors"
    )]
    AllDegenerate,
    #[error("no strata to allocate")]
    NoStrata,
    #[error("stratum {label}: {reason}")]
    InvalidStratum { label: String, reason: String },
}

/// What the allocation needs to know about one stratum after its presample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumState {
    pub label: String,
    pub fraction: f64,
    pub cost: f64,
    pub presample_n: u64,
    pub presample_b: u64,
    pub posterior_mean: f64,
}

impl StratumState {
    pub fn from_posterior(
        label: impl Into<String>,
        fraction: f64,
        presample_n: u64,
        presample_b: u64,
        posterior: &GridDensity,
    ) -> Self {
        Self {
            label: label.into(),
            fraction,
            cost: 1.0,
            presample_n,
            presample_b,
            posterior_mean: posterior.mean(),
        }
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    fn validate(&self) -> Result<(), AllocationError> {
        let bad = |reason: String| {
            Err(AllocationError::InvalidStratum {
                label: self.label.clone(),
                reason,
            })
        };
        if !(0.0..=1.0).contains(&self.fraction) {
            return bad(format!("fraction {} outside [0, 1]", self.fraction));
        }
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return bad(format!("cost {} must be positive", self.cost));
        }
        if self.presample_b > self.presample_n {
            return bad(format!(
                "{} successes out of {} presampled",
                self.presample_b, self.presample_n
            ));
        }
        if !(0.0..=1.0).contains(&self.posterior_mean) {
            return bad(format!("posterior mean {} outside [0, 1]", self.posterior_mean));
        }
        Ok(())
    }
}

/// `A_i = Pi_i^2 P_i (1 - P_i) / (n_i + 2)`.
pub fn a_factor(s: &StratumState) -> f64 {
    let p = s.posterior_mean;
    s.fraction * s.fraction * p * (1.0 - p) / (s.presample_n as f64 + 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumAllocation {
    pub label: String,
    pub a_factor: f64,
    /// Real-valued share of the budget.
    pub q: f64,
    /// Total documents to judge in this stratum, presample included.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub total_budget: u64,
    pub per_stratum: Vec<StratumAllocation>,
    /// How integer rounding distributed the leftover documents.
    pub residual_note: String,
}

impl AllocationPlan {
    pub fn count(&self, label: &str) -> Option<u64> {
        self.per_stratum.iter().find(|s| s.label == label).map(|s| s.count)
    }
}

/// Allocates `total_budget` documents across `strata`.
pub fn newbold_allocate(strata: &[StratumState], total_budget: u64) -> Result<AllocationPlan, AllocationError> {
    if strata.is_empty() {
        return Err(AllocationError::NoStrata);
    }
    for s in strata {
        s.validate()?;
    }
    let a: Vec<f64> = strata.iter().map(a_factor).collect();
    let weights: Vec<f64> = strata
        .iter()
        .zip(&a)
        .map(|(s, &a)| s.cost.sqrt() * a.sqrt() * (s.presample_n as f64 + 1.0).sqrt())
        .collect();
    let total: f64 = crate::numeric::neumaier_sum(weights.iter().copied());
    if total <= 0.0 {
        return Err(AllocationError::AllDegenerate);
    }
    let q: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let (counts, leftover) = largest_remainder(strata, &q, total_budget);
    let residual_note = if leftover.is_empty() {
        "exact: no rounding needed".to_string()
    } else {
        format!(
            "largest remainder: +1 to {}",
            leftover
                .iter()
                .map(|&i| strata[i].label.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )
    };

    Ok(AllocationPlan {
        total_budget,
        per_stratum: strata
            .iter()
            .zip(a)
            .zip(q.iter().zip(counts))
            .map(|((s, a_factor), (&q, count))| StratumAllocation {
                label: s.label.clone(),
                a_factor,
                q,
                count,
            })
            .collect(),
        residual_note,
    })
}

/// Floors of `q_i * budget`, then one extra document each to the largest
/// fractional parts (ties: larger `Pi_i`, then label order). Returns the
/// counts and the indices that received an extra document.
fn largest_remainder(strata: &[StratumState], q: &[f64], budget: u64) -> (Vec<u64>, Vec<usize>) {
    let exact: Vec<f64> = q.iter().map(|&q| q * budget as f64).collect();
    let mut counts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut leftover = budget.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..strata.len()).filter(|&i| q[i] > 0.0).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        fj.partial_cmp(&fi)
            .unwrap_or(Ordering::Equal)
            .then(
                strata[j]
                    .fraction
                    .partial_cmp(&strata[i].fraction)
                    .unwrap_or(Ordering::Equal),
            )
            .then_with(|| strata[i].label.cmp(&strata[j].label))
    });
    let mut bumped = Vec::new();
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        bumped.push(i);
        leftover -= 1;
    }
    (counts, bumped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(label: &str, fraction: f64, mean: f64, n: u64) -> StratumState {
        StratumState {
            label: label.into(),
            fraction,
            cost: 1.0,
            presample_n: n,
            presample_b: 0,
            posterior_mean: mean,
        }
    }

    #[test]
    fn a_factor_substitution() {
        assert_eq!(a_factor(&state("s", 0.5, 0.5, 0)), 0.03125);
        // 0.92484^2 (11/12)(1/12) / 12, evaluated directly
        let a = a_factor(&state("s", 0.92484, 11.0 / 12.0, 10));
        assert!((a - 5.444_802_825e-3).abs() < 1e-12, "{a}");
        assert_eq!(a_factor(&state("s", 0.7, 1.0, 3)), 0.0);
        assert_eq!(a_factor(&state("s", 0.0, 0.4, 3)), 0.0);
    }

    #[test]
    fn replica_presample_gives_15_and_185() {
        let strata = [
            state("apparent_pseudo", 3444.0 / 45820.0, 1.0 / 12.0, 10),
            state("apparent_real", 42376.0 / 45820.0, 11.0 / 12.0, 10),
        ];
        let plan = newbold_allocate(&strata, 200).unwrap();
        assert_eq!(plan.count("apparent_pseudo"), Some(15));
        assert_eq!(plan.count("apparent_real"), Some(185));
        // P(1-P) and n are equal, so q is proportional to Pi
        assert!((plan.per_stratum[0].q - 3444.0 / 45820.0).abs() < 1e-12);
    }

    #[test]
    fn identical_strata_split_evenly() {
        let strata = [state("a", 0.5, 0.3, 4), state("b", 0.5, 0.3, 4)];
        for budget in [2, 10, 200, 1000] {
            let plan = newbold_allocate(&strata, budget).unwrap();
            assert_eq!(plan.count("a"), Some(budget / 2));
            assert_eq!(plan.count("b"), Some(budget / 2));
        }
    }

    #[test]
    fn equal_heterogeneity_is_proportional() {
        let strata = [state("a", 0.2, 0.5, 0), state("b", 0.3, 0.5, 0), state("c", 0.5, 0.5, 0)];
        let plan = newbold_allocate(&strata, 100).unwrap();
        let counts: Vec<u64> = plan.per_stratum.iter().map(|s| s.count).collect();
        assert_eq!(counts, [20, 30, 50]);
    }

    #[test]
    fn degenerate_strata_get_nothing() {
        let strata = [state("a", 0.5, 1.0, 10), state("b", 0.5, 0.5, 10)];
        let plan = newbold_allocate(&strata, 7).unwrap();
        assert_eq!(plan.count("a"), Some(0));
        assert_eq!(plan.count("b"), Some(7));
    }

    #[test]
    fn all_degenerate_is_an_error() {
        let strata = [state("a", 0.5, 1.0, 10), state("b", 0.5, 0.0, 10)];
        assert_eq!(newbold_allocate(&strata, 10).unwrap_err(), AllocationError::AllDegenerate);
        assert_eq!(newbold_allocate(&[], 10).unwrap_err(), AllocationError::NoStrata);
    }

    #[test]
    fn rounding_tie_goes_to_larger_fraction() {
        // q = (1/3, 1/3, 1/3) up to the Pi weights; make remainders tie
        let strata = [state("a", 0.25, 0.5, 0), state("b", 0.25, 0.5, 0)];
        let plan = newbold_allocate(&strata, 3).unwrap();
        // equal fractions: label order breaks the tie
        assert_eq!(plan.count("a"), Some(2));
        assert_eq!(plan.count("b"), Some(1));
        assert!(plan.residual_note.contains('a'));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut s = state("a", 1.0, 0.5, 1);
        s.cost = 0.0;
        assert!(newbold_allocate(&[s], 10).is_err());
        let mut s = state("a", 1.0, 0.5, 1);
        s.presample_b = 2;
        assert!(newbold_allocate(&[s], 10).is_err());
    }

    fn strata_strategy() -> impl Strategy<Value = Vec<StratumState>> {
        proptest::collection::vec((0.01f64..1.0, 0.01f64..0.99, 0u64..50), 1..6).prop_map(|raw| {
            let total: f64 = raw.iter().map(|r| r.0).sum();
            raw.into_iter()
                .enumerate()
                .map(|(i, (f, p, n))| state(&format!("s{i}"), f / total, p, n))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn counts_sum_to_budget(strata in strata_strategy(), budget in 0u64..5000) {
            let plan = newbold_allocate(&strata, budget).unwrap();
            prop_assert_eq!(plan.per_stratum.iter().map(|s| s.count).sum::<u64>(), budget);
            let qsum: f64 = plan.per_stratum.iter().map(|s| s.q).sum();
            prop_assert!((qsum - 1.0).abs() < 1e-12);
            for s in &plan.per_stratum {
                prop_assert!((s.count as f64 - s.q * budget as f64).abs() < 1.0);
            }
        }

        #[test]
        fn common_cost_scale_is_irrelevant(strata in strata_strategy(), scale in 0.01f64..100.0) {
            let base = newbold_allocate(&strata, 100).unwrap();
            let scaled: Vec<_> = strata.iter().cloned().map(|s| s.with_cost(scale)).collect();
            let scaled = newbold_allocate(&scaled, 100).unwrap();
            for (a, b) in base.per_stratum.iter().zip(&scaled.per_stratum) {
                prop_assert!((a.q - b.q).abs() < 1e-12);
            }
        }

        #[test]
        fn larger_share_never_lowers_q(strata in strata_strategy(), bump in 1.01f64..3.0) {
            prop_assume!(strata.len() >= 2);
            let before = newbold_allocate(&strata, 100).unwrap().per_stratum[0].q;
            let mut grown = strata.clone();
            grown[0].fraction *= bump;
            let total: f64 = grown.iter().map(|s| s.fraction).sum();
            for s in &mut grown {
                s.fraction /= total;
            }
            let after = newbold_allocate(&grown, 100).unwrap().per_stratum[0].q;
            prop_assert!(after >= before - 1e-12);
        }
    }
}
