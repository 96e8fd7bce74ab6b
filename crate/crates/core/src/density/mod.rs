//! Grid-based probability numerics.
//!
//! Every likelihood, prior, posterior and combined estimate is a
//! [`GridDensity`]: a probability mass per grid point on `[0, 1]` that sums
//! to one. Sums use compensated summation in index order so results do not
//! depend on thread count.

mod grid;
mod interval;
mod serde_repr;
mod spline;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::numeric::{neumaier_sum, NeumaierAccumulator};

pub use grid::{Grid, DEFAULT_STEP, FINEST_STEP};
pub use interval::{CredibleInterval, IntervalMethod};
pub use spline::{spline_prior, ElicitedPrior, NaturalCubicSpline, PriorPoint, Provenance, MIN_PRIOR_POINTS};

/// Densities sent to charts are bucketed down to at most this many points.
pub const MAX_CHART_POINTS: usize = 2_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("invalid grid step {0}: 1/step must be an integer between 1 and 10^6")]
    InvalidStep(f64),
    #[error("densities are on different grids (step {left} vs {right})")]
    GridMismatch { left: f64, right: f64 },
    #[error("invalid tally: {successes} successes out of {trials} trials")]
    InvalidTally { trials: u64, successes: u64 },
    #[error("invalid elicited prior: {0}")]
    InvalidPrior(String),
    #[error("degenerate prior: splined likelihood is zero everywhere on the grid")]
    DegeneratePrior,
    #[error("prior excludes all data-supported values")]
    PriorExcludesData,
    #[error("density has no mass")]
    ZeroMass,
    #[error("invalid mass: {0}")]
    InvalidMass(String),
    #[error("requested interval mass {0} is not in (0, 1)")]
    InvalidIntervalMass(f64),
}

/// Probability mass per grid point; always normalized to unit total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_repr::DensityRepr", into = "serde_repr::DensityRepr")]
pub struct GridDensity {
    grid: Grid,
    masses: Vec<f64>,
}

/// A chart-ready bucket of cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub x: f64,
    pub mass: f64,
}

impl GridDensity {
    /// Normalizes non-negative weights to unit mass.
    pub fn from_weights(grid: Grid, mut weights: Vec<f64>) -> Result<Self, DensityError> {
        if weights.len() != grid.len() {
            return Err(DensityError::InvalidMass(format!(
                "expected {} cells, got {}",
                grid.len(),
                weights.len()
            )));
        }
        if let Some(k) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(DensityError::InvalidMass(format!(
                "cell {k} has weight {}",
                weights[k]
            )));
        }
        let total = neumaier_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(DensityError::ZeroMass);
        }
        if !total.is_finite() {
            return Err(DensityError::InvalidMass("weights overflow".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            grid,
            masses: weights,
        })
    }

    /// Wraps masses that already sum to one, without rescaling.
    pub(crate) fn from_normalized(grid: Grid, masses: Vec<f64>) -> Self {
        debug_assert_eq!(masses.len(), grid.len());
        Self { grid, masses }
    }

    /// Constant mass `1 / l` at every grid point.
    pub fn uniform(grid: Grid) -> Self {
        let l = grid.len();
        Self {
            grid,
            masses: vec![1.0 / l as f64; l],
        }
    }

    /// All mass in the cell nearest `x`.
    pub fn point_mass(grid: Grid, x: f64) -> Self {
        let mut masses = vec![0.0; grid.len()];
        masses[grid.nearest_index(x)] = 1.0;
        Self { grid, masses }
    }

    /// Normalized binomial likelihood of `successes` out of `trials` as a
    /// function of the success proportion.
    pub fn binomial_likelihood(grid: Grid, trials: u64, successes: u64) -> Result<Self, DensityError> {
        if trials == 0 || successes > trials {
            return Err(DensityError::InvalidTally { trials, successes });
        }
        let log_lik = binomial_log_likelihood(grid, trials, successes);
        let peak = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights = log_lik.into_iter().map(|l| (l - peak).exp()).collect();
        Self::from_weights(grid, weights)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn into_masses(self) -> Vec<f64> {
        self.masses
    }

    pub fn total_mass(&self) -> f64 {
        neumaier_sum(self.masses.iter().copied())
    }

    /// `mu = sum_k x_k f(x_k)`.
    pub fn mean(&self) -> f64 {
        let g = self.grid;
        neumaier_sum(self.masses.iter().enumerate().map(|(k, &f)| g.x(k) * f)).clamp(0.0, 1.0)
    }

    /// `sigma^2 = sum_k f(x_k) (x_k - mu)^2`.
    pub fn variance(&self) -> f64 {
        let g = self.grid;
        let mu = self.mean();
        neumaier_sum(self.masses.iter().enumerate().map(|(k, &f)| {
            let d = g.x(k) - mu;
            f * d * d
        }))
        .clamp(0.0, 0.25)
    }

    /// Lowest-index cell holding the maximum mass.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &m) in self.masses.iter().enumerate() {
            if m > self.masses[best] {
                best = k;
            }
        }
        best
    }

    /// Running cumulative masses, compensated.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = NeumaierAccumulator::default();
        self.masses
            .iter()
            .map(|&m| {
                acc.add(m);
                acc.total()
            })
            .collect()
    }

    /// Sums cells into at most `max_points` equal-width buckets; each bucket
    /// is reported at the midpoint of its first and last cell.
    pub fn downsample(&self, max_points: usize) -> Vec<ChartPoint> {
        let max_points = max_points.max(1);
        let width = self.masses.len().div_ceil(max_points);
        self.masses
            .chunks(width)
            .enumerate()
            .map(|(b, chunk)| {
                let first = b * width;
                let last = first + chunk.len() - 1;
                ChartPoint {
                    x: 0.5 * (self.grid.x(first) + self.grid.x(last)),
                    mass: neumaier_sum(chunk.iter().copied()),
                }
            })
            .collect()
    }

    /// Two-column `x mass` text for external plotting.
    pub fn to_plot_data(&self) -> String {
        let decimals = self.grid.decimals();
        let mut out = String::with_capacity(self.masses.len() * 24);
        out.push_str("# x mass\n");
        for (k, m) in self.masses.iter().enumerate() {
            let _ = writeln!(out, "{:.*} {:e}", decimals, self.grid.x(k), m);
        }
        out
    }
}

/// Unnormalized `ln [C(n, b) x^b (1-x)^(n-b)]` at every grid point.
pub fn binomial_log_likelihood(grid: Grid, trials: u64, successes: u64) -> Vec<f64> {
    let n = trials as f64;
    let b = successes as f64;
    let failures = n - b;
    let log_choose = ln_gamma(n + 1.0) - ln_gamma(b + 1.0) - ln_gamma(failures + 1.0);
    grid.xs()
        .map(|x| {
            let hit = if successes == 0 { 0.0 } else { b * x.ln() };
            let miss = if successes == trials {
                0.0
            } else {
                failures * (-x).ln_1p()
            };
            log_choose + hit + miss
        })
        .collect()
}

/// Bayes' theorem on the grid: pointwise product, renormalized.
pub fn posterior(likelihood: &GridDensity, prior: &GridDensity) -> Result<GridDensity, DensityError> {
    check_same_grid(likelihood, prior)?;
    let product = likelihood
        .masses
        .iter()
        .zip(&prior.masses)
        .map(|(l, p)| l * p)
        .collect();
    GridDensity::from_weights(likelihood.grid, product).map_err(|e| match e {
        DensityError::ZeroMass => DensityError::PriorExcludesData,
        other => other,
    })
}

pub(crate) fn check_same_grid(a: &GridDensity, b: &GridDensity) -> Result<(), DensityError> {
    if a.grid != b.grid {
        return Err(DensityError::GridMismatch {
            left: a.grid.step(),
            right: b.grid.step(),
        });
    }
    Ok(())
}
