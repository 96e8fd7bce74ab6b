//! Monte Carlo combination of stratum posteriors into the density of the
//! corpus-wide proportion `p = sum_i Pi_i p_i`.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{check_same_grid, CredibleInterval, DensityError, Grid, GridDensity};
use crate::sampler::{rng_for, Tally};

/// Default number of joint draws.
pub const DEFAULT_MC_DRAWS: u64 = 1_000_000;

/// ChaCha stream reserved for combination draws (stratum draws use the
/// stratum index).
pub const COMBINE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombineError {
    #[error("need one weight per posterior ({posteriors} posteriors, {weights} weights)")]
    LengthMismatch { posteriors: usize, weights: usize },
    #[error("weights sum to {0}, not 1")]
    WeightsNotNormalized(f64),
    #[error("weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("no posteriors to combine")]
    Empty,
    #[error("at least one Monte Carlo draw is required")]
    NoDraws,
    #[error("stratum {index} has no judged documents")]
    EmptyTally { index: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Inverse-CDF sampler over a density's grid cells.
#[derive(Debug, Clone)]
pub struct DensitySampler {
    cdf: Vec<f64>,
    last_positive: usize,
}

impl DensitySampler {
    pub fn new(d: &GridDensity) -> Self {
        let last_positive = d.masses().iter().rposition(|&m| m > 0.0).unwrap_or(0);
        Self {
            cdf: d.cumulative(),
            last_positive,
        }
    }

    /// Draws a cell index `k` with probability `f(x_k)`.
    pub fn sample_index(&self, rng: &mut ChaCha20Rng) -> usize {
        let total = self.cdf[self.last_positive];
        let target = rng.random::<f64>() * total;
        self.cdf
            .partition_point(|&c| c <= target)
            .min(self.last_positive)
    }
}

/// One draw of `x` from `d`.
pub fn sample_density(d: &GridDensity, rng: &mut ChaCha20Rng) -> f64 {
    d.grid().x(DensitySampler::new(d).sample_index(rng))
}

/// Grid cell nearest `sum_i w_i x_i` for picked cells `picks`.
pub fn combine_point(grid: Grid, picks: &[usize], weights: &[f64]) -> usize {
    let scaled: f64 = picks.iter().zip(weights).map(|(&k, &w)| w * k as f64).sum();
    grid.nearest_index_scaled(scaled)
}

fn validate(posteriors: &[GridDensity], weights: &[f64]) -> Result<(), CombineError> {
    if posteriors.is_empty() {
        return Err(CombineError::Empty);
    }
    if posteriors.len() != weights.len() {
        return Err(CombineError::LengthMismatch {
            posteriors: posteriors.len(),
            weights: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(CombineError::InvalidWeight(w));
    }
    let total = crate::numeric::neumaier_sum(weights.iter().copied());
    if (total - 1.0).abs() > 1e-12 {
        return Err(CombineError::WeightsNotNormalized(total));
    }
    for p in &posteriors[1..] {
        check_same_grid(&posteriors[0], p)?;
    }
    Ok(())
}

/// Simulates `draws` joint picks, one per posterior, and accumulates
/// `1 / draws` at the grid point nearest each weighted average.
pub fn monte_carlo_combine(
    posteriors: &[GridDensity],
    weights: &[f64],
    draws: u64,
    seed: u64,
) -> Result<GridDensity, CombineError> {
    validate(posteriors, weights)?;
    if draws == 0 {
        return Err(CombineError::NoDraws);
    }
    let grid = posteriors[0].grid();
    let samplers: Vec<DensitySampler> = posteriors.iter().map(DensitySampler::new).collect();
    let mut rng = rng_for(seed, COMBINE_STREAM);
    let mut counts = vec![0u64; grid.len()];
    let mut picks = vec![0usize; samplers.len()];
    for _ in 0..draws {
        for (pick, s) in picks.iter_mut().zip(&samplers) {
            *pick = s.sample_index(&mut rng);
        }
        counts[combine_point(grid, &picks, weights)] += 1;
    }
    let per_draw = draws as f64;
    Ok(GridDensity::from_normalized(
        grid,
        counts.into_iter().map(|c| c as f64 / per_draw).collect(),
    ))
}

/// `sum_i Pi_i b_i / n_i`.
pub fn weighted_mean(tallies: &[Tally], weights: &[f64]) -> Result<f64, CombineError> {
    if tallies.len() != weights.len() {
        return Err(CombineError::LengthMismatch {
            posteriors: tallies.len(),
            weights: weights.len(),
        });
    }
    tallies
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(index, (t, w))| {
            if t.trials == 0 {
                Err(CombineError::EmptyTally { index })
            } else {
                Ok(w * t.successes as f64 / t.trials as f64)
            }
        })
        .sum()
}

/// A combined density with what is needed to audit and reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Combination {
    pub density: GridDensity,
    /// 0 when a single stratum carried all the weight and its posterior was
    /// used directly.
    pub mc_draws: u64,
    pub seed: u64,
    /// `sum_i Pi_i mean(posterior_i)`.
    pub expected_mean: f64,
    /// Monte Carlo standard error of the combined mean.
    pub standard_error: f64,
}

/// Combines stratum posteriors. A stratum carrying all of the weight is
/// returned as is; otherwise the posteriors are simulated.
pub fn combine(
    posteriors: &[GridDensity],
    weights: &[f64],
    draws: u64,
    seed: u64,
) -> Result<Combination, CombineError> {
    validate(posteriors, weights)?;
    let expected_mean =
        crate::numeric::neumaier_sum(posteriors.iter().zip(weights).map(|(p, w)| w * p.mean()));
    let combined_var: f64 = posteriors
        .iter()
        .zip(weights)
        .map(|(p, w)| w * w * p.variance())
        .sum();

    let carriers: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if let [only] = carriers[..] {
        if weights[only] == 1.0 {
            return Ok(Combination {
                density: posteriors[only].clone(),
                mc_draws: 0,
                seed,
                expected_mean,
                standard_error: 0.0,
            });
        }
    }
    let density = monte_carlo_combine(posteriors, weights, draws, seed)?;
    Ok(Combination {
        density,
        mc_draws: draws,
        seed,
        expected_mean,
        standard_error: (combined_var / draws as f64).sqrt(),
    })
}

/// Interval endpoints scaled to document counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocInterval {
    pub lo: u64,
    pub hi: u64,
}

impl DocInterval {
    /// Rounds `lo * corpus_size` and `hi * corpus_size` to the nearest
    /// integer.
    pub fn from_fractions(interval: &CredibleInterval, corpus_size: u64) -> Self {
        let n = corpus_size as f64;
        Self {
            lo: (interval.lo * n).round() as u64,
            hi: (interval.hi * n).round() as u64,
        }
    }

    pub fn width(&self) -> u64 {
        self.hi - self.lo
    }
}

/// The reported estimate for one finalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedEstimate {
    pub mass: f64,
    pub mean: f64,
    pub weighted_mean_check: f64,
    pub mc_standard_error: f64,
    pub mc_draws: u64,
    pub seed: u64,
    pub interval: CredibleInterval,
    pub normal_interval: CredibleInterval,
    pub corpus_size: u64,
    pub doc_interval: DocInterval,
    pub doc_interval_width: u64,
}

/// Exact interval, normal-approximation interval and document counts.
pub fn finalize(combination: &Combination, corpus_size: u64, mass: f64) -> Result<CombinedEstimate, CombineError> {
    let d = &combination.density;
    let interval = d.credible_interval_exact(mass)?;
    let normal_interval = d.credible_interval_normal(mass)?;
    let doc_interval = DocInterval::from_fractions(&interval, corpus_size);
    Ok(CombinedEstimate {
        mass,
        mean: d.mean(),
        weighted_mean_check: combination.expected_mean,
        mc_standard_error: combination.standard_error,
        mc_draws: combination.mc_draws,
        seed: combination.seed,
        interval,
        normal_interval,
        corpus_size,
        doc_interval,
        doc_interval_width: doc_interval.width(),
    })
}
