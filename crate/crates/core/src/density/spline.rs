//! Natural cubic spline through reviewer-elicited likelihood points.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DensityError, Grid, GridDensity};

/// Minimum number of knots for an elicited prior.
pub const MIN_PRIOR_POINTS: usize = 4;

/// Who supplied an elicited prior, and when.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
}

/// One elicited `(x, likelihood)` knot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorPoint {
    pub x: f64,
    pub likelihood: f64,
}

/// A personal likelihood curve given as knots on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitedPrior {
    pub points: Vec<PriorPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ElicitedPrior {
    pub fn new(points: Vec<PriorPoint>) -> Result<Self, DensityError> {
        let prior = Self {
            points,
            provenance: None,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, DensityError> {
        Self::new(
            pairs
                .iter()
                .map(|&(x, likelihood)| PriorPoint { x, likelihood })
                .collect(),
        )
    }

    /// Eleven knots at `x = 0, 0.1, ..., 1.0`.
    pub fn at_tenths(likelihoods: [f64; 11]) -> Result<Self, DensityError> {
        Self::new(
            likelihoods
                .iter()
                .enumerate()
                .map(|(i, &likelihood)| PriorPoint {
                    x: i as f64 / 10.0,
                    likelihood,
                })
                .collect(),
        )
    }

    pub fn with_provenance(mut self, reviewer: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        self.provenance = Some(Provenance {
            reviewer: reviewer.into(),
            timestamp,
        });
        self
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        let invalid = |msg: String| Err(DensityError::InvalidPrior(msg));
        let pts = &self.points;
        if pts.len() < MIN_PRIOR_POINTS {
            return invalid(format!(
                "need at least {MIN_PRIOR_POINTS} points, got {}",
                pts.len()
            ));
        }
        if pts[0].x != 0.0 {
            return invalid(format!("first point must be at x = 0, got {}", pts[0].x));
        }
        if pts[pts.len() - 1].x != 1.0 {
            return invalid(format!(
                "last point must be at x = 1, got {}",
                pts[pts.len() - 1].x
            ));
        }
        for (i, p) in pts.iter().enumerate() {
            if !p.x.is_finite() || !p.likelihood.is_finite() {
                return invalid(format!("point {i} is not finite"));
            }
            if p.likelihood < 0.0 {
                return invalid(format!("point {i} has negative likelihood {}", p.likelihood));
            }
        }
        if let Some(i) = pts.windows(2).position(|w| w[1].x <= w[0].x) {
            return invalid(format!(
                "x values must be strictly increasing (point {} at {} follows {})",
                i + 1,
                pts[i + 1].x,
                pts[i].x
            ));
        }
        if pts.iter().all(|p| p.likelihood == 0.0) {
            return invalid("likelihoods are all zero".to_string());
        }
        Ok(())
    }
}

/// Natural cubic spline (zero second derivative at both ends).
#[derive(Debug, Clone)]
pub struct NaturalCubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    second: Vec<f64>,
}

impl NaturalCubicSpline {
    /// Fits the spline; `xs` must be strictly increasing with at least two
    /// knots.
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self, DensityError> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(DensityError::InvalidPrior(
                "spline needs at least two knots with matching values".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DensityError::InvalidPrior(
                "spline knots must be strictly increasing".into(),
            ));
        }

        // Tridiagonal system for the interior second derivatives, solved by
        // forward elimination and back substitution.
        let mut second = vec![0.0; n];
        let mut u = vec![0.0; n];
        for i in 1..n - 1 {
            let sig = (xs[i] - xs[i - 1]) / (xs[i + 1] - xs[i - 1]);
            let p = sig * second[i - 1] + 2.0;
            second[i] = (sig - 1.0) / p;
            let slope_diff =
                (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]) - (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
            u[i] = (6.0 * slope_diff / (xs[i + 1] - xs[i - 1]) - sig * u[i - 1]) / p;
        }
        second[n - 1] = 0.0;
        for k in (0..n - 1).rev() {
            second[k] = second[k] * second[k + 1] + u[k];
        }
        second[0] = 0.0;

        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            second,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let hi = self.xs.partition_point(|&v| v < x).clamp(1, self.xs.len() - 1);
        self.eval_segment(hi - 1, x)
    }

    fn eval_segment(&self, lo: usize, x: f64) -> f64 {
        let hi = lo + 1;
        let h = self.xs[hi] - self.xs[lo];
        let a = (self.xs[hi] - x) / h;
        let b = (x - self.xs[lo]) / h;
        a * self.ys[lo]
            + b * self.ys[hi]
            + ((a * a * a - a) * self.second[lo] + (b * b * b - b) * self.second[hi]) * (h * h)
                / 6.0
    }

    /// Evaluates at every point of an ascending sequence in one sweep.
    pub fn eval_sorted(&self, xs: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut seg = 0;
        let last_seg = self.xs.len() - 2;
        xs.map(|x| {
            while seg < last_seg && x > self.xs[seg + 1] {
                seg += 1;
            }
            self.eval_segment(seg, x)
        })
        .collect()
    }
}

/// Splines the elicited points onto `grid`, clamps negative excursions to
/// zero and normalizes to unit mass.
pub fn spline_prior(elicited: &ElicitedPrior, grid: Grid) -> Result<GridDensity, DensityError> {
    elicited.validate()?;
    let xs: Vec<f64> = elicited.points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = elicited.points.iter().map(|p| p.likelihood).collect();
    let spline = NaturalCubicSpline::fit(&xs, &ys)?;
    let masses = spline
        .eval_sorted(grid.xs())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    GridDensity::from_weights(grid, masses).map_err(|e| match e {
        DensityError::ZeroMass => DensityError::DegeneratePrior,
        other => other,
    })
}
