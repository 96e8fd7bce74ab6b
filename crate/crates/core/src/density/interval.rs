use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{DensityError, GridDensity};
use crate::numeric::NeumaierAccumulator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// Greedy expansion from the peak cell.
    Exact,
    /// `mu +/- z sigma`.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub lo: f64,
    pub hi: f64,
    pub mass_captured: f64,
    pub method: IntervalMethod,
}

impl CredibleInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn check_mass(mass: f64) -> Result<(), DensityError> {
    if mass > 0.0 && mass < 1.0 {
        Ok(())
    } else {
        Err(DensityError::InvalidIntervalMass(mass))
    }
}

impl GridDensity {
    /// Cell range `[lo, hi]` built by walking outward from the peak, always
    /// taking the heavier neighbour, until `mass` is covered. On a tie the
    /// right cell is taken first and the left one on the next step.
    pub fn exact_interval_cells(&self, mass: f64) -> Result<(usize, usize, f64), DensityError> {
        check_mass(mass)?;
        let m = self.masses();
        let peak = self.argmax();
        let (mut lo, mut hi) = (peak, peak);
        let mut captured = NeumaierAccumulator::default();
        captured.add(m[peak]);
        // set after a tie was resolved rightward: the left cell goes next
        let mut left_owed = false;
        while captured.total() < mass {
            let left = (lo > 0).then(|| m[lo - 1]);
            let right = (hi + 1 < m.len()).then(|| m[hi + 1]);
            match (left, right) {
                (Some(l), Some(r)) if l > r || (left_owed && l == r) => {
                    lo -= 1;
                    captured.add(l);
                    left_owed = false;
                }
                (Some(l), Some(r)) if l == r => {
                    hi += 1;
                    captured.add(r);
                    left_owed = true;
                }
                (_, Some(r)) => {
                    hi += 1;
                    captured.add(r);
                    left_owed = false;
                }
                (Some(l), None) => {
                    lo -= 1;
                    captured.add(l);
                }
                (None, None) => break,
            }
        }
        Ok((lo, hi, captured.total()))
    }

    /// Tightest interval around the peak holding at least `mass`.
    pub fn credible_interval_exact(&self, mass: f64) -> Result<CredibleInterval, DensityError> {
        let (lo, hi, captured) = self.exact_interval_cells(mass)?;
        let g = self.grid();
        Ok(CredibleInterval {
            lo: g.x(lo),
            hi: g.x(hi),
            mass_captured: captured,
            method: IntervalMethod::Exact,
        })
    }

    /// Normal approximation `mu +/- z sigma`, clipped to `[0, 1]`.
    ///
    /// `mass_captured` reports the grid mass actually inside the bounds.
    pub fn credible_interval_normal(&self, mass: f64) -> Result<CredibleInterval, DensityError> {
        check_mass(mass)?;
        let z = normal_quantile(0.5 + mass / 2.0);
        let mu = self.mean();
        let sigma = self.variance().sqrt();
        let lo = (mu - z * sigma).clamp(0.0, 1.0);
        let hi = (mu + z * sigma).clamp(0.0, 1.0);
        let g = self.grid();
        let mut captured = NeumaierAccumulator::default();
        for (k, &f) in self.masses().iter().enumerate() {
            let x = g.x(k);
            if x >= lo && x <= hi {
                captured.add(f);
            }
        }
        Ok(CredibleInterval {
            lo,
            hi,
            mass_captured: captured.total(),
            method: IntervalMethod::Normal,
        })
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}
