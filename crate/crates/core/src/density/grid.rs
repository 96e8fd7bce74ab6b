use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::DensityError;

/// Default grid resolution: five significant digits on the proportion axis.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Finest supported grid resolution.
pub const FINEST_STEP: f64 = 1e-6;

/// An evenly spaced grid `x_k = k / m` for `k = 0..=m` on the unit interval.
///
/// Stored as the interval count `m` so that `1 / step` is an integer by
/// construction. Serializes as `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    intervals: u32,
}

impl Grid {
    pub fn with_intervals(intervals: u32) -> Result<Self, DensityError> {
        if intervals == 0 || intervals > 1_000_000 {
            return Err(DensityError::InvalidStep(if intervals == 0 {
                f64::INFINITY
            } else {
                1.0 / f64::from(intervals)
            }));
        }
        Ok(Self { intervals })
    }

    /// Builds a grid from a step size; `1 / step` must be an integer between
    /// 1 and 10^6.
    pub fn from_step(step: f64) -> Result<Self, DensityError> {
        if !step.is_finite() || step <= 0.0 || step > 1.0 {
            return Err(DensityError::InvalidStep(step));
        }
        let m = (1.0 / step).round();
        if m < 1.0 || m > 1_000_000.0 || (m * step - 1.0).abs() > 1e-9 {
            return Err(DensityError::InvalidStep(step));
        }
        Self::with_intervals(m as u32)
    }

    pub fn intervals(&self) -> u32 {
        self.intervals
    }

    pub fn step(&self) -> f64 {
        1.0 / f64::from(self.intervals)
    }

    /// Number of grid points, `m + 1`.
    pub fn len(&self) -> usize {
        self.intervals as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn x(&self, k: usize) -> f64 {
        k as f64 / f64::from(self.intervals)
    }

    pub fn xs(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.len()).map(move |k| self.x(k))
    }

    /// Index of the grid point nearest to `x`, with exact half-step ties
    /// going to the even index. `x` is clamped to the unit interval.
    pub fn nearest_index(&self, x: f64) -> usize {
        self.nearest_index_scaled(x * f64::from(self.intervals))
    }

    /// Same as [`Grid::nearest_index`] for a position already expressed in
    /// cell units (`x * m`).
    pub fn nearest_index_scaled(&self, scaled: f64) -> usize {
        let k = scaled.round_ties_even();
        if k <= 0.0 || k.is_nan() {
            0
        } else if k >= f64::from(self.intervals) {
            self.intervals as usize
        } else {
            k as usize
        }
    }

    /// Number of decimal places needed to print grid points exactly.
    pub fn decimals(&self) -> usize {
        let mut m = self.intervals;
        let mut digits = 0;
        while m > 1 && m % 10 == 0 {
            m /= 10;
            digits += 1;
        }
        if m == 1 {
            digits
        } else {
            digits + 6
        }
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            intervals: 100_000,
        }
    }
}

impl Serialize for Grid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.step().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let step = f64::deserialize(deserializer)?;
        Grid::from_step(step).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_five_digit_resolution() {
        let g = Grid::default();
        assert_eq!(g.len(), 100_001);
        assert_eq!(g.step(), DEFAULT_STEP);
        assert_eq!(g.x(93_500), 0.935);
        assert_eq!(g.decimals(), 5);
    }

    #[test]
    fn finest_grid() {
        let g = Grid::from_step(FINEST_STEP).unwrap();
        assert_eq!(g.len(), 1_000_001);
    }

    #[test]
    fn rejects_non_integral_reciprocal() {
        assert!(Grid::from_step(0.3).is_err());
        assert!(Grid::from_step(0.0).is_err());
        assert!(Grid::from_step(1e-7).is_err());
        assert!(Grid::from_step(f64::NAN).is_err());
        assert!(Grid::from_step(0.5).is_ok());
    }

    #[test]
    fn nearest_index_ties_to_even() {
        let g = Grid::from_step(0.5).unwrap();
        assert_eq!(g.nearest_index(0.25), 0);
        assert_eq!(g.nearest_index(0.75), 2);
        assert_eq!(g.nearest_index(0.26), 1);
        assert_eq!(g.nearest_index(-3.0), 0);
        assert_eq!(g.nearest_index(7.0), 2);
    }

    #[test]
    fn serde_round_trip_through_step() {
        let g = Grid::from_step(1e-3).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, "0.001");
        assert_eq!(serde_json::from_str::<Grid>(&s).unwrap(), g);
        assert!(serde_json::from_str::<Grid>("0.3").is_err());
    }
}
