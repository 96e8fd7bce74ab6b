//! Order-fixed compensated summation.
//!
//! Every reduction over grid masses goes through [`neumaier_sum`] so results
//! are bitwise reproducible and do not drift with grid size.

/// Neumaier (improved Kahan) summation over an iterator, in iteration order.
pub fn neumaier_sum<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut acc = NeumaierAccumulator::default();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

/// Running compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierAccumulator {
    sum: f64,
    compensation: f64,
}

impl NeumaierAccumulator {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_small_terms_lost_by_naive_sum() {
        let values = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(values), 2.0);
        assert_eq!(values.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn many_equal_masses_sum_to_one() {
        let n = 100_001;
        let total = neumaier_sum(std::iter::repeat_n(1.0 / n as f64, n));
        assert!((total - 1.0).abs() < 1e-15);
    }
}
