//! Accuracy statistics.

use crate::{Error, Result};

/// Chance-corrected accuracy `a'`, clamped at zero.
///
/// `a' = (a_o - a_c) / (1 - a_c)` when `a_o > a_c`, else `0`. This is Cohen's
/// kappa with the expected agreement fixed to the chance accuracy.
pub fn chance_corrected(observed: f64, chance: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&chance) {
        return Err(Error::BadChance(chance));
    }
    if !(0.0..=1.0).contains(&observed) {
        return Err(Error::BadAccuracy(observed));
    }
    if observed > chance {
        Ok((observed - chance) / (1.0 - chance))
    } else {
        Ok(0.0)
    }
}

/// Chance accuracy of a balanced task with `classes` classes.
pub fn uniform_chance(classes: usize) -> f64 {
    1.0 / classes as f64
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(chance_corrected(0.75, 0.5).unwrap(), 0.5);
        assert_eq!(chance_corrected(0.2, 0.2).unwrap(), 0.0);
        assert_eq!(chance_corrected(0.1, 0.2).unwrap(), 0.0);
        for chance in [0.0, 0.2, 0.5, 0.9] {
            assert_eq!(chance_corrected(1.0, chance).unwrap(), 1.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(chance_corrected(0.5, 1.0), Err(Error::BadChance(1.0)));
        assert!(chance_corrected(0.5, -0.1).is_err());
        assert!(chance_corrected(1.5, 0.5).is_err());
        assert!(chance_corrected(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((normal_cdf(2.0) - 0.977_249_868_051_820_8).abs() < 1e-12);
    }
}
