//! Small numeric helpers: normal CDF/quantile and seed derivation.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Inverse standard normal CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("quantile level {p} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

/// Two-sided critical value: the normal quantile at `(1 + alpha) / 2`.
pub fn z_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("confidence level {alpha} outside (0, 1)")));
    }
    normal_quantile((1.0 + alpha) / 2.0)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent RNG seed from a base seed and stream coordinates.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Incremental mean: exact when every element is equal.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter()
        .enumerate()
        .fold(0.0, |m, (i, &x)| m + (x - m) / (i + 1) as f64)
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// CDF by composite Simpson integration of the density from 0.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..n {
            acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + acc * h / 3.0
    }

    /// Secant search against the quadrature CDF.
    fn quantile_oracle(p: f64) -> f64 {
        let (mut a, mut b) = (0.5, 2.5);
        for _ in 0..60 {
            let (fa, fb) = (cdf_by_quadrature(a) - p, cdf_by_quadrature(b) - p);
            if (fb - fa).abs() < 1e-300 {
                break;
            }
            let c = b - fb * (b - a) / (fb - fa);
            a = b;
            b = c;
        }
        b
    }

    #[test]
    fn z_values_match_quadrature_oracle() {
        let z95 = z_value(0.95).unwrap();
        assert!((z95 - 1.959_96).abs() < 1e-4, "{z95}");
        assert!((z95 - quantile_oracle(0.975)).abs() < 1e-8);
        let z68 = z_value(0.6827).unwrap();
        assert!((z68 - quantile_oracle((1.0 + 0.6827) / 2.0)).abs() < 1e-8);
        assert!((z68 - 1.0).abs() < 5e-4);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[0.001, 0.1, 0.5, 0.8, 0.999] {
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() < 1e-9);
        }
        assert!(normal_quantile(0.0).is_err());
        assert!(z_value(1.0).is_err());
    }

    #[test]
    fn mean_is_exact_on_constant_input() {
        let x = 0.1 + 0.2;
        assert_eq!(mean(&[x; 20]), x);
        assert_eq!(std_dev(&[x; 20]), 0.0);
        let xs = [1.0, 2.0, 4.5, -3.25];
        assert!((mean(&xs) - xs.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(mix_seed(42, &[0]), mix_seed(42, &[1]));
        assert_ne!(mix_seed(42, &[0, 1]), mix_seed(42, &[1, 0]));
        assert_eq!(mix_seed(7, &[3, 4]), mix_seed(7, &[3, 4]));
    }
}
