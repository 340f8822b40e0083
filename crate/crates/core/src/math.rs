//! Scalar helpers shared by the log densities.

use statrs::function::gamma::ln_gamma;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normal log density with all constants.
#[inline]
pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// Half-normal log density on `x > 0`.
#[inline]
pub fn half_normal_lpdf(x: f64, sd: f64) -> f64 {
    normal_lpdf(x, 0.0, sd) + std::f64::consts::LN_2
}

/// Half-Cauchy log density on `x > 0`.
#[inline]
pub fn half_cauchy_lpdf(x: f64, scale: f64) -> f64 {
    let z = x / scale;
    std::f64::consts::LN_2 - std::f64::consts::PI.ln() - scale.ln() - (z * z).ln_1p()
}

/// Inverse-gamma log density, shape/scale convention.
#[inline]
pub fn inv_gamma_lpdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub use crate::sampler::diagnostics::quantile;

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Continuous, InverseGamma, Normal};

    #[test]
    fn stable_transforms() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((logistic(0.0) - 0.5).abs() < 1e-15);
        assert!((logit(logistic(1.3)) - 1.3).abs() < 1e-12);
        assert_eq!(logistic(-1000.0), 0.0);
    }

    #[test]
    fn densities_match_statrs() {
        let n = Normal::new(0.4, 1.7).unwrap();
        assert!((normal_lpdf(1.1, 0.4, 1.7) - n.ln_pdf(1.1)).abs() < 1e-12);
        let ig = InverseGamma::new(2.0, 8.0).unwrap();
        assert!((inv_gamma_lpdf(3.0, 2.0, 8.0) - ig.ln_pdf(3.0)).abs() < 1e-12);
        // half-Cauchy integrates to 1: check against the closed-form CDF
        let cdf = |x: f64| 2.0 / std::f64::consts::PI * (x / 2.0).atan();
        let h = 1e-4;
        let numeric = (cdf(1.0 + h) - cdf(1.0 - h)) / (2.0 * h);
        assert!((half_cauchy_lpdf(1.0, 2.0).exp() - numeric).abs() < 1e-8);
    }

    #[test]
    fn log_sum_exp_basic() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - 1000.0 - 2f64.ln()).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
