//! Observation-level variances.
//!
//! * Poisson delta-method variance of a log rate, `1 / (B * y)`.
//! * Monte Carlo variance of the log SBR:NMR ratio from two independent
//!   binomial models.
//! * Max-error imputation for observations without a known log-scale error.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, SourceType};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MIN_MC_SAMPLES: usize = 1_000;

/// Variance of `ln(y)` for a rate `y = D / B` with `D ~ Poisson(B * y)`.
/// `rate` is a fraction (deaths per birth), not per 1000.
pub fn log_sbr_variance(total_births: f64, rate: f64) -> Result<f64> {
    if !(total_births > 0.0 && total_births.is_finite()) {
        return Err(Error::Precondition(format!(
            "log-rate variance needs positive births, got {total_births}"
        )));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Precondition(format!(
            "log-rate variance undefined for rate {rate}"
        )));
    }
    Ok(1.0 / (total_births * rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioVarianceInput {
    /// Stillbirths.
    pub stillbirths: u64,
    pub total_births: u64,
    pub neonatal_deaths: u64,
    pub live_births: u64,
    pub n_samples: usize,
    pub seed: u64,
}

impl RatioVarianceInput {
    fn check(&self) -> Result<()> {
        if self.stillbirths > self.total_births {
            return Err(Error::Precondition(format!(
                "{} stillbirths exceed {} total births",
                self.stillbirths, self.total_births
            )));
        }
        if self.neonatal_deaths > self.live_births {
            return Err(Error::Precondition(format!(
                "{} neonatal deaths exceed {} live births",
                self.neonatal_deaths, self.live_births
            )));
        }
        if self.n_samples < MIN_MC_SAMPLES {
            return Err(Error::Precondition(format!(
                "at least {MIN_MC_SAMPLES} Monte Carlo samples required, got {}",
                self.n_samples
            )));
        }
        if self.stillbirths == 0 || self.neonatal_deaths == 0 {
            return Err(Error::Precondition(
                "ratio variance undefined for zero stillbirth or neonatal death counts".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioVariance {
    /// Sample variance of `ln(r)` over accepted draws.
    pub variance: f64,
    /// Monte Carlo standard error of `variance`.
    pub mc_se: f64,
    /// Share of draws discarded because a simulated count was zero.
    pub rejected_fraction: f64,
}

/// Delta-method approximation `(1-p_sb)/(t p_sb) + (1-p_nd)/(q p_nd)`.
pub fn delta_log_ratio_variance(input: &RatioVarianceInput) -> f64 {
    let psb = input.stillbirths as f64 / input.total_births as f64;
    let pnd = input.neonatal_deaths as f64 / input.live_births as f64;
    (1.0 - psb) / (input.total_births as f64 * psb) + (1.0 - pnd) / (input.live_births as f64 * pnd)
}

/// Monte Carlo variance of the log SBR:NMR ratio. Simulated draws with a
/// zero count are rejected and redrawn.
pub fn mc_log_ratio_variance(input: &RatioVarianceInput) -> Result<RatioVariance> {
    input.check()?;
    let t = input.total_births as f64;
    let q = input.live_births as f64;
    let sb = Binomial::new(input.total_births, input.stillbirths as f64 / t)
        .map_err(|e| Error::Precondition(format!("stillbirth binomial: {e}")))?;
    let nd = Binomial::new(input.live_births, input.neonatal_deaths as f64 / q)
        .map_err(|e| Error::Precondition(format!("neonatal binomial: {e}")))?;
    let mut rng = rng_from(input.seed);
    let log_tq = (q / t).ln();

    let n = input.n_samples;
    let mut draws = Vec::with_capacity(n);
    let mut rejected = 0usize;
    // Bounded so a pathological input cannot loop forever.
    let max_attempts = n.saturating_mul(1000);
    let mut attempts = 0usize;
    while draws.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Precondition(
                "ratio simulation rejected too many zero-count draws".into(),
            ));
        }
        let z = sb.sample(&mut rng);
        let m = nd.sample(&mut rng);
        if z == 0 || m == 0 {
            rejected += 1;
            continue;
        }
        draws.push((z as f64).ln() - (m as f64).ln() + log_tq);
    }
    let nf = n as f64;
    let mean = draws.iter().sum::<f64>() / nf;
    let m2 = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let variance = m2 * nf / (nf - 1.0);
    let mc_se = ((m4 - m2 * m2).max(0.0) / nf).sqrt();
    Ok(RatioVariance {
        variance,
        mc_se,
        rejected_fraction: rejected as f64 / (rejected + n) as f64,
    })
}

/// Source types that still have observations without `log_se` and no
/// observation with a known one.
fn unimputable(observations: &[Observation]) -> Vec<SourceType> {
    let mut known = BTreeMap::new();
    let mut missing = BTreeMap::new();
    for o in observations {
        match o.log_se {
            Some(_) => *known.entry(o.source_type).or_insert(0usize) += 1,
            None => *missing.entry(o.source_type).or_insert(0usize) += 1,
        }
    }
    missing.keys().filter(|s| !known.contains_key(*s)).copied().collect()
}

/// Fills absent `log_se` values with the largest known `log_se` of the same
/// source type.
pub fn impute_max_error(observations: &[Observation]) -> Result<Vec<Observation>> {
    let bad = unimputable(observations);
    if !bad.is_empty() {
        let names: Vec<_> = bad.iter().map(|s| s.as_str()).collect();
        return Err(Error::Precondition(format!(
            "no observation with a known standard error for source type(s): {}",
            names.join(", ")
        )));
    }
    let mut max_se: BTreeMap<SourceType, f64> = BTreeMap::new();
    for o in observations {
        if let Some(se) = o.log_se {
            let e = max_se.entry(o.source_type).or_insert(se);
            *e = e.max(se);
        }
    }
    Ok(observations
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if o.log_se.is_none() {
                o.log_se = Some(max_se[&o.source_type]);
            }
            o
        })
        .collect())
}

/// Fills `log_se` from the Poisson approximation wherever the observation
/// carries total births and the field is absent. Survey errors are never
/// derived this way; they come pre-computed.
pub fn attach_poisson_errors(observations: &[Observation]) -> Vec<Observation> {
    observations
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if o.log_se.is_none() && o.source_type != SourceType::Survey {
                if let Some(b) = o.total_births {
                    if let Ok(v) = log_sbr_variance(b, o.sbr / 1000.0) {
                        o.log_se = Some(v.sqrt());
                    }
                }
            }
            o
        })
        .collect()
}

/// Draws `n` Poisson(`lambda`) values conditioned on being at least 1 and
/// returns the sample variance of their logs. Test-only oracle support.
#[doc(hidden)]
pub fn conditioned_poisson_log_variance<R: Rng>(lambda: f64, n: usize, rng: &mut R) -> f64 {
    let pois = rand_distr::Poisson::new(lambda).unwrap();
    let mut xs = Vec::with_capacity(n);
    while xs.len() < n {
        let d: f64 = pois.sample(rng);
        if d >= 1.0 {
            xs.push(d.ln());
        }
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
}
