//! Screening by the ratio of the stillbirth rate to the neonatal mortality
//! rate.
//!
//! High-quality data give the distribution of expected log-ratios,
//! `log r_i = theta_i + eps_i`, `theta_i ~ N(mu, sigma^2)`,
//! `eps_i ~ N(0, v_i^2)`. An observation whose ratio falls in the lower
//! tail of its predictive distribution is excluded as likely
//! underreporting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::adjust::AdjustedObservation;
use crate::data::{header_index, open_reader, Observation};
use crate::error::{Error, Result};
use crate::math::{half_normal_lpdf, normal_lpdf, quantile};
use crate::rng::{derive_seed, rng_from};
use crate::sampler::{sample, LogDensity, SamplerConfig};
use crate::variance::{mc_log_ratio_variance, RatioVarianceInput, DEFAULT_MC_SAMPLES};

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatioPriors {
    pub mu_mean: f64,
    pub mu_sd: f64,
    /// Scale of the half-normal prior on `sigma_theta`.
    pub sigma_scale: f64,
}

impl Default for RatioPriors {
    fn default() -> Self {
        RatioPriors { mu_mean: 0.0, mu_sd: 10.0, sigma_scale: 1.0 }
    }
}

/// Marginal model with `theta_i` integrated out:
/// `log r_i ~ N(mu, sigma^2 + v_i^2)`. Unconstrained layout `[mu, log sigma]`.
#[derive(Debug, Clone)]
pub struct RatioModel {
    log_r: Vec<f64>,
    v2: Vec<f64>,
    priors: RatioPriors,
}

impl RatioModel {
    pub fn new(data: &[(f64, f64)], priors: RatioPriors) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::Precondition(format!(
                "the ratio model needs at least 2 observations, got {}",
                data.len()
            )));
        }
        for &(r, v2) in data {
            if !(r > 0.0 && r.is_finite()) || !(v2 >= 0.0 && v2.is_finite()) {
                return Err(Error::Precondition(format!("invalid ratio observation (r = {r}, v2 = {v2})")));
            }
        }
        Ok(RatioModel {
            log_r: data.iter().map(|d| d.0.ln()).collect(),
            v2: data.iter().map(|d| d.1).collect(),
            priors,
        })
    }
}

impl LogDensity for RatioModel {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mu = x[0];
        let ls = x[1];
        let s2 = (2.0 * ls).exp();
        let p = &self.priors;
        let mut lp = normal_lpdf(mu, p.mu_mean, p.mu_sd) + half_normal_lpdf(s2.sqrt(), p.sigma_scale) + ls;
        grad[0] = -(mu - p.mu_mean) / (p.mu_sd * p.mu_sd);
        grad[1] = -s2 / (p.sigma_scale * p.sigma_scale) + 1.0;
        for (y, v2) in self.log_r.iter().zip(&self.v2) {
            let var = s2 + v2;
            let d = y - mu;
            lp += -0.5 * d * d / var - 0.5 * var.ln() - crate::math::LN_SQRT_2PI;
            grad[0] += d / var;
            // d/d(var) times d(var)/d(log sigma) = 2 sigma^2
            grad[1] += (0.5 * d * d / (var * var) - 0.5 / var) * 2.0 * s2;
        }
        if !lp.is_finite() {
            return Err(Error::NonFinite { block: "ratio model" });
        }
        Ok(lp)
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu_theta".into(), "sigma2_theta".into()]
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0], (2.0 * x[1]).exp()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointInterval {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl PointInterval {
    pub fn from_draws(xs: &[f64]) -> Self {
        PointInterval { median: quantile(xs, 0.5), lower: quantile(xs, 0.025), upper: quantile(xs, 0.975) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModelFit {
    pub mu_theta: PointInterval,
    /// Posterior median of `sigma_theta^2`.
    pub sigma2_theta: f64,
    pub sigma2_interval: PointInterval,
    /// Posterior draws of `(mu_theta, sigma_theta^2)`.
    #[serde(skip)]
    pub draws: Vec<(f64, f64)>,
}

impl RatioModelFit {
    /// A fit fixed at given point estimates, without draws.
    pub fn from_point(mu_theta: f64, sigma2_theta: f64) -> Self {
        RatioModelFit {
            mu_theta: PointInterval { median: mu_theta, lower: mu_theta, upper: mu_theta },
            sigma2_theta,
            sigma2_interval: PointInterval { median: sigma2_theta, lower: sigma2_theta, upper: sigma2_theta },
            draws: Vec::new(),
        }
    }

    /// Conditional draws of the setting-specific log-ratios, one per
    /// posterior draw: `theta_i | mu, sigma^2, log r_i` is normal.
    pub fn theta_draws(&self, log_r: f64, v2: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        self.draws
            .iter()
            .map(|&(mu, s2)| {
                if v2 == 0.0 {
                    return log_r;
                }
                let prec = 1.0 / s2 + 1.0 / v2;
                let mean = (mu / s2 + log_r / v2) / prec;
                mean + rng.sample::<f64, _>(StandardNormal) / prec.sqrt()
            })
            .collect()
    }
}

/// Fits the ratio hierarchy to high-quality `(r_i, v_i^2)` pairs.
pub fn fit_ratio_model(data: &[(f64, f64)], priors: RatioPriors, config: &SamplerConfig) -> Result<RatioModelFit> {
    let model = RatioModel::new(data, priors)?;
    let draws = sample(&model, config)?;
    let pairs: Vec<(f64, f64)> = draws.iter_draws().map(|d| (d[0], d[1])).collect();
    let mu: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let s2: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let s2i = PointInterval::from_draws(&s2);
    Ok(RatioModelFit { mu_theta: PointInterval::from_draws(&mu), sigma2_theta: s2i.median, sigma2_interval: s2i, draws: pairs })
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// One-sided predictive tail probability of a ratio at least as low as `r`.
pub fn exclusion_tail_probability(r: f64, v2: f64, fit: &RatioModelFit) -> f64 {
    let sd = (fit.sigma2_theta + v2).sqrt();
    std_normal().cdf((r.ln() - fit.mu_theta.median) / sd)
}

/// Ratio at which the tail probability equals `threshold`.
pub fn exclusion_boundary(v2: f64, fit: &RatioModelFit, threshold: f64) -> f64 {
    let z = std_normal().inverse_cdf(threshold);
    (fit.mu_theta.median + z * (fit.sigma2_theta + v2).sqrt()).exp()
}

/// Where to find the neonatal mortality rate paired with an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NmrSourcePolicy {
    /// Same-source NMR when reported, otherwise the national estimate.
    #[default]
    SameSourceThenNational,
    SameSourceOnly,
}

/// National NMR estimates keyed by (country, year).
pub type NationalNmr = BTreeMap<(String, i32), f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Keep,
    Exclude,
    CannotScreen,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Keep => "keep",
            Decision::Exclude => "exclude",
            Decision::CannotScreen => "cannot_screen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRecord {
    pub id: u64,
    pub r: f64,
    pub v2: f64,
    pub p: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, Default)]
pub struct ScreenResult {
    pub kept: Vec<AdjustedObservation>,
    pub excluded: Vec<(AdjustedObservation, f64)>,
    pub cannot_screen: Vec<AdjustedObservation>,
    pub records: Vec<ScreenRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    pub threshold: f64,
    pub policy: NmrSourcePolicy,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig { threshold: DEFAULT_THRESHOLD, policy: NmrSourcePolicy::default(), mc_samples: DEFAULT_MC_SAMPLES, seed: 1 }
    }
}

/// Observed ratio on the 28-week scale and its error variance, or `None`
/// when no NMR can be paired with the observation.
pub fn observation_ratio(
    a: &AdjustedObservation,
    national: &NationalNmr,
    config: &ScreenConfig,
) -> Result<Option<(f64, f64)>> {
    let o = &a.obs;
    let (nmr, same_source) = match (o.nmr, config.policy) {
        (Some(n), _) => (n, true),
        (None, NmrSourcePolicy::SameSourceThenNational) => match national.get(&(o.country.clone(), o.year)) {
            Some(n) => (*n, false),
            None => return Ok(None),
        },
        (None, NmrSourcePolicy::SameSourceOnly) => return Ok(None),
    };
    if !(nmr > 0.0) {
        return Ok(None);
    }
    let r = (a.adjusted_log_sbr() - nmr.ln()).exp();
    let counts = match (same_source, o.stillbirth_count, o.total_births, o.live_births) {
        (true, Some(z), Some(t), Some(q)) => {
            let m = (nmr * q / 1000.0).round();
            (z >= 1.0 && m >= 1.0 && z <= t && m <= q).then_some((z.round() as u64, t.round() as u64, m as u64, q.round() as u64))
        }
        _ => None,
    };
    let v2 = match counts {
        Some((z, t, m, q)) => {
            let input = RatioVarianceInput {
                stillbirths: z,
                total_births: t,
                neonatal_deaths: m,
                live_births: q,
                n_samples: config.mc_samples,
                seed: derive_seed(config.seed, o.id),
            };
            mc_log_ratio_variance(&input)?.variance
        }
        // without the counts the error of the log SBR stands in for the ratio error
        None => o.log_se.map(|s| s * s).unwrap_or(0.0),
    };
    Ok(Some((r, v2 + a.phi2)))
}

/// Splits observations into kept, excluded and unscreenable sets.
pub fn apply_exclusion(
    observations: &[AdjustedObservation],
    fit: &RatioModelFit,
    national: &NationalNmr,
    config: &ScreenConfig,
) -> Result<ScreenResult> {
    let mut out = ScreenResult::default();
    for a in observations {
        match observation_ratio(a, national, config)? {
            None => {
                out.records.push(ScreenRecord {
                    id: a.obs.id,
                    r: f64::NAN,
                    v2: f64::NAN,
                    p: f64::NAN,
                    decision: Decision::CannotScreen,
                });
                out.cannot_screen.push(a.clone());
            }
            Some((r, v2)) => {
                let p = exclusion_tail_probability(r, v2, fit);
                let decision = if p < config.threshold { Decision::Exclude } else { Decision::Keep };
                out.records.push(ScreenRecord { id: a.obs.id, r, v2, p, decision });
                match decision {
                    Decision::Exclude => out.excluded.push((a.clone(), p)),
                    _ => out.kept.push(a.clone()),
                }
            }
        }
    }
    Ok(out)
}

pub fn write_exclusions_csv(path: &Path, records: &[ScreenRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "r", "v2", "p", "decision"]).map_err(|e| Error::csv(path, e))?;
    let num = |x: f64, digits: usize| if x.is_nan() { String::new() } else { format!("{x:.digits$}") };
    for rec in records {
        w.write_record([rec.id.to_string(), num(rec.r, 6), num(rec.v2, 8), num(rec.p, 6), rec.decision.as_str().to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `hq_ratios.csv` with columns `r` and `v2`.
pub fn read_hq_ratios(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let ri = header_index(path, &headers, "r")?;
    let vi = header_index(path, &headers, "v2")?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let parse = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| Error::Data(format!("{} line {}: bad number `{}`", path.display(), row + 2, &rec[i])))
        };
        out.push((parse(ri)?, parse(vi)?));
    }
    Ok(out)
}

/// Reads national NMR estimates (country, year, nmr).
pub fn read_national_nmr(path: &Path) -> Result<NationalNmr> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let ci = header_index(path, &headers, "country")?;
    let yi = header_index(path, &headers, "year")?;
    let ni = header_index(path, &headers, "nmr")?;
    let mut out = NationalNmr::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let year = rec[yi].parse::<i32>().map_err(|_| Error::Data(format!("bad year `{}`", &rec[yi])))?;
        let nmr = rec[ni].parse::<f64>().map_err(|_| Error::Data(format!("bad nmr `{}`", &rec[ni])))?;
        out.insert((rec[ci].to_string(), year), nmr);
    }
    Ok(out)
}

/// Observations without an attached adjustment, treated as 28-week data.
pub fn as_reference(observations: &[Observation]) -> Vec<AdjustedObservation> {
    observations.iter().cloned().map(AdjustedObservation::reference).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Definition, SourceType};

    fn paper_fit() -> RatioModelFit {
        RatioModelFit::from_point(-0.180, 0.083)
    }

    #[test]
    fn boundary_from_published_estimates() {
        let b = exclusion_boundary(0.0, &paper_fit(), 0.05);
        let hand = (-0.180f64 - 1.645 * 0.083f64.sqrt()).exp();
        assert!((b - hand).abs() / hand < 5e-3);
        assert!((b - 0.52).abs() < 0.01);
        assert!((exclusion_tail_probability(b, 0.0, &paper_fit()) - 0.05).abs() < 1e-8);
    }

    #[test]
    fn tail_probability_examples() {
        let fit = paper_fit();
        let p = exclusion_tail_probability(0.52, 0.0, &fit);
        assert!((p - 0.05).abs() < 0.005, "{p}");
        assert!((exclusion_tail_probability((-0.180f64).exp(), 0.0, &fit) - 0.5).abs() < 1e-12);
        let wide = exclusion_tail_probability(0.52, 0.05, &fit);
        // numeric check of Phi at the standardized value
        let z = (0.52f64.ln() + 0.180) / 0.133f64.sqrt();
        assert!((wide - std_normal().cdf(z)).abs() < 1e-12);
        assert!(wide > 0.05);
    }

    #[test]
    fn ratio_gradient() {
        let data = vec![(0.8, 0.01), (1.1, 0.0), (0.6, 0.3)];
        let m = RatioModel::new(&data, RatioPriors::default()).unwrap();
        for x in [[0.1, -0.5], [-1.0, 0.3], [2.0, -2.0]] {
            let mut g = [0.0; 2];
            m.log_density_and_grad(&x, &mut g).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let mut s = [0.0; 2];
                let (mut xp, mut xm) = (x, x);
                xp[i] += h;
                xm[i] -= h;
                let fd = (m.log_density_and_grad(&xp, &mut s).unwrap() - m.log_density_and_grad(&xm, &mut s).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn too_few_observations() {
        assert!(RatioModel::new(&[(1.0, 0.1)], RatioPriors::default()).is_err());
        assert!(RatioModel::new(&[(1.0, 0.1), (-1.0, 0.1)], RatioPriors::default()).is_err());
    }

    #[test]
    fn identical_ratios_concentrate() {
        // exact zero error with identical ratios has an improper posterior in
        // sigma at 0; a tiny error keeps it proper
        let data = vec![(0.9, 1e-8); 30];
        let cfg = SamplerConfig { n_chains: 2, n_iter: 1500, n_warmup: 500, seed: 2, ..Default::default() };
        let fit = fit_ratio_model(&data, RatioPriors::default(), &cfg).unwrap();
        assert!((fit.mu_theta.median - 0.9f64.ln()).abs() < 0.01);
        assert!(fit.sigma2_theta < 0.01, "{}", fit.sigma2_theta);
        assert!(fit.mu_theta.lower <= fit.mu_theta.upper);
    }

    fn obs(id: u64, sbr: f64, nmr: f64) -> AdjustedObservation {
        AdjustedObservation::reference(Observation {
            id,
            country: "AAA".into(),
            year: 2010,
            source_type: SourceType::Hmis,
            definition: Definition::Ge28Weeks,
            sbr,
            total_births: None,
            stillbirth_count: None,
            log_se: None,
            nmr: Some(nmr),
            live_births: None,
        })
    }

    #[test]
    fn threshold_rule_and_partition() {
        let fit = paper_fit();
        let cfg = ScreenConfig::default();
        // sbr / nmr chosen so that p sits just either side of 0.05
        let sd = 0.083f64.sqrt();
        let n = std_normal();
        let r_lo = (-0.180 + n.inverse_cdf(0.049) * sd).exp();
        let r_hi = (-0.180 + n.inverse_cdf(0.051) * sd).exp();
        let mut no_nmr = obs(3, 10.0, 1.0);
        no_nmr.obs.nmr = None;
        let input = vec![obs(1, 10.0 * r_lo, 10.0), obs(2, 10.0 * r_hi, 10.0), no_nmr];
        let res = apply_exclusion(&input, &fit, &NationalNmr::new(), &cfg).unwrap();
        assert_eq!(res.excluded.len(), 1);
        assert_eq!(res.excluded[0].0.obs.id, 1);
        assert_eq!(res.kept.len(), 1);
        assert_eq!(res.cannot_screen.len(), 1);
        assert_eq!(res.records.len(), 3);
        assert!((res.excluded[0].1 - 0.049).abs() < 1e-9);
    }

    #[test]
    fn national_fallback() {
        let mut o = obs(5, 5.0, 1.0);
        o.obs.nmr = None;
        let mut nat = NationalNmr::new();
        nat.insert(("AAA".into(), 2010), 10.0);
        let cfg = ScreenConfig::default();
        let (r, v2) = observation_ratio(&o, &nat, &cfg).unwrap().unwrap();
        assert!((r - 0.5).abs() < 1e-12 && v2 == 0.0);
        let strict = ScreenConfig { policy: NmrSourcePolicy::SameSourceOnly, ..cfg };
        assert!(observation_ratio(&o, &nat, &strict).unwrap().is_none());
    }

    #[test]
    fn nothing_excluded_at_the_median() {
        let fit = paper_fit();
        let r = (-0.180f64).exp();
        let input: Vec<_> = (0..20).map(|i| obs(i, 10.0 * r, 10.0)).collect();
        let res = apply_exclusion(&input, &fit, &NationalNmr::new(), &ScreenConfig::default()).unwrap();
        assert!(res.excluded.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tail_probability_monotone(r1 in 0.05f64..5.0, r2 in 0.05f64..5.0, v in 0.0f64..1.0) {
                let fit = paper_fit();
                let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
                prop_assume!(hi / lo > 1.0 + 1e-9);
                prop_assert!(exclusion_tail_probability(lo, v, &fit) < exclusion_tail_probability(hi, v, &fit));
            }

            #[test]
            fn wider_error_moves_toward_half(r in 0.05f64..0.8, v1 in 0.0f64..1.0, v2 in 0.0f64..1.0) {
                let fit = paper_fit();
                prop_assume!(r.ln() < -0.180 - 1e-6);
                let (lo, hi) = if v1 < v2 { (v1, v2) } else { (v2, v1) };
                prop_assume!(hi - lo > 1e-9);
                let p_lo = exclusion_tail_probability(r, lo, &fit);
                let p_hi = exclusion_tail_probability(r, hi, &fit);
                prop_assert!(p_lo < p_hi && p_hi < 0.5);
            }
        }
    }
}
