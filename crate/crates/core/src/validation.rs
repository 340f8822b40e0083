//! Out-of-sample validation: holdout splits, standardized prediction errors,
//! predictive tail shares, Pareto-smoothed importance sampling LOO and ELPD
//! comparison.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, mean, median, quantile, variance};
use crate::model::{obs_moments, ModelObs, ModelSpec, Params};
use crate::rng::{derive_seed, derive_seed_str, rng_from};
use crate::sampler::{sample, PosteriorDraws, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Exercise {
    Recent,
    Random,
    InSample,
}

impl Exercise {
    pub fn as_str(self) -> &'static str {
        match self {
            Exercise::Recent => "Recent",
            Exercise::Random => "Random",
            Exercise::InSample => "InSample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HoldoutMode {
    Random20,
    LastPerCountry,
}

/// Splits observations into `(train, test)`.
///
/// `Random20` draws `round(0.2 n)` test points uniformly without
/// replacement, seeded by `(seed, replicate)`. `LastPerCountry` holds out
/// each country's latest observation, the largest id winning ties.
pub fn holdout_split(
    obs: &[ModelObs],
    mode: HoldoutMode,
    replicate: u64,
    seed: u64,
) -> Result<(Vec<ModelObs>, Vec<ModelObs>)> {
    if obs.is_empty() {
        return Err(Error::Precondition("cannot split an empty observation set".into()));
    }
    let mut is_test = vec![false; obs.len()];
    match mode {
        HoldoutMode::Random20 => {
            let n_test = (0.2 * obs.len() as f64).round() as usize;
            let mut rng = rng_from(derive_seed(derive_seed_str(seed, "holdout/random20"), replicate));
            for i in sample_indices(&mut rng, obs.len(), n_test) {
                is_test[i] = true;
            }
        }
        HoldoutMode::LastPerCountry => {
            let mut best: std::collections::BTreeMap<usize, usize> = Default::default();
            for (i, o) in obs.iter().enumerate() {
                let e = best.entry(o.c).or_insert(i);
                let cur = &obs[*e];
                if (o.t, o.id) > (cur.t, cur.id) {
                    *e = i;
                }
            }
            for i in best.into_values() {
                is_test[i] = true;
            }
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = obs.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|p| p.0).collect(), test.into_iter().map(|p| p.0).collect()))
}

/// `e = (log y - log y_pred) / S` with `S` the predictive sd of `log y`.
pub fn prediction_error(y: f64, pred_median: f64, pred_sd: f64) -> f64 {
    (y.ln() - pred_median.ln()) / pred_sd
}

/// Posterior predictive draws of `log y` for each observation in `targets`,
/// including bias, adjustment and all data-model variance terms. Returns
/// one vector per target.
pub fn predictive_log_draws(
    spec: &ModelSpec,
    draws: &PosteriorDraws,
    targets: &[ModelObs],
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    let mut out = vec![Vec::with_capacity(draws.total_draws()); targets.len()];
    for d in draws.iter_draws() {
        let p = Params::from_draw(spec, d);
        for (o, col) in targets.iter().zip(out.iter_mut()) {
            let (m, v) = obs_moments(&p, spec, o);
            let z: f64 = StandardNormal.sample(&mut rng);
            col.push(m + v.sqrt() * z);
        }
    }
    out
}

/// Log-likelihood of each target under each draw, `[obs][draw]`.
pub fn loglik_matrix(spec: &ModelSpec, draws: &PosteriorDraws, targets: &[ModelObs]) -> Vec<Vec<f64>> {
    let params: Vec<Params> = draws.iter_draws().map(|d| Params::from_draw(spec, d)).collect();
    targets
        .par_iter()
        .map(|o| {
            params
                .iter()
                .map(|p| {
                    let (m, v) = obs_moments(p, spec, o);
                    crate::math::normal_lpdf(o.log_y, m, v.sqrt())
                })
                .collect()
        })
        .collect()
}

/// Pooled error and coverage summary for one exercise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub exercise: Exercise,
    pub mean_error: f64,
    pub mean_abs_error: f64,
    pub pct_below_5: f64,
    pub pct_below_10: f64,
    pub pct_above_90: f64,
    pub pct_above_95: f64,
    pub n_test: usize,
}

/// Per-observation outcome feeding a [`ValidationReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub id: u64,
    pub error: f64,
    pub below_5: bool,
    pub below_10: bool,
    pub above_90: bool,
    pub above_95: bool,
}

/// Weighted quantile: smallest value whose cumulative weight
/// reaches `p`. Weights need not be normalized.
fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= p * total {
            return values[i];
        }
    }
    values[idx[idx.len() - 1]]
}

/// Compares an observed `log y` against predictive draws of it. `weights`
/// (importance weights for approximate LOO) are optional.
pub fn check_point(id: u64, log_y: f64, pred: &[f64], weights: Option<&[f64]>) -> PointCheck {
    let (med, sd, q) = match weights {
        None => {
            let q = [0.05, 0.10, 0.90, 0.95].map(|p| quantile(pred, p));
            (median(pred), variance(pred).sqrt(), q)
        }
        Some(w) => {
            let total: f64 = w.iter().sum();
            let m = pred.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total;
            let v = pred.iter().zip(w).map(|(x, w)| w * (x - m).powi(2)).sum::<f64>() / total;
            let q = [0.05, 0.10, 0.90, 0.95].map(|p| weighted_quantile(pred, w, p));
            (weighted_quantile(pred, w, 0.5), v.sqrt(), q)
        }
    };
    let error = if sd > 0.0 { (log_y - med) / sd } else { 0.0 };
    PointCheck {
        id,
        error,
        below_5: log_y < q[0],
        below_10: log_y < q[1],
        above_90: log_y > q[2],
        above_95: log_y > q[3],
    }
}

/// Aggregates point checks into tail shares in percent.
pub fn interval_coverage(exercise: Exercise, checks: &[PointCheck]) -> Result<ValidationReport> {
    if checks.is_empty() {
        return Err(Error::Precondition(format!("{} exercise has no test points", exercise.as_str())));
    }
    let n = checks.len() as f64;
    let pct = |f: fn(&PointCheck) -> bool| 100.0 * checks.iter().filter(|c| f(c)).count() as f64 / n;
    let errors: Vec<f64> = checks.iter().map(|c| c.error).collect();
    Ok(ValidationReport {
        exercise,
        mean_error: mean(&errors),
        mean_abs_error: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
        pct_below_5: pct(|c| c.below_5),
        pct_below_10: pct(|c| c.below_10),
        pct_above_90: pct(|c| c.above_90),
        pct_above_95: pct(|c| c.above_95),
        n_test: checks.len(),
    })
}

/// PSIS-LOO result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub ids: Vec<u64>,
    pub elpd_loo: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
}

impl LooResult {
    /// Share of observations with `k > threshold`, in percent.
    pub fn pct_k_above(&self, threshold: f64) -> f64 {
        100.0 * self.pareto_k.iter().filter(|k| **k > threshold).count() as f64 / self.pareto_k.len() as f64
    }
}

/// Generalized Pareto fit by the Zhang-Stephens profile method with a weak
/// prior pulling `k` toward 0.5. `x` must be sorted ascending and positive.
/// Returns `(k, sigma)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt().floor() as usize;
    let xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let xmax = x[n - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / xmax + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar)
        .collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let k = x.iter().map(|xi| (-t * xi).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((-t / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&profile);
    let theta_hat: f64 = theta.iter().zip(&profile).map(|(t, l)| t * (l - lse).exp()).sum();
    let k = x.iter().map(|xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let k = (k * n as f64 + 10.0 * 0.5) / (n as f64 + 10.0);
    (k, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 { -sigma * (-p).ln_1p() } else { sigma * (-k * (-p).ln_1p()).exp_m1() / k }
}

/// Pareto-smoothed log importance weights for one observation, normalized,
/// together with the tail shape `k`. Raw weights are kept when `k < 0`
/// (bounded ratios) or the tail holds fewer than five draws (`k = NaN`).
pub fn psis_log_weights(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|r| r - max).collect();
    let m = (0.2 * s as f64).min(3.0 * (s as f64).sqrt()).ceil() as usize;
    let mut k = f64::NAN;
    if m >= 5 && m < s {
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
        let tail = &order[s - m..];
        let cutoff = lw[order[s - m - 1]];
        let exp_cut = cutoff.exp();
        let x: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - exp_cut).collect();
        if x[m - 1] > 0.0 && x[0] >= 0.0 {
            let (kk, sigma) = gpd_fit(&x);
            k = kk;
            if k.is_finite() && k >= 0.0 {
                for (z, &i) in tail.iter().enumerate() {
                    let p = (z as f64 + 0.5) / m as f64;
                    lw[i] = (gpd_quantile(p, k, sigma) + exp_cut).ln().min(0.0);
                }
            }
        } else {
            k = f64::NEG_INFINITY;
        }
    }
    let lse = log_sum_exp(&lw);
    lw.iter_mut().for_each(|w| *w -= lse);
    (lw, k)
}

/// PSIS-LOO from a `[obs][draw]` log-likelihood matrix.
pub fn psis_loo(ids: &[u64], loglik: &[Vec<f64>]) -> Result<LooResult> {
    if loglik.is_empty() || ids.len() != loglik.len() {
        return Err(Error::Precondition("psis_loo needs one log-likelihood row per observation".into()));
    }
    let s = loglik[0].len();
    if s < 2 || loglik.iter().any(|r| r.len() != s) {
        return Err(Error::Precondition("psis_loo needs the same number (>= 2) of draws per observation".into()));
    }
    let rows: Vec<(f64, f64)> = loglik
        .par_iter()
        .map(|ll| {
            let neg: Vec<f64> = ll.iter().map(|l| -l).collect();
            let (lw, k) = psis_log_weights(&neg);
            let terms: Vec<f64> = lw.iter().zip(ll).map(|(w, l)| w + l).collect();
            (log_sum_exp(&terms), k)
        })
        .collect();
    let pointwise: Vec<f64> = rows.iter().map(|r| r.0).collect();
    if pointwise.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { block: "loo" });
    }
    let n = pointwise.len() as f64;
    let se = if pointwise.len() > 1 { (n * variance(&pointwise)).sqrt() } else { 0.0 };
    Ok(LooResult {
        ids: ids.to_vec(),
        elpd_loo: pointwise.iter().sum(),
        se,
        pointwise,
        pareto_k: rows.iter().map(|r| r.1).collect(),
    })
}

/// Paired ELPD difference `a - b` with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElpdDiff {
    pub diff: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn elpd_compare(a: &LooResult, b: &LooResult) -> Result<ElpdDiff> {
    if a.pointwise.len() != b.pointwise.len() || a.ids != b.ids {
        return Err(Error::Precondition(format!(
            "LOO results cover different observations ({} vs {})",
            a.pointwise.len(),
            b.pointwise.len()
        )));
    }
    let d: Vec<f64> = a.pointwise.iter().zip(&b.pointwise).map(|(x, y)| x - y).collect();
    let diff: f64 = d.iter().sum();
    let n = d.len() as f64;
    let se = if d.len() > 1 { (n * variance(&d)).sqrt() } else { 0.0 };
    Ok(ElpdDiff { diff, se, lower: diff - 1.96 * se, upper: diff + 1.96 * se })
}

/// Settings for the validation exercises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub random_replicates: usize,
    /// Maximum number of training fits running at once.
    pub max_concurrent_fits: usize,
    pub exercises: Vec<Exercise>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            random_replicates: 20,
            max_concurrent_fits: 2,
            exercises: vec![Exercise::Recent, Exercise::Random, Exercise::InSample],
        }
    }
}

/// Fits the model on one training split and checks the held-out points.
pub fn holdout_checks(
    spec: &ModelSpec,
    mode: HoldoutMode,
    replicate: u64,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<PointCheck>> {
    let (train, test) = holdout_split(&spec.obs, mode, replicate, seed)?;
    let label = format!("validate/{mode:?}/{replicate}");
    let cfg = SamplerConfig { seed: derive_seed_str(seed, &label), ..sampler.clone() };
    let train_spec = spec.with_obs(train);
    let draws = sample(&train_spec, &cfg)?;
    let pred = predictive_log_draws(&train_spec, &draws, &test, derive_seed_str(seed, &format!("{label}/predict")));
    Ok(test.iter().zip(&pred).map(|(o, p)| check_point(o.id, o.log_y, p, None)).collect())
}

/// Approximate leave-one-out checks from a full-data fit, using PSIS
/// weights on the predictive draws.
pub fn in_sample_checks(spec: &ModelSpec, draws: &PosteriorDraws, seed: u64) -> Vec<PointCheck> {
    let pred = predictive_log_draws(spec, draws, &spec.obs, derive_seed_str(seed, "validate/insample"));
    let ll = loglik_matrix(spec, draws, &spec.obs);
    spec.obs
        .par_iter()
        .zip(pred.par_iter().zip(ll.par_iter()))
        .map(|(o, (p, l))| {
            let neg: Vec<f64> = l.iter().map(|v| -v).collect();
            let (lw, _) = psis_log_weights(&neg);
            let w: Vec<f64> = lw.iter().map(|v| v.exp()).collect();
            check_point(o.id, o.log_y, p, Some(&w))
        })
        .collect()
}

/// Runs the configured exercises. `full_draws` (a fit on all observations)
/// is needed for the in-sample exercise.
pub fn run_validation(
    spec: &ModelSpec,
    full_draws: Option<&PosteriorDraws>,
    sampler: &SamplerConfig,
    config: &ValidationConfig,
    seed: u64,
) -> Result<Vec<ValidationReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_concurrent_fits.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut jobs: Vec<(Exercise, HoldoutMode, u64)> = Vec::new();
    for &ex in &config.exercises {
        match ex {
            Exercise::Recent => jobs.push((ex, HoldoutMode::LastPerCountry, 0)),
            Exercise::Random => {
                jobs.extend((0..config.random_replicates as u64).map(|r| (ex, HoldoutMode::Random20, r)))
            }
            Exercise::InSample => {}
        }
    }
    let results: Vec<(Exercise, Result<Vec<PointCheck>>)> = pool.install(|| {
        jobs.par_iter().map(|&(ex, mode, rep)| (ex, holdout_checks(spec, mode, rep, sampler, seed))).collect()
    });
    let mut reports = Vec::new();
    for &ex in &config.exercises {
        let checks: Vec<PointCheck> = match ex {
            Exercise::InSample => {
                let draws = full_draws
                    .ok_or_else(|| Error::Precondition("in-sample validation needs the full-data fit".into()))?;
                in_sample_checks(spec, draws, seed)
            }
            _ => {
                let mut all = Vec::new();
                for (e, r) in &results {
                    if *e == ex {
                        match r {
                            Ok(c) => all.extend_from_slice(c),
                            Err(err) => return Err(Error::Sampler(format!("{} exercise: {err}", ex.as_str()))),
                        }
                    }
                }
                all
            }
        };
        reports.push(interval_coverage(ex, &checks)?);
    }
    Ok(reports)
}

pub fn write_validation_csv(path: &Path, reports: &[ValidationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "exercise",
        "mean_error",
        "mean_abs_error",
        "pct_below_5",
        "pct_below_10",
        "pct_above_90",
        "pct_above_95",
        "n_test",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for r in reports {
        w.write_record([
            r.exercise.as_str().to_string(),
            format!("{:.6}", r.mean_error),
            format!("{:.6}", r.mean_abs_error),
            format!("{:.2}", r.pct_below_5),
            format!("{:.2}", r.pct_below_10),
            format!("{:.2}", r.pct_above_90),
            format!("{:.2}", r.pct_above_95),
            r.n_test.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_loo_csv(path: &Path, loo: &LooResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "elpd_i", "pareto_k"]).map_err(|e| Error::csv(path, e))?;
    for ((id, e), k) in loo.ids.iter().zip(&loo.pointwise).zip(&loo.pareto_k) {
        w.write_record([id.to_string(), format!("{e:.8}"), format!("{k:.6}")])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Draws `n` uniform seeds; handy for replicated experiments.
pub fn replicate_seeds(root: u64, n: usize) -> Vec<u64> {
    let mut rng = rng_from(root);
    (0..n).map(|_| rng.random()).collect()
}
