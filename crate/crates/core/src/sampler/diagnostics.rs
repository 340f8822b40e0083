//! Convergence diagnostics on multi-chain draws: rank-normalized split
//! R-hat (maximum of the bulk and folded versions), bulk ESS on
//! rank-normalized split chains, and tail ESS from the 5% and 95% quantile
//! indicators.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EssKind {
    Bulk,
    Tail,
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flat_map(|c| c.first()).next();
    match first {
        None => true,
        Some(&v) => chains.iter().flatten().all(|x| *x == v),
    }
}

fn valid_shape(chains: &[Vec<f64>], min_chains: usize) -> bool {
    chains.len() >= min_chains && chains.iter().all(|c| c.len() >= 4)
}

/// Splits each chain into halves, dropping the middle draw of odd chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces draws by normal scores of their pooled fractional ranks
/// (average rank for ties, Blom offset 3/8).
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| xs.iter().enumerate().map(move |(i, x)| (*x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks are 1-based; ties share their average
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std.inverse_cdf((rank - 0.375) / (s + 0.25));
        for item in &pooled[i..=j] {
            out[item.1][item.2] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Classic potential scale reduction on equal-length chains.
pub fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Rank-normalized split R-hat. NaN (with a warning) for constant input or
/// fewer than two chains of four draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if !valid_shape(chains, 2) {
        log::warn!("R-hat needs at least 2 chains with 4 draws each");
        return f64::NAN;
    }
    if is_constant(chains) {
        log::warn!("R-hat undefined for a constant parameter");
        return f64::NAN;
    }
    let split = split_chains(chains);
    let bulk = rhat_basic(&rank_normalize(&split));
    let pooled: Vec<f64> = split.iter().flatten().copied().collect();
    let med = median(&pooled);
    let folded: Vec<Vec<f64>> =
        split.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    bulk.max(tail)
}

/// Split R-hat on the raw draws, without rank normalization or folding.
pub fn split_rhat_classic(chains: &[Vec<f64>]) -> f64 {
    if !valid_shape(chains, 2) || is_constant(chains) {
        return f64::NAN;
    }
    rhat_basic(&split_chains(chains))
}

/// Biased autocovariance `acov[k] = (1/n) sum (x_i - m)(x_{i+k} - m)` via FFT.
fn autocovariance(xs: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let len = (2 * n).next_power_of_two();
    let fwd: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf: Vec<Complex<f64>> = xs
        .iter()
        .map(|x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    fwd.process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    buf[..n].iter().map(|c| c.re / (len as f64 * n as f64)).collect()
}

/// Multi-chain ESS with Geyer's initial monotone sequence estimator.
pub fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let mut planner = FftPlanner::new();
    let acovs: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, &mut planner)).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let chain_vars: Vec<f64> = acovs.iter().map(|a| a[0] * nf / (nf - 1.0)).collect();
    let mean_var = mean(&chain_vars);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let acov_at = |t: usize| acovs.iter().map(|a| a[t]).sum::<f64>() / m as f64;

    let mut rho = vec![0.0; n];
    let mut rho_even = 1.0;
    rho[0] = rho_even;
    let mut rho_odd = 1.0 - (mean_var - acov_at(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov_at(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov_at(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 3 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    total / tau.max(1.0 / total.log10())
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    // linear interpolation between order statistics (type 7)
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Effective sample size of the bulk or the tails. NaN (with a warning)
/// for constant input or fewer than four draws per chain.
pub fn ess(chains: &[Vec<f64>], kind: EssKind) -> f64 {
    if !valid_shape(chains, 1) {
        log::warn!("ESS needs chains with at least 4 draws");
        return f64::NAN;
    }
    if is_constant(chains) {
        log::warn!("ESS undefined for a constant parameter");
        return f64::NAN;
    }
    let split = split_chains(chains);
    match kind {
        EssKind::Bulk => ess_basic(&rank_normalize(&split)),
        EssKind::Tail => {
            let pooled: Vec<f64> = split.iter().flatten().copied().collect();
            let q05 = quantile(&pooled, 0.05);
            let q95 = quantile(&pooled, 0.95);
            let indicator = |q: f64| -> Vec<Vec<f64>> {
                split
                    .iter()
                    .map(|c| c.iter().map(|x| if *x <= q { 1.0 } else { 0.0 }).collect())
                    .collect()
            };
            ess_basic(&indicator(q05)).min(ess_basic(&indicator(q95)))
        }
    }
}

/// Posterior summary of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q97_5: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
}

impl Summary {
    pub fn compute(name: &str, chains: &[Vec<f64>]) -> Summary {
        let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        let constant = is_constant(chains);
        let multi = chains.len() >= 2;
        Summary {
            name: name.to_string(),
            mean: mean(&pooled),
            median: quantile_sorted(&pooled, 0.5),
            sd: if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { f64::NAN },
            q2_5: quantile_sorted(&pooled, 0.025),
            q97_5: quantile_sorted(&pooled, 0.975),
            rhat: if constant || !multi { f64::NAN } else { split_rhat(chains) },
            ess_bulk: if constant { f64::NAN } else { ess(chains, EssKind::Bulk) },
            ess_tail: if constant { f64::NAN } else { ess(chains, EssKind::Tail) },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid_chains(m: usize, n: usize, seed: u64, shift: &[f64]) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..m)
            .map(|c| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift[c % shift.len()]).collect())
            .collect()
    }

    #[test]
    fn rank_normalization_is_symmetric() {
        let chains = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let z = rank_normalize(&chains);
        assert!((z[0][0] + z[1][2]).abs() < 1e-12);
        assert!((z[0][2] + z[1][0]).abs() < 1e-12);
        let ties = rank_normalize(&[vec![1.0, 1.0], vec![1.0, 2.0]]);
        assert_eq!(ties[0][0], ties[0][1]);
        assert_eq!(ties[0][0], ties[1][0]);
    }

    #[test]
    fn rhat_of_replicated_chain() {
        // Each chain repeats one block so halves and chains coincide; R-hat
        // then equals sqrt((n-1)/n) for the half length n, i.e. 1 in the limit.
        let mut rng = rng_from(8);
        let block: Vec<f64> = (0..600_000).map(|_| rng.sample(StandardNormal)).collect();
        let chain: Vec<f64> = block.iter().chain(block.iter()).copied().collect();
        let chains = vec![chain.clone(), chain];
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 1e-6, "{r}");
    }

    #[test]
    fn rhat_flags_separated_chains() {
        let chains = iid_chains(2, 1000, 3, &[0.0, 10.0]);
        assert!(split_rhat_classic(&chains) > 2.0);
        // ranks cap the normalized version: complete separation of two
        // chains gives sqrt(1 + (4/3) m^2 / v) for the half-normal m, v
        let m = (2.0 / std::f64::consts::PI).sqrt();
        let cap = (1.0 + 4.0 / 3.0 * m * m / (1.0 - m * m)).sqrt();
        let r = split_rhat(&chains);
        assert!(r > 1.75 && r <= cap + 0.01, "{r} vs {cap}");
    }

    #[test]
    fn rhat_of_independent_chains() {
        let ok = (0..40)
            .filter(|s| split_rhat(&iid_chains(4, 1000, 100 + s, &[0.0])) < 1.01)
            .count();
        assert!(ok >= 38, "{ok}/40");
    }

    #[test]
    fn constant_draws_give_nan() {
        let chains = vec![vec![2.0; 10], vec![2.0; 10]];
        assert!(split_rhat(&chains).is_nan());
        assert!(ess(&chains, EssKind::Bulk).is_nan());
        assert!(ess(&chains, EssKind::Tail).is_nan());
    }

    #[test]
    fn bulk_ess_of_iid() {
        let e = ess(&iid_chains(4, 1000, 17, &[0.0]), EssKind::Bulk);
        assert!((3200.0..=4800.0).contains(&e), "{e}");
        let t = ess(&iid_chains(4, 1000, 18, &[0.0]), EssKind::Tail);
        assert!((2500.0..=5500.0).contains(&t), "{t}");
    }

    #[test]
    fn ess_of_ar1() {
        let phi: f64 = 0.9;
        let mut rng = rng_from(21);
        let n = 20_000;
        let mut x = 0.0;
        let innovation_sd = (1.0 - phi * phi).sqrt();
        let chain: Vec<f64> = (0..n)
            .map(|_| {
                x = phi * x + innovation_sd * rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let want = n as f64 * (1.0 - phi) / (1.0 + phi);
        let got = ess_basic(&[chain]);
        assert!((got / want - 1.0).abs() < 0.25, "{got} vs {want}");
    }

    #[test]
    fn autocovariance_matches_direct_sum() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 13) as f64 - 3.0).collect();
        let mut planner = FftPlanner::new();
        let fft = autocovariance(&xs, &mut planner);
        let m = mean(&xs);
        for k in [0, 1, 5, 36] {
            let direct: f64 =
                (0..xs.len() - k).map(|i| (xs[i] - m) * (xs[i + k] - m)).sum::<f64>() / xs.len() as f64;
            assert!((fft[k] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn summary_fields() {
        let chains = iid_chains(4, 500, 5, &[3.0]);
        let s = Summary::compute("mu", &chains);
        assert!((s.mean - 3.0).abs() < 0.1);
        assert!(s.q2_5 < s.median && s.median < s.q97_5);
        assert!((s.sd - 1.0).abs() < 0.1);
        assert!(s.rhat < 1.05);
    }
}
