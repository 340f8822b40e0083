//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! with a failure status if any criterion fails.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use sbr_core::adjust::{fit_containing, fit_overlapping, overlap_unconstrained, PairCounts, PairedCounts};
use sbr_core::data::{Definition, IncomeGroup};
use sbr_core::math::{logistic, normal_lpdf, quantile};
use sbr_core::model::{log_posterior, subset_covariates, theta, Parameterization, Params, PriorMode, DEFAULT_SUBSET_CUTOFF, VAGUE_BETA_SD};
use sbr_core::pipeline::{run_pipeline, write_simulated_project, PipelineConfig};
use sbr_core::ratio::{exclusion_boundary, RatioModelFit, DEFAULT_THRESHOLD};
use sbr_core::rng::{derive_seed, rng_from};
use sbr_core::sampler::{sample, LogDensity, SamplerConfig};
use sbr_core::simulate::{simulate_model_data, simulate_paired_counts, SimConfig, TrueAdjustment};
use sbr_core::spline::build_basis;
use sbr_core::validation::{psis_loo, run_validation, Exercise, ValidationConfig};
use sbr_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn exclusion_threshold() -> Result<Outcome> {
    let fit = RatioModelFit::from_point(-0.180, 0.083);
    let b = exclusion_boundary(0.0, &fit, DEFAULT_THRESHOLD);
    outcome((b - 0.52).abs() <= 0.01, format!("boundary {b:.4}"))
}

fn gradient() -> Result<Outcome> {
    let cfg = SimConfig { n_countries: 5, n_years: 10, beta: vec![0.3, -0.2, 0.0], n_obs: 50, ..SimConfig::default() };
    let spec = simulate_model_data(&cfg)?.spec(PriorMode::default())?;
    let dim = spec.layout().dim;
    let mut rng = rng_from(11);
    let mut worst: f64 = 0.0;
    let mut g = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    for _ in 0..25 {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        log_posterior(&spec, &x, &mut g)?;
        for i in 0..dim {
            let h = 1e-5;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (log_posterior(&spec, &xp, &mut scratch)? - log_posterior(&spec, &xm, &mut scratch)?) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    outcome(worst < 1e-5, format!("25 points, dim {dim}, max relative error {worst:.2e}"))
}

struct Gaussian {
    mean: Vec<f64>,
    /// Inverse covariance, row-major.
    precision: Vec<f64>,
}

impl LogDensity for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d = self.dim();
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut lp = 0.0;
        for i in 0..d {
            let pr: f64 = (0..d).map(|j| self.precision[i * d + j] * r[j]).sum();
            grad[i] = -pr;
            lp -= 0.5 * r[i] * pr;
        }
        Ok(lp)
    }
}

fn check_gaussian(target: &Gaussian, cov: &[f64], n_kept: usize, seed: u64) -> Result<(bool, String)> {
    let cfg = SamplerConfig { n_chains: 4, n_iter: n_kept + 1000, n_warmup: 1000, seed, ..SamplerConfig::default() };
    let draws = sample(target, &cfg)?;
    let d = target.dim();
    let cols: Vec<Vec<f64>> = (0..d).map(|i| draws.pooled(i)).collect();
    let n = cols[0].len() as f64;
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let mut mean_err: f64 = 0.0;
    let mut cov_err: f64 = 0.0;
    for i in 0..d {
        mean_err = mean_err.max((means[i] - target.mean[i]).abs());
        for j in 0..d {
            let c: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| (a - means[i]) * (b - means[j])).sum::<f64>() / (n - 1.0);
            let scale = (cov[i * d + i] * cov[j * d + j]).sqrt();
            cov_err = cov_err.max((c - cov[i * d + j]).abs() / scale);
        }
    }
    let summaries = draws.summarize();
    let max_rhat = summaries.iter().map(|s| s.rhat).fold(0.0, f64::max);
    let min_ess = summaries.iter().map(|s| s.ess_bulk).fold(f64::INFINITY, f64::min);
    let pass = mean_err < 0.05 && cov_err < 0.05 && max_rhat < 1.01 && min_ess > 400.0;
    Ok((pass, format!("mean err {mean_err:.3}, cov err {:.1}%, R-hat {max_rhat:.4}, ESS {min_ess:.0}", 100.0 * cov_err)))
}

fn sampler_targets() -> Result<Outcome> {
    let d = 10;
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let (p1, s1) = check_gaussian(&Gaussian { mean: vec![0.0; d], precision: eye.clone() }, &eye, 3000, 21)?;
    let rho: f64 = 0.9;
    let cov = vec![1.0, rho, rho, 1.0];
    let det = 1.0 - rho * rho;
    let precision = vec![1.0 / det, -rho / det, -rho / det, 1.0 / det];
    let (p2, s2) = check_gaussian(&Gaussian { mean: vec![0.0; 2], precision }, &cov, 20000, 22)?;
    outcome(p1 && p2, format!("normal(10): {s1}; rho 0.9: {s2}"))
}

#[derive(Default)]
struct Tally {
    hit: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, draws: &[f64], truth: f64) {
        self.total += 1;
        if quantile(draws, 0.025) <= truth && truth <= quantile(draws, 0.975) {
            self.hit += 1;
        }
    }

    fn rate(&self) -> f64 {
        self.hit as f64 / self.total.max(1) as f64
    }
}

fn recovery() -> Result<Outcome> {
    let sampler = SamplerConfig { n_chains: 4, n_iter: 2000, n_warmup: 1000, target_accept: 0.95, ..SamplerConfig::default() };
    let (mut beta, mut psi, mut sigma, mut th) = (Tally::default(), Tally::default(), Tally::default(), Tally::default());
    let mut worst_zero: f64 = 0.0;
    for rep in 0..20u64 {
        let cfg = SimConfig { seed: derive_seed(404, rep), ..SimConfig::default() };
        let sim = simulate_model_data(&cfg)?;
        let spec = sim.spec(PriorMode::default())?;
        let draws = sample(&spec, &SamplerConfig { seed: derive_seed(405, rep), ..sampler.clone() })?;
        let ps: Vec<Params> = draws.iter_draws().map(|d| Params::from_draw(&spec, d)).collect();
        for (k, &b) in cfg.beta.iter().enumerate() {
            let v: Vec<f64> = ps.iter().map(|p| p.beta[k]).collect();
            beta.add(&v, b);
            if b == 0.0 {
                worst_zero = worst_zero.max(quantile(&v, 0.5).abs());
            }
        }
        let survey = 3;
        psi.add(&ps.iter().map(|p| p.psi[survey]).collect::<Vec<_>>(), sim.truth.psi[survey]);
        for j in 0..4 {
            sigma.add(&ps.iter().map(|p| p.sigma_j[j]).collect::<Vec<_>>(), sim.truth.sigma_j[j]);
        }
        for c in 0..spec.n_countries() {
            for t in 0..spec.n_years() {
                th.add(&ps.iter().map(|p| theta(p, &spec, c, t)).collect::<Vec<_>>(), sim.true_theta(c, t));
            }
        }
    }
    let floor = 0.85;
    let pass = [&beta, &psi, &sigma, &th].iter().all(|t| t.rate() >= floor) && worst_zero < 0.05;
    outcome(
        pass,
        format!(
            "coverage beta {:.3}, psi_survey {:.3}, sigma_j {:.3}, theta {:.3}; max |median| of zero betas {worst_zero:.4}",
            beta.rate(),
            psi.rate(),
            sigma.rate(),
            th.rate()
        ),
    )
}

fn adjustment_recovery() -> Result<Outcome> {
    let cfg = SamplerConfig { n_chains: 4, n_iter: 1500, n_warmup: 500, ..SamplerConfig::default() };
    let containing = TrueAdjustment { definition: Definition::Ge22Weeks, income_group: IncomeGroup::High, mu: 4f64.ln(), sigma: 0.3 };
    let overlapping = TrueAdjustment { definition: Definition::Ge500g, income_group: IncomeGroup::High, mu: 0.15, sigma: 0.1 };
    let mut tallies: Vec<Tally> = (0..4).map(|_| Tally::default()).collect();
    let mut worst_simplex: f64 = 0.0;
    let mut worst_gamma: f64 = 0.0;
    for rep in 0..50u64 {
        let mut rng = rng_from(derive_seed(505, rep));
        let seed = derive_seed(506, rep);
        let pairs: Vec<PairedCounts> = (0..100)
            .map(|_| {
                let w = logistic(containing.mu + containing.sigma * rng.sample::<f64, _>(StandardNormal));
                let z_alt = rng.random_range(450..=550u64);
                let z = Binomial::new(z_alt, w).expect("valid binomial").sample(&mut rng);
                PairedCounts {
                    definition: containing.definition,
                    income_group: containing.income_group,
                    counts: PairCounts::Containing { z: z as f64, z_alt: z_alt as f64 },
                }
            })
            .collect();
        let fit = fit_containing(&pairs, &SamplerConfig { seed, ..cfg.clone() })?;
        let h = fit.hyper_draws();
        tallies[0].add(&h.iter().map(|x| x.0).collect::<Vec<_>>(), containing.mu);
        tallies[1].add(&h.iter().map(|x| x.1).collect::<Vec<_>>(), containing.sigma);

        let pairs = simulate_paired_counts(&overlapping, 100, &mut rng);
        let fit = fit_overlapping(&pairs, &SamplerConfig { seed, ..cfg.clone() })?;
        let h = fit.hyper_draws();
        tallies[2].add(&h.iter().map(|x| x.0).collect::<Vec<_>>(), overlapping.mu);
        tallies[3].add(&h.iter().map(|x| x.1).collect::<Vec<_>>(), overlapping.sigma);
        let n = pairs.len();
        for d in fit.draws.iter_draws() {
            for i in 0..n {
                let (g, wa, wb, wc) = (d[2 + i], d[2 + n + i], d[2 + 2 * n + i], d[2 + 3 * n + i]);
                let inside = [wa, wb, wc].iter().all(|w| (0.0..=1.0).contains(w));
                worst_simplex = worst_simplex.max(if inside { (wa + wb + wc - 1.0).abs() } else { f64::INFINITY });
                worst_gamma = worst_gamma.max((overlap_unconstrained(wa, wb, wc).0 - g).abs());
            }
        }
    }
    let rates: Vec<f64> = tallies.iter().map(Tally::rate).collect();
    let pass = rates.iter().all(|r| *r >= 0.9) && worst_simplex < 1e-12 && worst_gamma < 1e-9;
    outcome(
        pass,
        format!(
            "50 replications of 100 pairs, 95% coverage mu_omega {:.2}, sigma_omega {:.2}, mu_gamma {:.2}, sigma_gamma {:.2}; simplex err {worst_simplex:.1e}, Gamma err {worst_gamma:.1e}",
            rates[0], rates[1], rates[2], rates[3]
        ),
    )
}

fn validation_calibration() -> Result<Outcome> {
    // the validated model is the subsetted fit, as in the pipeline
    let sim = simulate_model_data(&SimConfig { seed: 606, ..SimConfig::default() })?;
    let param = Parameterization { beta: false, regions: false, countries: false };
    let spec = sim.spec(PriorMode::SubsettedVague { sd: VAGUE_BETA_SD })?.with_param(param);
    let sampler = SamplerConfig { n_chains: 4, n_iter: 1500, n_warmup: 500, target_accept: 0.95, ..SamplerConfig::default() };
    let cfg = ValidationConfig { random_replicates: 20, exercises: vec![Exercise::Random], ..ValidationConfig::default() };
    let r = &run_validation(&spec, None, &sampler, &cfg, 607)?[0];
    let n = r.n_test as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, got, p) in [("<5%", r.pct_below_5, 0.05), ("<10%", r.pct_below_10, 0.10), (">90%", r.pct_above_90, 0.10), (">95%", r.pct_above_95, 0.05)] {
        let se = 100.0 * (p * (1.0 - p) / n).sqrt();
        let ok = (got - 100.0 * p).abs() <= 2.0 * se;
        pass &= ok;
        parts.push(format!("{label} {got:.2} (2SE {:.2})", 2.0 * se));
    }
    outcome(pass, format!("n {}: {}", r.n_test, parts.join(", ")))
}

fn psis_oracle() -> Result<Outcome> {
    // y_i ~ N(mu, s^2), mu ~ N(0, tau^2)
    let (s, tau, n, draws) = (1.0f64, 10.0f64, 50usize, 8000usize);
    let mut rng = rng_from(707);
    let y: Vec<f64> = (0..n).map(|_| 1.0 + s * rng.sample::<f64, _>(StandardNormal)).collect();
    let posterior = |sum: f64, m: usize| {
        let prec = 1.0 / (tau * tau) + m as f64 / (s * s);
        (sum / (s * s) / prec, (1.0 / prec).sqrt())
    };
    let total: f64 = y.iter().sum();
    let (pm, psd) = posterior(total, n);
    let mu: Vec<f64> = (0..draws).map(|_| pm + psd * rng.sample::<f64, _>(StandardNormal)).collect();
    let loglik: Vec<Vec<f64>> = y.iter().map(|yi| mu.iter().map(|m| normal_lpdf(*yi, *m, s)).collect()).collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let loo = psis_loo(&ids, &loglik)?;
    let exact: f64 = y
        .iter()
        .map(|yi| {
            let (m, sd) = posterior(total - yi, n - 1);
            normal_lpdf(*yi, m, (sd * sd + s * s).sqrt())
        })
        .sum();
    let max_k = loo.pareto_k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pass = (loo.elpd_loo - exact).abs() <= 2.0 * loo.se && max_k < 0.7;
    outcome(pass, format!("elpd_loo {:.3} vs exact {exact:.3} (SE {:.3}), max k {max_k:.3}", loo.elpd_loo, loo.se))
}

fn spline_properties() -> Result<Outcome> {
    let basis = build_basis(2000, 2019)?;
    let mut unity: f64 = 0.0;
    let mut linear: f64 = 0.0;
    // Greville abscissae reproduce the identity for a quadratic basis
    let greville: Vec<f64> = (0..basis.n_basis()).map(|h| 0.5 * (basis.knots[h + 1] + basis.knots[h + 2])).collect();
    let mut x = 2000.0;
    while x <= 2019.0 {
        let k = basis.evaluate(x);
        unity = unity.max((k.iter().sum::<f64>() - 1.0).abs());
        linear = linear.max((k.iter().zip(&greville).map(|(a, g)| a * g).sum::<f64>() - x).abs());
        x += 0.05;
    }
    let knots = &basis.knots;
    let at_knot = basis.evaluate(knots[1])[0];
    let at_mid = basis.evaluate(0.5 * (knots[1] + knots[2]))[0];
    let pass = unity < 1e-12 && linear < 1e-10 && (at_knot - 0.5).abs() < 1e-12 && (at_mid - 0.75).abs() < 1e-12;
    outcome(pass, format!("unity err {unity:.1e}, linear err {linear:.1e}, knot {at_knot}, midpoint {at_mid}"))
}

fn subsetting() -> Result<Outcome> {
    let medians: Vec<(String, f64)> = [
        ("log(nmr)", 0.414),
        ("log(gni)", -0.102),
        ("log(lbw)", 0.078),
        ("edu", -0.037),
        ("csec", -0.027),
        ("anc4", -0.025),
        ("pab", -0.018),
        ("abr", -0.017),
        ("urban", -0.012),
        ("gini", 0.010),
        ("sab", -0.010),
        ("anc1", -0.009),
        ("mmr", 0.003),
        ("pfpr", -0.002),
        ("gdp", 0.001),
    ]
    .iter()
    .map(|(n, m)| (n.to_string(), *m))
    .collect();
    let kept: Vec<&str> = subset_covariates(&medians, DEFAULT_SUBSET_CUTOFF)?.iter().map(|&i| medians[i].0.as_str()).collect();
    let want = ["log(nmr)", "log(gni)", "log(lbw)", "edu", "csec", "anc4"];
    outcome(kept == want, format!("selected {}", kept.join(", ")))
}

fn reproducibility() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| sbr_core::Error::Config(e.to_string()))?;
    let sim = simulate_model_data(&SimConfig { definition_share: 0.2, underreport_share: 0.05, seed: 808, ..SimConfig::default() })?;
    let sampler = SamplerConfig { n_chains: 2, n_iter: 600, n_warmup: 300, ..SamplerConfig::default() };
    let path = write_simulated_project(&sim, dir.path(), 9, sampler)?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = PipelineConfig::load(&path)?;
        cfg.output_dir = dir.path().join(run);
        cfg.validation.random_replicates = 2;
        run_pipeline(cfg)?;
        outputs.push(std::fs::read(dir.path().join(run).join("estimates.csv")).map_err(|e| sbr_core::Error::Config(e.to_string()))?);
    }
    outcome(!outputs[0].is_empty() && outputs[0] == outputs[1], format!("estimates.csv {} bytes, identical: {}", outputs[0].len(), outputs[0] == outputs[1]))
}

fn main() {
    type Check = fn() -> Result<Outcome>;
    let checks: [(&str, Check); 10] = [
        ("exclusion threshold", exclusion_threshold),
        ("gradient", gradient),
        ("sampler targets", sampler_targets),
        ("parameter recovery", recovery),
        ("adjustment recovery", adjustment_recovery),
        ("validation calibration", validation_calibration),
        ("psis-loo oracle", psis_oracle),
        ("spline properties", spline_properties),
        ("subsetting", subsetting),
        ("reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {id:>2} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
