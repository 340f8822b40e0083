//! Synthetic data from the full generative model, used by the recovery
//! tests, the bundled pipeline fixture and the `simulate` CLI verb.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjust::{overlap_probabilities, AdjustedObservation, PairCounts, PairedCounts};
use crate::data::{
    standardize_covariates, write_observations, CountryIndex, CovariateMatrix, Definition, IncomeGroup,
    Observation, PairingKind, RawCovariates, SourceType, TransformSpec, YearWindow,
};
use crate::error::{Error, Result};
use crate::math::{logistic, softplus};
use crate::model::{centered_cumsum, theta, ModelObs, ModelSpec, Parameterization, Params, PriorMode, N_SOURCES};
use crate::rng::{derive_seed_str, rng_from};
use crate::spline::{build_basis, SplineBasis};

/// True hyperparameters of one definitional adjustment group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueAdjustment {
    pub definition: Definition,
    pub income_group: IncomeGroup,
    /// Mean and sd of `logit omega` (containing) or `Gamma` (overlapping).
    pub mu: f64,
    pub sigma: f64,
}

impl TrueAdjustment {
    pub fn kind(&self) -> PairingKind {
        self.definition.pairing_kind().unwrap_or(PairingKind::Containing)
    }

    /// Draws the log shift `kappa` of one new setting.
    pub fn draw_kappa<R: Rng>(&self, rng: &mut R) -> f64 {
        let x = self.mu + self.sigma * rng.sample::<f64, _>(StandardNormal);
        match self.kind() {
            PairingKind::Containing => softplus(-x),
            PairingKind::Overlapping => x,
        }
    }
}

pub fn default_true_adjustments() -> Vec<TrueAdjustment> {
    let t = |definition, income_group, mu, sigma| TrueAdjustment { definition, income_group, mu, sigma };
    vec![
        t(Definition::Ge22Weeks, IncomeGroup::High, 1.7, 0.3),
        t(Definition::Ge24Weeks, IncomeGroup::High, 2.2, 0.3),
        t(Definition::Ge500g, IncomeGroup::High, 0.15, 0.05),
        t(Definition::Ge1000g, IncomeGroup::High, -0.05, 0.05),
        t(Definition::Ge22Weeks, IncomeGroup::LowMiddle, 1.4, 0.3),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_countries: usize,
    pub n_regions: usize,
    pub start_year: i32,
    pub n_years: usize,
    /// True coefficients, one per covariate.
    pub beta: Vec<f64>,
    pub n_obs: usize,
    pub xi: f64,
    pub sigma_eta: f64,
    pub sigma_varsigma: f64,
    pub sigma_delta: f64,
    pub psi_survey: f64,
    pub sigma_j: [f64; N_SOURCES],
    /// Relative frequency of each source type.
    pub source_weights: [f64; N_SOURCES],
    /// Share of observations recorded under a non-reference definition.
    pub definition_share: f64,
    pub adjustments: Vec<TrueAdjustment>,
    pub pairs_per_group: usize,
    /// Share of observations whose same-source NMR is inflated so that they
    /// fail the ratio screen.
    pub underreport_share: f64,
    pub mu_ratio: f64,
    pub sigma2_ratio: f64,
    pub n_hq_ratios: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_countries: 8,
            n_regions: 2,
            start_year: 2000,
            n_years: 20,
            beta: vec![0.3, -0.2, 0.0, 0.0],
            n_obs: 120,
            xi: 2.6,
            sigma_eta: 0.2,
            sigma_varsigma: 0.25,
            sigma_delta: 0.04,
            psi_survey: -0.165,
            sigma_j: [0.017, 0.08, 0.12, 0.15],
            source_weights: [0.35, 0.2, 0.15, 0.3],
            definition_share: 0.0,
            adjustments: default_true_adjustments(),
            pairs_per_group: 12,
            underreport_share: 0.0,
            mu_ratio: -0.18,
            sigma2_ratio: 0.083,
            n_hq_ratios: 60,
            seed: 1,
        }
    }
}

/// A synthetic data set with its generating values.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub config: SimConfig,
    pub index: CountryIndex,
    pub raw_covariates: RawCovariates,
    pub covariates: CovariateMatrix,
    pub basis: SplineBasis,
    pub truth: Params,
    pub observations: Vec<Observation>,
    /// Observations with their true shifts attached (`phi2 = 0`).
    pub adjusted: Vec<AdjustedObservation>,
    pub paired_counts: Vec<PairedCounts>,
    pub hq_ratios: Vec<(f64, f64)>,
    /// National NMR implied by the true rates, per (country, year).
    pub national_nmr: Vec<(String, i32, f64)>,
}

impl SimulatedData {
    pub fn true_theta(&self, c: usize, t: usize) -> f64 {
        theta(&self.truth, &self.true_spec_view(), c, t)
    }

    fn true_spec_view(&self) -> ModelSpec {
        ModelSpec {
            obs: Vec::new(),
            covariates: self.covariates.clone(),
            index: self.index.clone(),
            basis: self.basis.clone(),
            prior: PriorMode::default(),
            included: (0..self.covariates.n_covariates()).collect(),
            param: Parameterization::default(),
        }
    }

    /// Model spec over the adjusted observations, using their true shifts.
    pub fn spec(&self, prior: PriorMode) -> Result<ModelSpec> {
        let obs = self
            .adjusted
            .iter()
            .map(|a| ModelObs::from_adjusted(a, &self.index, &self.basis))
            .collect::<Result<Vec<_>>>()?;
        ModelSpec::from_parts(
            obs,
            self.covariates.clone(),
            self.index.clone(),
            self.basis.clone(),
            prior,
            (0..self.covariates.n_covariates()).collect(),
        )
    }
}

fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn log_uniform<R: Rng>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Paired counts for one adjustment group.
pub fn simulate_paired_counts<R: Rng>(truth: &TrueAdjustment, n_pairs: usize, rng: &mut R) -> Vec<PairedCounts> {
    (0..n_pairs)
        .map(|_| {
            let x = truth.mu + truth.sigma * normal(rng);
            let counts = match truth.kind() {
                PairingKind::Containing => {
                    let z_alt = rng.random_range(30..400u64);
                    let z = Binomial::new(z_alt, logistic(x)).expect("valid binomial").sample(rng);
                    PairCounts::Containing { z: z as f64, z_alt: z_alt as f64 }
                }
                PairingKind::Overlapping => {
                    let v = crate::math::logit(rng.random_range(0.001..0.999));
                    let (wa, wb, _) = overlap_probabilities(x, v);
                    let n = rng.random_range(50..400u64);
                    let a = Binomial::new(n, wa.clamp(0.0, 1.0)).expect("valid binomial").sample(rng);
                    let rest = n - a;
                    let pb = if wa < 1.0 { (wb / (1.0 - wa)).clamp(0.0, 1.0) } else { 0.0 };
                    let b = Binomial::new(rest, pb).expect("valid binomial").sample(rng);
                    PairCounts::Overlapping { a: a as f64, b: b as f64, c: (rest - b) as f64 }
                }
            };
            PairedCounts { definition: truth.definition, income_group: truth.income_group, counts }
        })
        .collect()
}

fn country_code(c: usize) -> String {
    format!("C{:02}", c + 1)
}

pub fn simulate_model_data(config: &SimConfig) -> Result<SimulatedData> {
    if config.n_countries == 0 || config.n_regions == 0 || config.n_regions > config.n_countries {
        return Err(Error::Config("simulation needs 1 <= regions <= countries".into()));
    }
    if config.n_years < 2 || config.beta.is_empty() || config.n_obs == 0 {
        return Err(Error::Config("simulation needs >= 2 years, >= 1 covariate and >= 1 observation".into()));
    }
    let seed = config.seed;
    let window = YearWindow::new(config.start_year, config.start_year + config.n_years as i32 - 1)?;
    let entries: Vec<(String, String, IncomeGroup)> = (0..config.n_countries)
        .map(|c| {
            let income = if c < config.n_countries / 2 { IncomeGroup::High } else { IncomeGroup::LowMiddle };
            (country_code(c), format!("R{}", c % config.n_regions + 1), income)
        })
        .collect();
    let index = CountryIndex::new(&entries)?;
    let basis = build_basis(window.start, window.end)?;
    let (nc, nt, k_n) = (config.n_countries, config.n_years, config.beta.len());

    let mut rng = rng_from(derive_seed_str(seed, "simulate/covariates"));
    let names: Vec<String> = (0..k_n).map(|k| format!("cov{}", k + 1)).collect();
    let mut values = Vec::with_capacity(k_n * nc * nt);
    for _ in 0..k_n {
        for _ in 0..nc {
            let level = normal(&mut rng);
            let trend = 0.5 * normal(&mut rng);
            for t in 0..nt {
                values.push(level + trend * t as f64 / nt as f64 + 0.05 * normal(&mut rng));
            }
        }
    }
    let raw_covariates = RawCovariates { names, n_countries: nc, window, values };
    let covariates = standardize_covariates(&raw_covariates, &TransformSpec::default())?;

    let mut rng = rng_from(derive_seed_str(seed, "simulate/parameters"));
    let h_n = basis.n_basis();
    let eta: Vec<f64> = (0..index.n_regions()).map(|_| config.xi + config.sigma_eta * normal(&mut rng)).collect();
    let varsigma: Vec<f64> =
        (0..nc).map(|c| eta[index.region_of(c)] + config.sigma_varsigma * normal(&mut rng)).collect();
    let mut alpha = vec![0.0; nc * h_n];
    for c in 0..nc {
        let diffs: Vec<f64> = (0..h_n - 1).map(|_| config.sigma_delta * normal(&mut rng)).collect();
        centered_cumsum(&diffs, &mut alpha[c * h_n..(c + 1) * h_n]);
    }
    let mut psi = [0.0; N_SOURCES];
    psi[SourceType::Survey.index()] = config.psi_survey;
    let truth = Params {
        beta: config.beta.clone(),
        lambda: vec![1.0; k_n],
        tau: 1.0,
        rho2: 1.0,
        xi: config.xi,
        sigma_varsigma: config.sigma_varsigma,
        sigma_eta: config.sigma_eta,
        eta,
        varsigma,
        alpha,
        sigma_delta: config.sigma_delta,
        psi,
        sigma_j: config.sigma_j,
    };

    let mut sim = SimulatedData {
        config: config.clone(),
        index,
        raw_covariates,
        covariates,
        basis,
        truth,
        observations: Vec::new(),
        adjusted: Vec::new(),
        paired_counts: Vec::new(),
        hq_ratios: Vec::new(),
        national_nmr: Vec::new(),
    };
    let view = sim.true_spec_view();

    let mut rng = rng_from(derive_seed_str(seed, "simulate/observations"));
    for i in 0..config.n_obs {
        let c = i % nc;
        let t = rng.random_range(0..nt);
        let source = SourceType::ALL[pick(&config.source_weights, &mut rng)];
        let income = sim.index.income_of(c);
        let (definition, kappa) = if source != SourceType::Survey && rng.random::<f64>() < config.definition_share {
            let options: Vec<&TrueAdjustment> = config.adjustments.iter().filter(|a| a.income_group == income).collect();
            if options.is_empty() {
                (Definition::Ge28Weeks, 0.0)
            } else {
                let a = options[rng.random_range(0..options.len())];
                (a.definition, a.draw_kappa(&mut rng))
            }
        } else {
            (Definition::Ge28Weeks, 0.0)
        };
        let births = match source {
            SourceType::Administrative | SourceType::Hmis => Some(log_uniform(20_000.0, 200_000.0, &mut rng).round()),
            SourceType::PopulationStudy => Some(log_uniform(2_000.0, 20_000.0, &mut rng).round()),
            SourceType::Survey => None,
        };
        let th = theta(&sim.truth, &view, c, t);
        let log_se = match births {
            Some(b) => {
                let p = th.exp() / 1000.0;
                ((1.0 - p) / (b * p)).sqrt()
            }
            None => rng.random_range(0.08..0.2),
        };
        let sd = (log_se * log_se + config.sigma_j[source.index()].powi(2)).sqrt();
        let log_y = th + sim.truth.psi[source.index()] + kappa + sd * normal(&mut rng);
        let sbr = log_y.exp();
        let ratio = (config.mu_ratio + config.sigma2_ratio.sqrt() * normal(&mut rng)).exp();
        let mut nmr = sbr / ratio;
        if rng.random::<f64>() < config.underreport_share {
            nmr *= 4.0;
        }
        let stillbirths = births.map(|b| sbr * b / 1000.0);
        let obs = Observation {
            id: i as u64 + 1,
            country: country_code(c),
            year: config.start_year + t as i32,
            source_type: source,
            definition,
            sbr,
            total_births: births,
            stillbirth_count: stillbirths,
            log_se: Some(log_se),
            nmr: Some(nmr),
            live_births: births.zip(stillbirths).map(|(b, d)| b - d),
        };
        sim.adjusted.push(AdjustedObservation { obs: obs.clone(), gamma: kappa, phi2: 0.0 });
        sim.observations.push(obs);
    }

    let mut rng = rng_from(derive_seed_str(seed, "simulate/pairs"));
    if config.definition_share > 0.0 {
        for a in &config.adjustments {
            sim.paired_counts.extend(simulate_paired_counts(a, config.pairs_per_group, &mut rng));
        }
    }
    let mut rng = rng_from(derive_seed_str(seed, "simulate/ratios"));
    sim.hq_ratios = (0..config.n_hq_ratios)
        .map(|_| {
            let v2 = rng.random_range(0.002..0.02);
            let log_r = config.mu_ratio + (config.sigma2_ratio + v2).sqrt() * normal(&mut rng);
            (log_r.exp(), v2)
        })
        .collect();
    for c in 0..nc {
        for t in 0..nt {
            let nmr = (theta(&sim.truth, &view, c, t) - config.mu_ratio).exp();
            sim.national_nmr.push((country_code(c), config.start_year + t as i32, nmr));
        }
    }
    Ok(sim)
}

/// Input files written by [`write_fixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePaths {
    pub observations: PathBuf,
    pub covariates: PathBuf,
    pub regions: PathBuf,
    pub income_groups: PathBuf,
    pub paired_counts: PathBuf,
    pub hq_ratios: PathBuf,
    pub national_nmr: PathBuf,
    pub truth: PathBuf,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the simulated inputs as CSV files in `dir`.
pub fn write_fixture(sim: &SimulatedData, dir: &Path) -> Result<FixturePaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| dir.join(name);
    let paths = FixturePaths {
        observations: p("observations.csv"),
        covariates: p("covariates.csv"),
        regions: p("regions.csv"),
        income_groups: p("income_groups.csv"),
        paired_counts: p("paired_counts.csv"),
        hq_ratios: p("hq_ratios.csv"),
        national_nmr: p("national_nmr.csv"),
        truth: p("truth.json"),
    };
    write_observations(&paths.observations, &sim.observations)?;
    let raw = &sim.raw_covariates;
    let mut rows = Vec::new();
    for (k, name) in raw.names.iter().enumerate() {
        for c in 0..raw.n_countries {
            for (t, year) in raw.window.years().enumerate() {
                rows.push(vec![name.clone(), sim.index.countries[c].clone(), year.to_string(), format!("{}", raw.get(k, c, t))]);
            }
        }
    }
    write_rows(&paths.covariates, &["covariate", "country", "year", "value"], rows)?;
    let n = sim.index.len();
    write_rows(
        &paths.regions,
        &["country", "region"],
        (0..n).map(|c| vec![sim.index.countries[c].clone(), sim.index.regions[sim.index.region_of(c)].clone()]),
    )?;
    write_rows(
        &paths.income_groups,
        &["country", "income_group"],
        (0..n).map(|c| vec![sim.index.countries[c].clone(), sim.index.income_of(c).as_str().to_string()]),
    )?;
    write_rows(
        &paths.paired_counts,
        &["definition", "income_group", "z", "z_alt", "a", "b", "c"],
        sim.paired_counts.iter().map(|pc| {
            let (z, za, a, b, c) = match pc.counts {
                PairCounts::Containing { z, z_alt } => (z.to_string(), z_alt.to_string(), String::new(), String::new(), String::new()),
                PairCounts::Overlapping { a, b, c } => (String::new(), String::new(), a.to_string(), b.to_string(), c.to_string()),
            };
            vec![pc.definition.as_str().to_string(), pc.income_group.as_str().to_string(), z, za, a, b, c]
        }),
    )?;
    write_rows(&paths.hq_ratios, &["r", "v2"], sim.hq_ratios.iter().map(|(r, v)| vec![format!("{r}"), format!("{v}")]))?;
    write_rows(
        &paths.national_nmr,
        &["country", "year", "nmr"],
        sim.national_nmr.iter().map(|(c, y, n)| vec![c.clone(), y.to_string(), format!("{n}")]),
    )?;
    let truth = serde_json::to_string_pretty(&serde_json::json!({
        "config": sim.config,
        "params": sim.truth,
    }))
    .map_err(|e| Error::Data(format!("serializing truth: {e}")))?;
    std::fs::write(&paths.truth, truth).map_err(|e| Error::io(&paths.truth, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::read_paired_counts;
    use crate::data::{ingest_observations, SchemaConfig};

    #[test]
    fn deterministic_and_shaped() {
        let cfg = SimConfig::default();
        let a = simulate_model_data(&cfg).unwrap();
        let b = simulate_model_data(&cfg).unwrap();
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.observations.len(), 120);
        for st in SourceType::ALL {
            assert!(a.observations.iter().any(|o| o.source_type == st));
        }
        for c in 0..8 {
            let row = &a.truth.alpha[c * a.basis.n_basis()..(c + 1) * a.basis.n_basis()];
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        let spec = a.spec(PriorMode::default()).unwrap();
        assert_eq!(spec.obs.len(), 120);
        let th = a.true_theta(0, 0);
        assert!(th > 1.0 && th < 4.5, "{th}");
    }

    #[test]
    fn paired_counts_respect_kinds() {
        let mut rng = rng_from(5);
        for t in default_true_adjustments() {
            for p in simulate_paired_counts(&t, 20, &mut rng) {
                p.validate().unwrap();
                assert_eq!(p.kind(), t.kind());
            }
        }
    }

    #[test]
    fn fixture_round_trip() {
        let cfg = SimConfig { definition_share: 0.3, underreport_share: 0.05, ..SimConfig::default() };
        let sim = simulate_model_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_fixture(&sim, dir.path()).unwrap();
        let window = YearWindow::new(2000, 2019).unwrap();
        let ing = ingest_observations(&paths.observations, &SchemaConfig::default(), window).unwrap();
        assert!(ing.report.is_empty(), "{:?}", ing.report);
        assert_eq!(ing.observations.len(), sim.observations.len());
        let index = CountryIndex::load(&paths.regions, &paths.income_groups).unwrap();
        assert_eq!(index, sim.index);
        let raw = RawCovariates::load(&paths.covariates, &index, window).unwrap();
        assert_eq!(raw.names, sim.raw_covariates.names);
        for (x, y) in raw.values.iter().zip(&sim.raw_covariates.values) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(read_paired_counts(&paths.paired_counts).unwrap().len(), 5 * 12);
    }
}
