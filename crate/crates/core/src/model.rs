//! The stillbirth rate model.
//!
//! Data model: `log y_i ~ N(Theta[c,t] + psi_j + gamma_i, s_i^2 + phi_i^2 + sigma_j^2)`.
//! Process model: `Theta[c,t] = varsigma_c + sum_k X[k,c,t] beta_k + delta[c,t]`
//! with hierarchical intercepts, a quadratic B-spline smoother with a
//! first-order random walk on its coefficients (centered per country), and
//! either a regularized horseshoe or a vague normal prior on `beta`.
//!
//! Sampling happens on an unconstrained vector. Scales are log-transformed,
//! `sigma_delta = 3 logistic(u)`, `psi_survey = -exp(u)`, and the spline
//! differences are standardized. Coefficients, regional and country
//! intercepts are centered by default; each level can be switched to a
//! standardized form through [`Parameterization`].

use serde::{Deserialize, Serialize};

use crate::adjust::AdjustedObservation;
use crate::data::{CountryIndex, CovariateMatrix, SourceType};
use crate::error::{Error, Result};
use crate::math::{half_cauchy_lpdf, half_normal_lpdf, inv_gamma_lpdf, logistic, normal_lpdf, softplus, LN_SQRT_2PI};
use crate::sampler::LogDensity;
use crate::spline::SplineBasis;

pub const N_SOURCES: usize = 4;
const SURVEY: usize = 3;
pub const XI_MEAN: f64 = 2.5;
pub const XI_SD: f64 = 2.0;
pub const PSI_SD: f64 = 5.0;
pub const SIGMA_DELTA_MAX: f64 = 3.0;
pub const VAGUE_BETA_SD: f64 = 5.0;
pub const DEFAULT_SUBSET_CUTOFF: f64 = 0.025;

/// How the horseshoe slab hyperparameter `g` enters the inverse gamma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InvGammaConvention {
    /// `rho^2 ~ Inv-Gamma(shape = q, scale = g)`.
    #[default]
    ShapeScale,
    /// `1 / rho^2 ~ Gamma(shape = q, scale = g)`, i.e. inverse gamma scale `1/g`.
    ShapeRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PriorMode {
    RegularizedHorseshoe { tau0: f64, q: f64, g: f64, convention: InvGammaConvention },
    SubsettedVague { sd: f64 },
}

impl Default for PriorMode {
    fn default() -> Self {
        PriorMode::RegularizedHorseshoe { tau0: 1.0, q: 2.0, g: 8.0, convention: InvGammaConvention::ShapeScale }
    }
}

impl PriorMode {
    pub fn is_horseshoe(&self) -> bool {
        matches!(self, PriorMode::RegularizedHorseshoe { .. })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorMode::RegularizedHorseshoe { tau0, q, g, .. } => tau0 > 0.0 && q > 0.0 && g > 0.0,
            PriorMode::SubsettedVague { sd } => sd > 0.0,
        };
        if ok { Ok(()) } else { Err(Error::Config(format!("prior hyperparameters must be positive: {self:?}"))) }
    }
}

/// Global scale `tau0 = p0 / (D - p0) * sigma / sqrt(n)` from a prior guess
/// `p0` of the number of relevant covariates among `D`.
pub fn tau0_from_guess(p0: f64, d: f64, sigma: f64, n: f64) -> Result<f64> {
    if !(p0 > 0.0 && d > p0 && sigma > 0.0 && n > 0.0) {
        return Err(Error::Config(format!("tau0 helper needs 0 < p0 < D and positive sigma, n (got {p0}, {d}, {sigma}, {n})")));
    }
    Ok(p0 / (d - p0) * sigma / n.sqrt())
}

/// One observation in model coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelObs {
    pub id: u64,
    pub c: usize,
    pub t: usize,
    pub source: usize,
    pub log_y: f64,
    /// Sampling variance `s_i^2` of `log y_i`.
    pub s2: f64,
    pub gamma: f64,
    pub phi2: f64,
}

impl ModelObs {
    pub fn from_adjusted(a: &AdjustedObservation, index: &CountryIndex, basis: &SplineBasis) -> Result<Self> {
        let o = &a.obs;
        let c = index
            .position(&o.country)
            .ok_or_else(|| Error::Data(format!("observation {}: unknown country `{}`", o.id, o.country)))?;
        let t = basis
            .window
            .offset(o.year)
            .ok_or_else(|| Error::Data(format!("observation {}: year {} outside {}", o.id, o.year, basis.window)))?;
        let se = o
            .log_se
            .ok_or_else(|| Error::Data(format!("observation {} has no standard error; impute before fitting", o.id)))?;
        Ok(ModelObs {
            id: o.id,
            c,
            t,
            source: o.source_type.index(),
            log_y: o.sbr.ln(),
            s2: se * se,
            gamma: a.gamma,
            phi2: a.phi2,
        })
    }
}

/// Everything the log posterior needs besides the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub obs: Vec<ModelObs>,
    pub covariates: CovariateMatrix,
    pub index: CountryIndex,
    pub basis: SplineBasis,
    pub prior: PriorMode,
    /// Positions of the modelled covariates in the full candidate set.
    pub included: Vec<usize>,
    pub param: Parameterization,
}

/// Which hierarchical levels are sampled on their own scale (centered) rather
/// than as standardized deviations from their parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Parameterization {
    pub beta: bool,
    pub regions: bool,
    pub countries: bool,
}

impl Default for Parameterization {
    fn default() -> Self {
        Parameterization { beta: false, regions: false, countries: true }
    }
}

impl ModelSpec {
    pub fn new(
        observations: &[AdjustedObservation],
        covariates: CovariateMatrix,
        index: CountryIndex,
        basis: SplineBasis,
        prior: PriorMode,
    ) -> Result<Self> {
        let obs = observations
            .iter()
            .map(|a| ModelObs::from_adjusted(a, &index, &basis))
            .collect::<Result<Vec<_>>>()?;
        let included = (0..covariates.n_covariates()).collect();
        Self::from_parts(obs, covariates, index, basis, prior, included)
    }

    pub fn from_parts(
        obs: Vec<ModelObs>,
        covariates: CovariateMatrix,
        index: CountryIndex,
        basis: SplineBasis,
        prior: PriorMode,
        included: Vec<usize>,
    ) -> Result<Self> {
        prior.validate()?;
        if covariates.n_countries != index.len() || covariates.n_years != basis.n_years() {
            return Err(Error::Precondition(format!(
                "covariate matrix covers {} countries x {} years, model has {} x {}",
                covariates.n_countries,
                covariates.n_years,
                index.len(),
                basis.n_years()
            )));
        }
        if included.len() != covariates.n_covariates() {
            return Err(Error::Precondition("included index set does not match the covariate matrix".into()));
        }
        for o in &obs {
            if o.c >= index.len() || o.t >= basis.n_years() || o.source >= N_SOURCES {
                return Err(Error::Precondition(format!("observation {} outside the model grid", o.id)));
            }
            if !(o.s2 >= 0.0 && o.phi2 >= 0.0 && o.log_y.is_finite() && o.gamma.is_finite()) {
                return Err(Error::Precondition(format!("observation {} has invalid variance terms", o.id)));
            }
        }
        Ok(ModelSpec { obs, covariates, index, basis, prior, included, param: Parameterization::default() })
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.n_covariates()
    }

    pub fn n_countries(&self) -> usize {
        self.index.len()
    }

    pub fn n_regions(&self) -> usize {
        self.index.n_regions()
    }

    pub fn n_basis(&self) -> usize {
        self.basis.n_basis()
    }

    pub fn n_years(&self) -> usize {
        self.basis.n_years()
    }

    /// The same spec with different observations (e.g. a training split).
    pub fn with_obs(&self, obs: Vec<ModelObs>) -> ModelSpec {
        ModelSpec { obs, ..self.clone() }
    }

    pub fn with_param(mut self, param: Parameterization) -> Self {
        self.param = param;
        self
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Names of the constrained parameters in [`Params::to_vec`] order.
    pub fn param_names(&self) -> Vec<String> {
        let cov = &self.covariates.names;
        let mut v: Vec<String> = cov.iter().map(|n| format!("beta[{n}]")).collect();
        if self.prior.is_horseshoe() {
            v.extend(cov.iter().map(|n| format!("lambda[{n}]")));
            v.push("tau".into());
            v.push("rho2".into());
        }
        v.push("xi".into());
        v.push("sigma_varsigma".into());
        v.push("sigma_eta".into());
        v.extend(self.index.regions.iter().map(|r| format!("eta[{r}]")));
        v.extend(self.index.countries.iter().map(|c| format!("varsigma[{c}]")));
        for c in &self.index.countries {
            v.extend((1..=self.n_basis()).map(|h| format!("alpha[{c},{h}]")));
        }
        v.push("sigma_delta".into());
        v.push("psi[survey]".into());
        v.extend(SourceType::ALL.iter().map(|s| format!("sigma_j[{}]", s.as_str())));
        v
    }
}

/// Offsets of the parameter blocks in the unconstrained vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub c: usize,
    pub r: usize,
    pub h: usize,
    pub horseshoe: bool,
    /// Standardized coefficients (horseshoe) or the coefficients themselves.
    pub beta: usize,
    pub log_lambda: usize,
    pub log_tau: usize,
    pub log_rho2: usize,
    pub xi: usize,
    pub log_sigma_varsigma: usize,
    pub log_sigma_eta: usize,
    pub eta_raw: usize,
    pub varsigma_raw: usize,
    /// `C x (H-1)` standardized spline differences.
    pub delta_raw: usize,
    pub sigma_delta_raw: usize,
    pub psi_raw: usize,
    pub log_sigma_j: usize,
    pub dim: usize,
}

impl Layout {
    fn new(spec: &ModelSpec) -> Layout {
        let (k, c, r, h) = (spec.n_covariates(), spec.n_countries(), spec.n_regions(), spec.n_basis());
        let horseshoe = spec.prior.is_horseshoe();
        let beta = 0;
        let mut at = k;
        let (log_lambda, log_tau, log_rho2) = if horseshoe {
            let l = at;
            at += k + 2;
            (l, l + k, l + k + 1)
        } else {
            (at, at, at)
        };
        let xi = at;
        let log_sigma_varsigma = xi + 1;
        let log_sigma_eta = xi + 2;
        let eta_raw = xi + 3;
        let varsigma_raw = eta_raw + r;
        let delta_raw = varsigma_raw + c;
        let sigma_delta_raw = delta_raw + c * (h - 1);
        let psi_raw = sigma_delta_raw + 1;
        let log_sigma_j = psi_raw + 1;
        let dim = log_sigma_j + N_SOURCES;
        Layout {
            k,
            c,
            r,
            h,
            horseshoe,
            beta,
            log_lambda,
            log_tau,
            log_rho2,
            xi,
            log_sigma_varsigma,
            log_sigma_eta,
            eta_raw,
            varsigma_raw,
            delta_raw,
            sigma_delta_raw,
            psi_raw,
            log_sigma_j,
            dim,
        }
    }
}

/// Constrained parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub beta: Vec<f64>,
    /// Horseshoe only.
    pub lambda: Vec<f64>,
    pub tau: f64,
    pub rho2: f64,
    pub xi: f64,
    pub sigma_varsigma: f64,
    pub sigma_eta: f64,
    pub eta: Vec<f64>,
    pub varsigma: Vec<f64>,
    /// `alpha[c * H + h]`, each country's row summing to zero.
    pub alpha: Vec<f64>,
    pub sigma_delta: f64,
    /// Bias per source type; only the survey entry is non-zero.
    pub psi: [f64; N_SOURCES],
    pub sigma_j: [f64; N_SOURCES],
}

/// `lambda_tilde^2 = rho^2 lambda^2 / (rho^2 + tau^2 lambda^2)`.
pub fn lambda_tilde_sq(lambda: f64, tau: f64, rho2: f64) -> f64 {
    let l2 = lambda * lambda;
    rho2 * l2 / (rho2 + tau * tau * l2)
}

/// Sum-to-zero spline coefficients from first differences (`h - 1` values).
pub fn centered_cumsum(diffs: &[f64], out: &mut [f64]) {
    out[0] = 0.0;
    for (i, d) in diffs.iter().enumerate() {
        out[i + 1] = out[i] + d;
    }
    let m = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|a| *a -= m);
}

impl Params {
    /// Maps an unconstrained vector to parameter values.
    pub fn from_unconstrained(spec: &ModelSpec, x: &[f64]) -> Params {
        let l = spec.layout();
        let mut beta = vec![0.0; l.k];
        let mut lambda = Vec::new();
        let (mut tau, mut rho2) = (f64::NAN, f64::NAN);
        if l.horseshoe {
            tau = x[l.log_tau].exp();
            rho2 = x[l.log_rho2].exp();
            lambda = (0..l.k).map(|k| x[l.log_lambda + k].exp()).collect();
            for k in 0..l.k {
                beta[k] = if spec.param.beta {
                    x[l.beta + k]
                } else {
                    tau * lambda_tilde_sq(lambda[k], tau, rho2).sqrt() * x[l.beta + k]
                };
            }
        } else {
            beta.copy_from_slice(&x[l.beta..l.beta + l.k]);
        }
        let xi = x[l.xi];
        let sigma_varsigma = x[l.log_sigma_varsigma].exp();
        let sigma_eta = x[l.log_sigma_eta].exp();
        let eta: Vec<f64> = if spec.param.regions {
            x[l.eta_raw..l.eta_raw + l.r].to_vec()
        } else {
            (0..l.r).map(|r| xi + sigma_eta * x[l.eta_raw + r]).collect()
        };
        let varsigma: Vec<f64> = if spec.param.countries {
            let means = spec.covariates.country_means();
            (0..l.c)
                .map(|c| x[l.varsigma_raw + c] - (0..l.k).map(|k| means[c * l.k + k] * beta[k]).sum::<f64>())
                .collect()
        } else {
            (0..l.c).map(|c| eta[spec.index.region_of(c)] + sigma_varsigma * x[l.varsigma_raw + c]).collect()
        };
        let sigma_delta = SIGMA_DELTA_MAX * logistic(x[l.sigma_delta_raw]);
        let mut alpha = vec![0.0; l.c * l.h];
        let mut diffs = vec![0.0; l.h - 1];
        for c in 0..l.c {
            for (j, d) in diffs.iter_mut().enumerate() {
                *d = sigma_delta * x[l.delta_raw + c * (l.h - 1) + j];
            }
            centered_cumsum(&diffs, &mut alpha[c * l.h..(c + 1) * l.h]);
        }
        let mut psi = [0.0; N_SOURCES];
        psi[SURVEY] = -x[l.psi_raw].exp();
        let mut sigma_j = [0.0; N_SOURCES];
        for (j, s) in sigma_j.iter_mut().enumerate() {
            *s = x[l.log_sigma_j + j].exp();
        }
        Params { beta, lambda, tau, rho2, xi, sigma_varsigma, sigma_eta, eta, varsigma, alpha, sigma_delta, psi, sigma_j }
    }

    /// Flattens in [`ModelSpec::param_names`] order.
    pub fn to_vec(&self, horseshoe: bool) -> Vec<f64> {
        let mut v = self.beta.clone();
        if horseshoe {
            v.extend(&self.lambda);
            v.push(self.tau);
            v.push(self.rho2);
        }
        v.extend([self.xi, self.sigma_varsigma, self.sigma_eta]);
        v.extend(&self.eta);
        v.extend(&self.varsigma);
        v.extend(&self.alpha);
        v.push(self.sigma_delta);
        v.push(self.psi[SURVEY]);
        v.extend(self.sigma_j);
        v
    }

    /// Rebuilds parameters from one constrained draw.
    pub fn from_draw(spec: &ModelSpec, d: &[f64]) -> Params {
        let l = spec.layout();
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &d[at..at + n];
            at += n;
            s.to_vec()
        };
        let beta = take(l.k);
        let (lambda, tau, rho2) = if l.horseshoe {
            let lam = take(l.k);
            let tr = take(2);
            (lam, tr[0], tr[1])
        } else {
            (Vec::new(), f64::NAN, f64::NAN)
        };
        let s = take(3);
        let eta = take(l.r);
        let varsigma = take(l.c);
        let alpha = take(l.c * l.h);
        let sigma_delta = take(1)[0];
        let mut psi = [0.0; N_SOURCES];
        psi[SURVEY] = take(1)[0];
        let sj = take(N_SOURCES);
        let mut sigma_j = [0.0; N_SOURCES];
        sigma_j.copy_from_slice(&sj);
        Params {
            beta,
            lambda,
            tau,
            rho2,
            xi: s[0],
            sigma_varsigma: s[1],
            sigma_eta: s[2],
            eta,
            varsigma,
            alpha,
            sigma_delta,
            psi,
            sigma_j,
        }
    }

    /// Inverse of [`Params::from_unconstrained`]. Fails when a value lies
    /// outside its support.
    pub fn to_unconstrained(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        let l = spec.layout();
        let mut x = vec![0.0; l.dim];
        let pos = |v: f64, what: &'static str| -> Result<f64> {
            if v > 0.0 && v.is_finite() { Ok(v.ln()) } else { Err(Error::NonFinite { block: what }) }
        };
        if l.horseshoe {
            x[l.log_tau] = pos(self.tau, "tau")?;
            x[l.log_rho2] = pos(self.rho2, "rho2")?;
            for k in 0..l.k {
                x[l.log_lambda + k] = pos(self.lambda[k], "lambda")?;
                x[l.beta + k] = if spec.param.beta {
                    self.beta[k]
                } else {
                    self.beta[k] / (self.tau * lambda_tilde_sq(self.lambda[k], self.tau, self.rho2).sqrt())
                };
            }
        } else {
            x[l.beta..l.beta + l.k].copy_from_slice(&self.beta);
        }
        x[l.xi] = self.xi;
        x[l.log_sigma_varsigma] = pos(self.sigma_varsigma, "sigma_varsigma")?;
        x[l.log_sigma_eta] = pos(self.sigma_eta, "sigma_eta")?;
        for r in 0..l.r {
            x[l.eta_raw + r] = if spec.param.regions { self.eta[r] } else { (self.eta[r] - self.xi) / self.sigma_eta };
        }
        let means = spec.covariates.country_means();
        for c in 0..l.c {
            x[l.varsigma_raw + c] = if spec.param.countries {
                self.varsigma[c] + (0..l.k).map(|k| means[c * l.k + k] * self.beta[k]).sum::<f64>()
            } else {
                (self.varsigma[c] - self.eta[spec.index.region_of(c)]) / self.sigma_varsigma
            };
        }
        if !(self.sigma_delta > 0.0 && self.sigma_delta < SIGMA_DELTA_MAX) {
            return Err(Error::NonFinite { block: "sigma_delta" });
        }
        let s = self.sigma_delta / SIGMA_DELTA_MAX;
        x[l.sigma_delta_raw] = (s / (1.0 - s)).ln();
        for c in 0..l.c {
            for j in 0..l.h - 1 {
                let a = &self.alpha[c * l.h..(c + 1) * l.h];
                x[l.delta_raw + c * (l.h - 1) + j] = (a[j + 1] - a[j]) / self.sigma_delta;
            }
        }
        x[l.psi_raw] = pos(-self.psi[SURVEY], "psi")?;
        for j in 0..N_SOURCES {
            x[l.log_sigma_j + j] = pos(self.sigma_j[j], "sigma_j")?;
        }
        Ok(x)
    }
}

/// `Theta[c,t]`, the log stillbirth rate.
pub fn theta(params: &Params, spec: &ModelSpec, c: usize, t: usize) -> f64 {
    covariate_part(params, spec, c, t) + smoother_part(params, spec, c, t)
}

/// `varsigma_c + sum_k X[k,c,t] beta_k`.
pub fn covariate_part(params: &Params, spec: &ModelSpec, c: usize, t: usize) -> f64 {
    let x = &spec.covariates;
    params.varsigma[c] + params.beta.iter().enumerate().map(|(k, b)| x.get(k, c, t) * b).sum::<f64>()
}

/// `delta[c,t] = sum_h k_h(t) alpha[h,c]`.
pub fn smoother_part(params: &Params, spec: &ModelSpec, c: usize, t: usize) -> f64 {
    let h = spec.n_basis();
    spec.basis.row(t).iter().zip(&params.alpha[c * h..(c + 1) * h]).map(|(k, a)| k * a).sum()
}

/// Mean and variance of `log y` for an observation.
pub fn obs_moments(params: &Params, spec: &ModelSpec, o: &ModelObs) -> (f64, f64) {
    let mean = theta(params, spec, o.c, o.t) + params.psi[o.source] + o.gamma;
    let var = o.s2 + o.phi2 + params.sigma_j[o.source].powi(2);
    (mean, var)
}

/// Log-likelihood of each observation of `obs`.
pub fn pointwise_loglik(params: &Params, spec: &ModelSpec, obs: &[ModelObs]) -> Vec<f64> {
    obs.iter()
        .map(|o| {
            let (m, v) = obs_moments(params, spec, o);
            normal_lpdf(o.log_y, m, v.sqrt())
        })
        .collect()
}

fn finite(v: f64, block: &'static str) -> Result<f64> {
    if v.is_finite() { Ok(v) } else { Err(Error::NonFinite { block }) }
}

/// Joint log density on the unconstrained space, with gradient.
pub fn log_posterior(spec: &ModelSpec, x: &[f64], grad: &mut [f64]) -> Result<f64> {
    let l = spec.layout();
    if x.len() != l.dim || grad.len() != l.dim {
        return Err(Error::Precondition(format!("expected {} parameters, got {}", l.dim, x.len())));
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let p = Params::from_unconstrained(spec, x);
    let (k_n, c_n, h_n) = (l.k, l.c, l.h);

    // likelihood, accumulating d/dTheta per country-year through its parts
    let mut g_beta = vec![0.0; k_n];
    let mut g_varsigma = vec![0.0; c_n];
    let mut g_alpha = vec![0.0; c_n * h_n];
    let mut lik = 0.0;
    for o in &spec.obs {
        let (m, v) = obs_moments(&p, spec, o);
        let r = o.log_y - m;
        lik += -0.5 * r * r / v - 0.5 * v.ln() - LN_SQRT_2PI;
        let gm = r / v;
        let gv = 0.5 * (r * r / (v * v) - 1.0 / v);
        g_varsigma[o.c] += gm;
        for (k, g) in g_beta.iter_mut().enumerate() {
            *g += gm * spec.covariates.get(k, o.c, o.t);
        }
        for (h, kv) in spec.basis.row(o.t).iter().enumerate() {
            g_alpha[o.c * h_n + h] += gm * kv;
        }
        if o.source == SURVEY {
            // psi = -exp(u)
            grad[l.psi_raw] += gm * p.psi[SURVEY];
        }
        let sj = p.sigma_j[o.source];
        grad[l.log_sigma_j + o.source] += gv * 2.0 * sj * sj;
    }
    let lik = finite(lik, "likelihood")?;

    // intercept hierarchy: varsigma = eta[r] + s_vs z_c, eta = xi + s_eta w_r;
    // centered countries are sampled as varsigma_c + mean_t(X[.,c,t]) beta
    let mut lp_int = normal_lpdf(p.xi, XI_MEAN, XI_SD);
    grad[l.xi] += -(p.xi - XI_MEAN) / (XI_SD * XI_SD);
    let mut g_eta = vec![0.0; l.r];
    let mut g_svs = 0.0;
    let cov_means = if spec.param.countries { spec.covariates.country_means() } else { Vec::new() };
    for c in 0..c_n {
        let r = spec.index.region_of(c);
        if spec.param.countries {
            let z = (p.varsigma[c] - p.eta[r]) / p.sigma_varsigma;
            lp_int += -0.5 * z * z - p.sigma_varsigma.ln() - LN_SQRT_2PI;
            let gs = g_varsigma[c] - z / p.sigma_varsigma;
            grad[l.varsigma_raw + c] += gs;
            for (k, g) in g_beta.iter_mut().enumerate() {
                *g -= gs * cov_means[c * k_n + k];
            }
            g_eta[r] += z / p.sigma_varsigma;
            // d/d log sigma of the normal density
            grad[l.log_sigma_varsigma] += z * z - 1.0;
        } else {
            let z = x[l.varsigma_raw + c];
            lp_int += -0.5 * z * z - LN_SQRT_2PI;
            grad[l.varsigma_raw + c] += g_varsigma[c] * p.sigma_varsigma - z;
            g_svs += g_varsigma[c] * z;
            g_eta[r] += g_varsigma[c];
        }
    }
    let mut g_seta = 0.0;
    for r in 0..l.r {
        if spec.param.regions {
            let z = (p.eta[r] - p.xi) / p.sigma_eta;
            lp_int += -0.5 * z * z - p.sigma_eta.ln() - LN_SQRT_2PI;
            grad[l.eta_raw + r] += g_eta[r] - z / p.sigma_eta;
            grad[l.xi] += z / p.sigma_eta;
            grad[l.log_sigma_eta] += z * z - 1.0;
        } else {
            let w = x[l.eta_raw + r];
            lp_int += -0.5 * w * w - LN_SQRT_2PI;
            grad[l.eta_raw + r] += g_eta[r] * p.sigma_eta - w;
            g_seta += g_eta[r] * w;
            grad[l.xi] += g_eta[r];
        }
    }
    lp_int += half_normal_lpdf(p.sigma_varsigma, 1.0) + x[l.log_sigma_varsigma];
    grad[l.log_sigma_varsigma] += g_svs * p.sigma_varsigma - p.sigma_varsigma.powi(2) + 1.0;
    lp_int += half_normal_lpdf(p.sigma_eta, 1.0) + x[l.log_sigma_eta];
    grad[l.log_sigma_eta] += g_seta * p.sigma_eta - p.sigma_eta.powi(2) + 1.0;
    let lp_int = finite(lp_int, "intercepts")?;

    // regression coefficients
    let mut lp_beta = 0.0;
    match spec.prior {
        PriorMode::RegularizedHorseshoe { tau0, q, g, convention } => {
            let scale = match convention {
                InvGammaConvention::ShapeScale => g,
                InvGammaConvention::ShapeRate => 1.0 / g,
            };
            let (tau, rho2) = (p.tau, p.rho2);
            for k in 0..k_n {
                let lam = p.lambda[k];
                let a = rho2 + tau * tau * lam * lam;
                let b = p.beta[k];
                let sd = tau * lambda_tilde_sq(lam, tau, rho2).sqrt();
                // d log(sd) / d log(lambda), = d / d log(tau); and d / d log(rho2)
                let d_ll = rho2 / a;
                let d_lr = 0.5 * tau * tau * lam * lam / a;
                if spec.param.beta {
                    let z = b / sd;
                    lp_beta += -0.5 * z * z - sd.ln() - LN_SQRT_2PI;
                    grad[l.beta + k] += g_beta[k] - z / sd;
                    let gs = z * z - 1.0;
                    grad[l.log_lambda + k] += gs * d_ll;
                    grad[l.log_tau] += gs * d_ll;
                    grad[l.log_rho2] += gs * d_lr;
                } else {
                    let z = x[l.beta + k];
                    lp_beta += -0.5 * z * z - LN_SQRT_2PI;
                    grad[l.beta + k] += g_beta[k] * sd - z;
                    grad[l.log_lambda + k] += g_beta[k] * b * d_ll;
                    grad[l.log_tau] += g_beta[k] * b * d_ll;
                    grad[l.log_rho2] += g_beta[k] * b * d_lr;
                }
                lp_beta += half_cauchy_lpdf(lam, 1.0) + x[l.log_lambda + k];
                grad[l.log_lambda + k] += 1.0 - 2.0 * lam * lam / (1.0 + lam * lam);
            }
            let zt = tau / tau0;
            lp_beta += half_cauchy_lpdf(tau, tau0) + x[l.log_tau];
            grad[l.log_tau] += 1.0 - 2.0 * zt * zt / (1.0 + zt * zt);
            lp_beta += inv_gamma_lpdf(rho2, q, scale) + x[l.log_rho2];
            grad[l.log_rho2] += -q + scale / rho2;
        }
        PriorMode::SubsettedVague { sd } => {
            for k in 0..k_n {
                let b = x[l.beta + k];
                lp_beta += normal_lpdf(b, 0.0, sd);
                grad[l.beta + k] += g_beta[k] - b / (sd * sd);
            }
        }
    }
    let lp_beta = finite(lp_beta, "beta")?;

    // smoother: alpha = center(cumsum(sigma_delta * z))
    let u = x[l.sigma_delta_raw];
    let mut lp_smooth = -softplus(-u) - softplus(u);
    grad[l.sigma_delta_raw] += 1.0 - 2.0 * logistic(u);
    let mut g_sd = 0.0;
    let mut g_a = vec![0.0; h_n];
    for c in 0..c_n {
        let ga = &g_alpha[c * h_n..(c + 1) * h_n];
        let mean_ga = ga.iter().sum::<f64>() / h_n as f64;
        for (h, g) in g_a.iter_mut().enumerate() {
            *g = ga[h] - mean_ga;
        }
        // d/d diff_j = sum over h > j of dL/da_h
        let mut suffix = 0.0;
        for j in (0..h_n - 1).rev() {
            suffix += g_a[j + 1];
            let idx = l.delta_raw + c * (h_n - 1) + j;
            let z = x[idx];
            lp_smooth += -0.5 * z * z - LN_SQRT_2PI;
            grad[idx] += suffix * p.sigma_delta - z;
            g_sd += suffix * z;
        }
    }
    grad[l.sigma_delta_raw] += g_sd * p.sigma_delta * (1.0 - logistic(u));
    let lp_smooth = finite(lp_smooth, "smoother")?;

    // source types
    let pu = x[l.psi_raw];
    let mut lp_src = normal_lpdf(p.psi[SURVEY], 0.0, PSI_SD) + std::f64::consts::LN_2 + pu;
    grad[l.psi_raw] += -(p.psi[SURVEY] / (PSI_SD * PSI_SD)) * p.psi[SURVEY] + 1.0;
    for j in 0..N_SOURCES {
        let s = p.sigma_j[j];
        lp_src += half_normal_lpdf(s, 1.0) + x[l.log_sigma_j + j];
        grad[l.log_sigma_j + j] += -s * s + 1.0;
    }
    let lp_src = finite(lp_src, "source types")?;

    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { block: block_of(&l, i) });
    }
    Ok(lik + lp_beta + lp_int + lp_smooth + lp_src)
}

fn block_of(l: &Layout, i: usize) -> &'static str {
    if i < l.xi {
        "beta"
    } else if i < l.delta_raw {
        "intercepts"
    } else if i < l.psi_raw {
        "smoother"
    } else {
        "source types"
    }
}

impl LogDensity for ModelSpec {
    fn dim(&self) -> usize {
        self.layout().dim
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        log_posterior(self, x, grad)
    }

    fn param_names(&self) -> Vec<String> {
        ModelSpec::param_names(self)
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        Params::from_unconstrained(self, x).to_vec(self.prior.is_horseshoe())
    }
}

/// Covariates whose absolute posterior median coefficient reaches `cutoff`,
/// in input order.
pub fn subset_covariates(medians: &[(String, f64)], cutoff: f64) -> Result<Vec<usize>> {
    let keep: Vec<usize> = medians.iter().enumerate().filter(|(_, (_, m))| m.abs() >= cutoff).map(|(i, _)| i).collect();
    if keep.is_empty() {
        let largest = medians.iter().map(|(_, m)| m.abs()).fold(0.0, f64::max);
        return Err(Error::Precondition(format!(
            "no covariate reaches the cutoff {cutoff}; the largest |median| is {largest:.4}, use a lower cutoff"
        )));
    }
    Ok(keep)
}

/// Posterior median of each coefficient, by covariate name.
pub fn beta_medians(spec: &ModelSpec, draws: &crate::sampler::PosteriorDraws) -> Vec<(String, f64)> {
    (0..spec.n_covariates())
        .map(|k| (spec.covariates.names[k].clone(), crate::math::median(&draws.pooled(k))))
        .collect()
}

/// Restricts the spec to `included` (positions in the spec's current
/// covariate list) and switches to the vague coefficient prior.
pub fn make_subsetted_spec(spec: &ModelSpec, included: &[usize]) -> Result<ModelSpec> {
    if included.is_empty() {
        return Err(Error::Precondition("subsetted model needs at least one covariate".into()));
    }
    if let Some(bad) = included.iter().find(|&&k| k >= spec.n_covariates()) {
        return Err(Error::Precondition(format!("covariate position {bad} out of range")));
    }
    ModelSpec::from_parts(
        spec.obs.clone(),
        spec.covariates.select(included),
        spec.index.clone(),
        spec.basis.clone(),
        PriorMode::SubsettedVague { sd: VAGUE_BETA_SD },
        included.iter().map(|&k| spec.included[k]).collect(),
    )
}
