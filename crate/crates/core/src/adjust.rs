//! Definitional adjustment.
//!
//! Paired stillbirth counts recorded under the 28-week definition and an
//! alternative definition give the log-scale shift `gamma` and the extra
//! variance `phi2` that map alternative-definition observations onto the
//! 28-week reference. Gestational-age cutoffs below 28 weeks contain the
//! 28-week set and use a binomial model; birthweight cutoffs overlap it and
//! use a constrained multinomial model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{header_index, open_reader, parse_optional, CountryIndex, Definition, IncomeGroup, Observation, PairingKind};
use crate::error::{Error, Result};
use crate::math::{half_normal_lpdf, logistic, median, normal_lpdf, softplus, variance};
use crate::rng::{derive_seed, derive_seed_str, rng_from};
use crate::sampler::{sample, LogDensity, PosteriorDraws, SamplerConfig};

/// Prior variance of the mean log-ratio in the overlapping model.
pub const MU_GAMMA_PRIOR_VAR: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairCounts {
    /// `z` stillbirths under 28 weeks out of `z_alt` under the alternative.
    Containing { z: f64, z_alt: f64 },
    /// `a` in both sets, `b` only in the alternative, `c` only in the 28-week set.
    Overlapping { a: f64, b: f64, c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedCounts {
    pub definition: Definition,
    pub income_group: IncomeGroup,
    pub counts: PairCounts,
}

impl PairedCounts {
    pub fn kind(&self) -> PairingKind {
        match self.counts {
            PairCounts::Containing { .. } => PairingKind::Containing,
            PairCounts::Overlapping { .. } => PairingKind::Overlapping,
        }
    }

    /// Count under the 28-week definition.
    pub fn z(&self) -> f64 {
        match self.counts {
            PairCounts::Containing { z, .. } => z,
            PairCounts::Overlapping { a, c, .. } => a + c,
        }
    }

    /// Count under the alternative definition.
    pub fn z_alt(&self) -> f64 {
        match self.counts {
            PairCounts::Containing { z_alt, .. } => z_alt,
            PairCounts::Overlapping { a, b, .. } => a + b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        match self.counts {
            PairCounts::Containing { z, z_alt } => {
                if !ok(z) || !ok(z_alt) {
                    return Err(Error::Data(format!("negative or missing count in pair ({z}, {z_alt})")));
                }
                if z > z_alt {
                    return Err(Error::Data(format!(
                        "28-week count {z} exceeds the containing {} count {z_alt}",
                        self.definition
                    )));
                }
            }
            PairCounts::Overlapping { a, b, c } => {
                if !ok(a) || !ok(b) || !ok(c) {
                    return Err(Error::Data(format!("negative component in overlapping pair ({a}, {b}, {c})")));
                }
            }
        }
        Ok(())
    }
}

/// Reads `paired_counts.csv` with columns definition, income_group, z,
/// z_alt, a, b, c. Containing definitions need z and z_alt; overlapping
/// definitions need a, b and c.
pub fn read_paired_counts(path: &Path) -> Result<Vec<PairedCounts>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let di = header_index(path, &headers, "definition")?;
    let gi = header_index(path, &headers, "income_group")?;
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (zi, zai, ai, bi, ci) = (col("z"), col("z_alt"), col("a"), col("b"), col("c"));
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = row + 2;
        let bad = |msg: String| Error::Data(format!("{} line {line}: {msg}", path.display()));
        let definition: Definition = rec[di].parse().map_err(bad)?;
        let income_group: IncomeGroup = rec[gi].parse().map_err(bad)?;
        let get = |i: Option<usize>, name: &str| -> Result<f64> {
            let raw = i.map(|i| &rec[i]).unwrap_or("");
            parse_optional(raw)
                .map_err(bad)?
                .ok_or_else(|| bad(format!("column `{name}` required for {definition}")))
        };
        let counts = match definition.pairing_kind() {
            None => return Err(bad("the 28-week definition cannot be paired with itself".into())),
            Some(PairingKind::Containing) => PairCounts::Containing { z: get(zi, "z")?, z_alt: get(zai, "z_alt")? },
            Some(PairingKind::Overlapping) => {
                PairCounts::Overlapping { a: get(ai, "a")?, b: get(bi, "b")?, c: get(ci, "c")? }
            }
        };
        let pair = PairedCounts { definition, income_group, counts };
        pair.validate().map_err(|e| bad(e.to_string()))?;
        out.push(pair);
    }
    Ok(out)
}

fn check_group(pairs: &[PairedCounts], kind: PairingKind) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::Precondition(format!("need at least 2 paired counts, got {}", pairs.len())));
    }
    let d = pairs[0].definition;
    for p in pairs {
        if p.kind() != kind || p.definition != d {
            return Err(Error::Precondition(format!(
                "mixed pairs: expected {kind:?} pairs for {d}, found {:?} for {}",
                p.kind(),
                p.definition
            )));
        }
        p.validate()?;
    }
    Ok(())
}

/// Binomial model with logit-normal probabilities. Unconstrained layout:
/// `[mu, log sigma, logit omega_1..n]`.
#[derive(Debug, Clone)]
pub struct ContainingModel {
    z: Vec<f64>,
    z_alt: Vec<f64>,
}

impl ContainingModel {
    pub fn new(pairs: &[PairedCounts]) -> Result<Self> {
        check_group(pairs, PairingKind::Containing)?;
        Ok(ContainingModel { z: pairs.iter().map(|p| p.z()).collect(), z_alt: pairs.iter().map(|p| p.z_alt()).collect() })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }
}

impl LogDensity for ContainingModel {
    fn dim(&self) -> usize {
        2 + self.n()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mu = x[0];
        let ls = x[1];
        let sigma = ls.exp();
        grad.iter_mut().for_each(|g| *g = 0.0);
        // expit(mu) ~ U(0, 1) is a standard logistic density on mu
        let s = logistic(mu);
        let mut lp = -softplus(-mu) - softplus(mu);
        grad[0] = 1.0 - 2.0 * s;
        lp += half_normal_lpdf(sigma, 1.0) + ls;
        grad[1] = -sigma * sigma + 1.0;
        for i in 0..self.n() {
            let xi = x[2 + i];
            let r = (xi - mu) / sigma;
            lp += normal_lpdf(xi, mu, sigma);
            grad[2 + i] -= r / sigma;
            grad[0] += r / sigma;
            grad[1] += r * r - 1.0;
            // z log(omega) + (z_alt - z) log(1 - omega)
            let (z, n) = (self.z[i], self.z_alt[i]);
            lp += -z * softplus(-xi) - (n - z) * softplus(xi);
            grad[2 + i] += z - n * logistic(xi);
        }
        if !lp.is_finite() {
            return Err(Error::NonFinite { block: "containing adjustment" });
        }
        Ok(lp)
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec!["mu_omega".to_string(), "sigma_omega".to_string()];
        v.extend((0..self.n()).map(|i| format!("omega[{}]", i + 1)));
        v
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![x[0], x[1].exp()];
        v.extend(x[2..].iter().map(|xi| logistic(*xi)));
        v
    }
}

/// Bounds `(L, U)` of the 28-week probability mass `omega_a + omega_c`
/// given the log-ratio `gamma`, together with `U - L` computed stably.
fn mass_bounds(gamma: f64) -> (f64, f64, f64) {
    let e = gamma.exp();
    let lower = logistic(-gamma);
    if gamma < 0.0 {
        (lower, 1.0, logistic(gamma))
    } else {
        (lower, (-gamma).exp(), 1.0 / (e * (1.0 + e)))
    }
}

/// Multinomial cell probabilities `(omega_a, omega_b, omega_c)` for the
/// log-ratio `gamma` and the unconstrained position `v` of the 28-week mass
/// inside its admissible interval.
pub fn overlap_probabilities(gamma: f64, v: f64) -> (f64, f64, f64) {
    let e = gamma.exp();
    let (_, _, width) = mass_bounds(gamma);
    let s = logistic(v);
    let t = logistic(-v);
    let wa = width * s * (1.0 + e);
    let (wb, wc) = if gamma < 0.0 {
        (logistic(gamma) * t, -gamma.exp_m1() + e * logistic(gamma) * t)
    } else {
        (-(-gamma).exp_m1() + width * t, e * width * t)
    };
    (wa, wb, wc)
}

/// Inverse of [`overlap_probabilities`]: recovers `(gamma, v)` from a
/// probability vector.
pub fn overlap_unconstrained(wa: f64, wb: f64, wc: f64) -> (f64, f64) {
    let gamma = ((wa + wb) / (wa + wc)).ln();
    let (lower, _, width) = mass_bounds(gamma);
    let p = wa + wc;
    let s = (p - lower) / width;
    (gamma, (s / (1.0 - s)).ln())
}

/// Constrained multinomial model. Unconstrained layout:
/// `[mu, log sigma, Gamma_1..n, v_1..n]` where `v_i` places the 28-week
/// mass inside its admissible interval.
#[derive(Debug, Clone)]
pub struct OverlappingModel {
    abc: Vec<[f64; 3]>,
}

impl OverlappingModel {
    pub fn new(pairs: &[PairedCounts]) -> Result<Self> {
        check_group(pairs, PairingKind::Overlapping)?;
        let abc = pairs
            .iter()
            .map(|p| match p.counts {
                PairCounts::Overlapping { a, b, c } => [a, b, c],
                PairCounts::Containing { .. } => unreachable!(),
            })
            .collect();
        Ok(OverlappingModel { abc })
    }

    pub fn n(&self) -> usize {
        self.abc.len()
    }
}

impl LogDensity for OverlappingModel {
    fn dim(&self) -> usize {
        2 + 2 * self.n()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let n = self.n();
        let mu = x[0];
        let ls = x[1];
        let sigma = ls.exp();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let prior_sd = MU_GAMMA_PRIOR_VAR.sqrt();
        let mut lp = normal_lpdf(mu, 0.0, prior_sd);
        grad[0] = -mu / MU_GAMMA_PRIOR_VAR;
        lp += half_normal_lpdf(sigma, 1.0) + ls;
        grad[1] = -sigma * sigma + 1.0;
        for i in 0..n {
            let g = x[2 + i];
            let v = x[2 + n + i];
            let r = (g - mu) / sigma;
            lp += normal_lpdf(g, mu, sigma);
            grad[2 + i] -= r / sigma;
            grad[0] += r / sigma;
            grad[1] += r * r - 1.0;

            // uniform prior on the mass times the logistic Jacobian
            let s = logistic(v);
            lp += -softplus(-v) - softplus(v);
            grad[2 + n + i] += 1.0 - 2.0 * s;

            let e = g.exp();
            let (lower, upper, width) = mass_bounds(g);
            let p = lower + width * s;
            let d_lower = -lower * (1.0 - lower);
            let d_upper = if g < 0.0 { 0.0 } else { -upper };
            let dp_dg = d_lower + (d_upper - d_lower) * s;
            let dp_dv = width * s * (1.0 - s);
            let (wa, wb, wc) = overlap_probabilities(g, v);
            let [a, b, c] = self.abc[i];
            let term = |count: f64, w: f64| if count > 0.0 { count * w.ln() } else { 0.0 };
            lp += term(a, wa) + term(b, wb) + term(c, wc);
            // d omega_a = dp (1 + e) + p e d gamma; d omega_b = -dp; d omega_c = -e dp - e p d gamma
            let ga = if a > 0.0 { a / wa } else { 0.0 };
            let gb = if b > 0.0 { b / wb } else { 0.0 };
            let gc = if c > 0.0 { c / wc } else { 0.0 };
            grad[2 + i] += ga * (dp_dg * (1.0 + e) + p * e) - gb * dp_dg - gc * (e * dp_dg + e * p);
            grad[2 + n + i] += ga * dp_dv * (1.0 + e) - gb * dp_dv - gc * e * dp_dv;
        }
        if !lp.is_finite() {
            return Err(Error::NonFinite { block: "overlapping adjustment" });
        }
        Ok(lp)
    }

    fn param_names(&self) -> Vec<String> {
        let n = self.n();
        let mut v = vec!["mu_gamma".to_string(), "sigma_gamma".to_string()];
        for name in ["Gamma", "omega_a", "omega_b", "omega_c"] {
            v.extend((0..n).map(|i| format!("{name}[{}]", i + 1)));
        }
        v
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; 2 + 4 * n];
        out[0] = x[0];
        out[1] = x[1].exp();
        for i in 0..n {
            let (wa, wb, wc) = overlap_probabilities(x[2 + i], x[2 + n + i]);
            out[2 + i] = x[2 + i];
            out[2 + n + i] = wa;
            out[2 + 2 * n + i] = wb;
            out[2 + 3 * n + i] = wc;
        }
        out
    }
}

/// Posterior of one (definition, income group) adjustment model.
#[derive(Debug, Clone)]
pub struct DefinitionFit {
    pub definition: Definition,
    pub income_group: IncomeGroup,
    pub kind: PairingKind,
    pub n_pairs: usize,
    pub draws: PosteriorDraws,
}

impl DefinitionFit {
    /// Posterior draws of the across-setting (mean, sd).
    pub fn hyper_draws(&self) -> Vec<(f64, f64)> {
        self.draws.iter_draws().map(|d| (d[0], d[1])).collect()
    }
}

fn group_of(pairs: &[PairedCounts]) -> (Definition, IncomeGroup) {
    (pairs[0].definition, pairs[0].income_group)
}

pub fn fit_containing(pairs: &[PairedCounts], config: &SamplerConfig) -> Result<DefinitionFit> {
    let model = ContainingModel::new(pairs)?;
    let (definition, income_group) = group_of(pairs);
    let draws = sample(&model, config)?;
    Ok(DefinitionFit { definition, income_group, kind: PairingKind::Containing, n_pairs: pairs.len(), draws })
}

pub fn fit_overlapping(pairs: &[PairedCounts], config: &SamplerConfig) -> Result<DefinitionFit> {
    let model = OverlappingModel::new(pairs)?;
    let (definition, income_group) = group_of(pairs);
    let draws = sample(&model, config)?;
    Ok(DefinitionFit { definition, income_group, kind: PairingKind::Overlapping, n_pairs: pairs.len(), draws })
}

/// Predictive summary of the adjustment for a new setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRow {
    pub gamma: f64,
    pub phi2: f64,
    pub n_pairs: usize,
    #[serde(skip)]
    pub kappa_draws: Vec<f64>,
}

/// Pushes each hyperparameter draw through one new unit and returns the
/// median and variance of the resulting `kappa` draws.
pub fn predictive_adjustment(hyper: &[(f64, f64)], kind: PairingKind, seed: u64) -> AdjustmentRow {
    let mut rng = rng_from(seed);
    let kappa_draws: Vec<f64> = hyper
        .iter()
        .map(|&(mu, sigma)| {
            let x = mu + sigma * rng.sample::<f64, _>(StandardNormal);
            match kind {
                PairingKind::Containing => softplus(-x),
                PairingKind::Overlapping => x,
            }
        })
        .collect();
    let phi2 = if kappa_draws.len() > 1 { variance(&kappa_draws) } else { 0.0 };
    AdjustmentRow { gamma: median(&kappa_draws), phi2, n_pairs: 0, kappa_draws }
}

/// Which adjustment an observation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdjustmentLookup {
    /// Treated as the 28-week reference: `gamma = 0`, `phi2 = 0`.
    Reference,
    /// Use the table row for this (definition, income group).
    Row(Definition, IncomeGroup),
}

/// Equivalence rules between definitions. In low- and middle-income
/// countries 500 g is treated as 22 weeks and 1000 g as 28 weeks.
pub fn apply_equivalences(definition: Definition, income: IncomeGroup) -> AdjustmentLookup {
    match (definition, income) {
        (Definition::Ge28Weeks, _) => AdjustmentLookup::Reference,
        (Definition::Ge1000g, IncomeGroup::LowMiddle) => AdjustmentLookup::Reference,
        (Definition::Ge500g, IncomeGroup::LowMiddle) => AdjustmentLookup::Row(Definition::Ge22Weeks, IncomeGroup::LowMiddle),
        (d, g) => AdjustmentLookup::Row(d, g),
    }
}

/// Per (definition, income group) adjustments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentTable {
    pub rows: BTreeMap<(Definition, IncomeGroup), AdjustmentRow>,
}

impl AdjustmentTable {
    /// `(gamma, phi2)` for an observation's definition, or `None` when the
    /// required row is missing.
    pub fn lookup(&self, definition: Definition, income: IncomeGroup) -> Option<(f64, f64)> {
        match apply_equivalences(definition, income) {
            AdjustmentLookup::Reference => Some((0.0, 0.0)),
            AdjustmentLookup::Row(d, g) => self.rows.get(&(d, g)).map(|r| (r.gamma, r.phi2)),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["definition", "income_group", "gamma", "phi", "phi2", "n_pairs"])
            .map_err(|e| Error::csv(path, e))?;
        for ((d, g), r) in &self.rows {
            w.write_record([
                d.as_str().to_string(),
                g.as_str().to_string(),
                format!("{:.6}", r.gamma),
                format!("{:.6}", r.phi2.sqrt()),
                format!("{:.8}", r.phi2),
                r.n_pairs.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = open_reader(path)?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let di = header_index(path, &headers, "definition")?;
        let gi = header_index(path, &headers, "income_group")?;
        let ga = header_index(path, &headers, "gamma")?;
        let pi = header_index(path, &headers, "phi")?;
        let ni = headers.iter().position(|h| h == "n_pairs");
        let mut table = AdjustmentTable::default();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let d: Definition = rec[di].parse().map_err(Error::Data)?;
            let g: IncomeGroup = rec[gi].parse().map_err(Error::Data)?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::Data(format!("bad number `{}`", &rec[i])));
            let phi = num(pi)?;
            let n_pairs = ni.and_then(|i| rec[i].parse().ok()).unwrap_or(0);
            table.rows.insert((d, g), AdjustmentRow { gamma: num(ga)?, phi2: phi * phi, n_pairs, kappa_draws: Vec::new() });
        }
        Ok(table)
    }
}

/// Groups fitted by default: containing and overlapping definitions in
/// high-income countries and 22 weeks in low- and middle-income countries.
pub fn default_plan() -> Vec<(Definition, IncomeGroup)> {
    vec![
        (Definition::Ge22Weeks, IncomeGroup::High),
        (Definition::Ge24Weeks, IncomeGroup::High),
        (Definition::Ge500g, IncomeGroup::High),
        (Definition::Ge1000g, IncomeGroup::High),
        (Definition::Ge22Weeks, IncomeGroup::LowMiddle),
    ]
}

/// Fits every planned group that has at least two pairs, in parallel, and
/// builds the adjustment table. Groups without enough pairs are skipped
/// with a warning; observations needing them become unadjustable.
pub fn estimate_adjustments(
    pairs: &[PairedCounts],
    plan: &[(Definition, IncomeGroup)],
    config: &SamplerConfig,
) -> Result<(AdjustmentTable, Vec<DefinitionFit>)> {
    let mut groups: BTreeMap<(Definition, IncomeGroup), Vec<PairedCounts>> = BTreeMap::new();
    for p in pairs {
        groups.entry((p.definition, p.income_group)).or_default().push(*p);
    }
    let jobs: Vec<((Definition, IncomeGroup), Vec<PairedCounts>)> = plan
        .iter()
        .filter_map(|key| match groups.get(key) {
            Some(v) if v.len() >= 2 => Some((*key, v.clone())),
            _ => {
                log::warn!("no adjustment fitted for {} / {}: fewer than 2 pairs", key.0, key.1);
                None
            }
        })
        .collect();
    let fits: Vec<DefinitionFit> = jobs
        .par_iter()
        .map(|((d, g), group)| {
            let cfg = SamplerConfig {
                seed: derive_seed_str(config.seed, &format!("adjust/{d}/{g}")),
                ..config.clone()
            };
            match d.pairing_kind() {
                Some(PairingKind::Containing) => fit_containing(group, &cfg),
                _ => fit_overlapping(group, &cfg),
            }
        })
        .collect::<Result<_>>()?;
    let mut table = AdjustmentTable::default();
    for (i, fit) in fits.iter().enumerate() {
        let mut row = predictive_adjustment(&fit.hyper_draws(), fit.kind, derive_seed(config.seed, 1000 + i as u64));
        row.n_pairs = fit.n_pairs;
        table.rows.insert((fit.definition, fit.income_group), row);
    }
    Ok((table, fits))
}

/// An observation with its definitional adjustment attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedObservation {
    pub obs: Observation,
    pub gamma: f64,
    pub phi2: f64,
}

impl AdjustedObservation {
    pub fn reference(obs: Observation) -> Self {
        AdjustedObservation { obs, gamma: 0.0, phi2: 0.0 }
    }

    /// `ln(sbr) - gamma`, the observation on the 28-week scale.
    pub fn adjusted_log_sbr(&self) -> f64 {
        self.obs.sbr.ln() - self.gamma
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdjustedSet {
    pub adjusted: Vec<AdjustedObservation>,
    pub unadjustable: Vec<Observation>,
}

/// Attaches `(gamma, phi2)` to every observation whose country and
/// definition resolve to a table row.
pub fn adjust_observations(observations: &[Observation], index: &CountryIndex, table: &AdjustmentTable) -> AdjustedSet {
    let mut out = AdjustedSet::default();
    for o in observations {
        let found = index.income_of_code(&o.country).and_then(|g| table.lookup(o.definition, g));
        match found {
            Some((gamma, phi2)) => out.adjusted.push(AdjustedObservation { obs: o.clone(), gamma, phi2 }),
            None => out.unadjustable.push(o.clone()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn containing(z: f64, z_alt: f64) -> PairedCounts {
        PairedCounts {
            definition: Definition::Ge22Weeks,
            income_group: IncomeGroup::High,
            counts: PairCounts::Containing { z, z_alt },
        }
    }

    fn overlapping(a: f64, b: f64, c: f64) -> PairedCounts {
        PairedCounts {
            definition: Definition::Ge500g,
            income_group: IncomeGroup::High,
            counts: PairCounts::Overlapping { a, b, c },
        }
    }

    fn check_gradient<M: LogDensity>(model: &M, x: &[f64]) {
        let mut g = vec![0.0; x.len()];
        model.log_density_and_grad(x, &mut g).unwrap();
        let mut scratch = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fp = model.log_density_and_grad(&xp, &mut scratch).unwrap();
            let fm = model.log_density_and_grad(&xm, &mut scratch).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-5 * (1.0 + fd.abs());
            assert!((g[i] - fd).abs() < tol, "coordinate {i}: analytic {} vs numeric {fd}", g[i]);
        }
    }

    #[test]
    fn containing_gradient() {
        let pairs = vec![containing(40.0, 50.0), containing(7.0, 12.0), containing(3.0, 3.0)];
        let m = ContainingModel::new(&pairs).unwrap();
        let mut rng = rng_from(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            check_gradient(&m, &x);
        }
    }

    #[test]
    fn overlapping_gradient() {
        let pairs = vec![overlapping(90.0, 10.0, 4.0), overlapping(20.0, 0.0, 5.0), overlapping(5.0, 2.0, 0.0)];
        let m = OverlappingModel::new(&pairs).unwrap();
        let mut rng = rng_from(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            check_gradient(&m, &x);
        }
    }

    #[test]
    fn overlap_parameterization_round_trip() {
        let mut rng = rng_from(11);
        for _ in 0..2000 {
            let g = rng.random_range(-3.0..3.0);
            let v = rng.random_range(-6.0..6.0);
            let (wa, wb, wc) = overlap_probabilities(g, v);
            assert!(wa > 0.0 && wb >= 0.0 && wc >= 0.0);
            assert!((wa + wb + wc - 1.0).abs() < 1e-12);
            // the definition of Gamma
            assert!((((wa + wb) / (wa + wc)).ln() - g).abs() < 1e-9);
            // the mass of the 28-week set lies in the admissible interval
            let p = wa + wc;
            assert!(p > 1.0 / (1.0 + g.exp()) - 1e-12 && p < 1.0 / g.exp().max(1.0) + 1e-12);
            let (g2, v2) = overlap_unconstrained(wa, wb, wc);
            assert!((g2 - g).abs() < 1e-8 && (v2 - v).abs() < 1e-6, "{g} {v} -> {g2} {v2}");
        }
    }

    #[test]
    fn identical_definitions_peak_at_zero() {
        // only the a cell is populated: the likelihood in Gamma peaks at 0
        let m = OverlappingModel::new(&[overlapping(100.0, 0.0, 0.0), overlapping(100.0, 0.0, 0.0)]).unwrap();
        let at = |g: f64| {
            let mut x = vec![0.0, 0.0, g, g, 8.0, 8.0];
            x[0] = g;
            let mut grad = vec![0.0; 6];
            m.log_density_and_grad(&x, &mut grad).unwrap()
        };
        assert!(at(0.0) > at(0.2));
        assert!(at(0.0) > at(-0.2));
    }

    #[test]
    fn preconditions() {
        assert!(ContainingModel::new(&[containing(3.0, 5.0)]).is_err());
        assert!(containing(6.0, 5.0).validate().is_err());
        assert!(overlapping(1.0, -1.0, 0.0).validate().is_err());
        assert!(ContainingModel::new(&[containing(3.0, 5.0), overlapping(1.0, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn degenerate_predictive() {
        let hyper = vec![(40.0, 1e-6); 1000];
        let row = predictive_adjustment(&hyper, PairingKind::Containing, 1);
        assert!(row.gamma.abs() < 1e-12);
        assert!(row.phi2 >= 0.0 && row.phi2 < 1e-20);
    }

    #[test]
    fn predictive_variance_exceeds_variance_of_means() {
        let mut rng = rng_from(9);
        let hyper: Vec<(f64, f64)> =
            (0..4000).map(|_| (1.2 + 0.1 * rng.sample::<f64, _>(StandardNormal), 0.4)).collect();
        let row = predictive_adjustment(&hyper, PairingKind::Overlapping, 2);
        let means: Vec<f64> = hyper.iter().map(|h| h.0).collect();
        assert!(row.phi2 > variance(&means));
        assert!(row.kappa_draws.len() == 4000);
        let row = predictive_adjustment(&hyper, PairingKind::Containing, 2);
        assert!(row.kappa_draws.iter().all(|k| *k >= 0.0));
    }

    #[test]
    fn equivalence_rules() {
        use AdjustmentLookup::*;
        assert_eq!(apply_equivalences(Definition::Ge1000g, IncomeGroup::LowMiddle), Reference);
        assert_eq!(
            apply_equivalences(Definition::Ge500g, IncomeGroup::LowMiddle),
            Row(Definition::Ge22Weeks, IncomeGroup::LowMiddle)
        );
        assert_eq!(apply_equivalences(Definition::Ge28Weeks, IncomeGroup::High), Reference);
        assert_eq!(apply_equivalences(Definition::Ge500g, IncomeGroup::High), Row(Definition::Ge500g, IncomeGroup::High));

        let mut table = AdjustmentTable::default();
        table.rows.insert(
            (Definition::Ge22Weeks, IncomeGroup::LowMiddle),
            AdjustmentRow { gamma: 0.214, phi2: 0.084f64.powi(2), n_pairs: 5, kappa_draws: vec![] },
        );
        assert_eq!(table.lookup(Definition::Ge1000g, IncomeGroup::LowMiddle), Some((0.0, 0.0)));
        assert_eq!(table.lookup(Definition::Ge500g, IncomeGroup::LowMiddle).unwrap().0, 0.214);
        // every combination resolves to a row, the reference, or the unadjustable bucket
        for d in Definition::ALL {
            for g in [IncomeGroup::High, IncomeGroup::LowMiddle] {
                let _ = table.lookup(d, g);
            }
        }
        assert_eq!(table.lookup(Definition::Ge24Weeks, IncomeGroup::High), None);
    }

    #[test]
    fn table_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adjustment_table.csv");
        let mut table = AdjustmentTable::default();
        table.rows.insert(
            (Definition::Ge1000g, IncomeGroup::High),
            AdjustmentRow { gamma: -0.065, phi2: 0.073f64.powi(2), n_pairs: 12, kappa_draws: vec![] },
        );
        table.write_csv(&path).unwrap();
        let back = AdjustmentTable::read_csv(&path).unwrap();
        let (g, p) = back.lookup(Definition::Ge1000g, IncomeGroup::High).unwrap();
        assert!((g + 0.065).abs() < 1e-9 && (p.sqrt() - 0.073).abs() < 1e-9);
    }

    #[test]
    fn paired_counts_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paired_counts.csv");
        std::fs::write(
            &path,
            "definition,income_group,z,z_alt,a,b,c\nge22wks,high,80,100,,,\nge500g,low,,,50,7,3\n",
        )
        .unwrap();
        let pairs = read_paired_counts(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].z(), 53.0);
        assert_eq!(pairs[1].z_alt(), 57.0);
        std::fs::write(&path, "definition,income_group,z,z_alt,a,b,c\nge22wks,high,120,100,,,\n").unwrap();
        assert!(read_paired_counts(&path).is_err());
    }

    #[test]
    fn containing_fit_concentrates_when_counts_agree() {
        let pairs: Vec<PairedCounts> = (0..8).map(|i| containing(200.0 + i as f64, 200.0 + i as f64)).collect();
        let cfg = SamplerConfig { n_chains: 2, n_iter: 1000, n_warmup: 500, seed: 4, ..Default::default() };
        let fit = fit_containing(&pairs, &cfg).unwrap();
        let row = predictive_adjustment(&fit.hyper_draws(), PairingKind::Containing, 3);
        assert!(row.gamma < 0.02, "{}", row.gamma);
        let omega = fit.draws.pooled(2);
        assert!(median(&omega) > 0.99);
    }

    #[test]
    fn symmetric_overlap_centres_gamma_at_zero() {
        let pairs: Vec<PairedCounts> = (0..10).map(|i| overlapping(300.0 + 10.0 * i as f64, 20.0, 20.0)).collect();
        let cfg = SamplerConfig { n_chains: 2, n_iter: 1000, n_warmup: 500, seed: 8, ..Default::default() };
        let fit = fit_overlapping(&pairs, &cfg).unwrap();
        let mu = fit.draws.pooled(0);
        assert!(median(&mu).abs() < 0.03, "{}", median(&mu));
        let n = pairs.len();
        for d in fit.draws.iter_draws() {
            for i in 0..n {
                let (wa, wb, wc) = (d[2 + n + i], d[2 + 2 * n + i], d[2 + 3 * n + i]);
                assert!((wa + wb + wc - 1.0).abs() < 1e-12);
            }
        }
    }
}
