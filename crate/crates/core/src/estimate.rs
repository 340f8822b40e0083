//! Country-year stillbirth rate estimates from posterior draws.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{header_index, open_reader};
use crate::error::{Error, Result};
use crate::math::quantile;
use crate::model::{covariate_part, theta, ModelSpec, Params};
use crate::sampler::PosteriorDraws;

/// Median and 90% interval of a rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Band {
    pub fn from_draws(xs: &[f64]) -> Band {
        Band { median: quantile(xs, 0.5), lower: quantile(xs, 0.05), upper: quantile(xs, 0.95) }
    }

    fn is_ordered(&self) -> bool {
        self.lower <= self.median && self.median <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub country: String,
    pub year: i32,
    /// Stillbirths per 1000 total births.
    pub estimate: Band,
    /// `exp(varsigma_c + X beta)`, without the smoother.
    pub covariate_only: Band,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateTable {
    pub rows: Vec<EstimateRow>,
}

/// Summary of `exp(varsigma_c + sum_k X[k,c,t] beta_k)` over the draws.
pub fn covariate_only_estimate(draws: &[Params], spec: &ModelSpec, c: usize, t: usize) -> Band {
    let v: Vec<f64> = draws.iter().map(|p| covariate_part(p, spec, c, t).exp()).collect();
    Band::from_draws(&v)
}

/// Summary of `exp(Theta[c,t])` over the draws.
pub fn full_estimate(draws: &[Params], spec: &ModelSpec, c: usize, t: usize) -> Band {
    let v: Vec<f64> = draws.iter().map(|p| theta(p, spec, c, t).exp()).collect();
    Band::from_draws(&v)
}

pub fn unpack_draws(spec: &ModelSpec, draws: &PosteriorDraws) -> Vec<Params> {
    draws.iter_draws().map(|d| Params::from_draw(spec, d)).collect()
}

/// Estimates for every country and year of the window, in model order.
pub fn build_estimates(spec: &ModelSpec, draws: &PosteriorDraws) -> Result<EstimateTable> {
    if draws.total_draws() == 0 {
        return Err(Error::Precondition("no posterior draws to summarize".into()));
    }
    let params = unpack_draws(spec, draws);
    let years: Vec<i32> = spec.basis.window.years().collect();
    let cells: Vec<(usize, usize)> = (0..spec.n_countries()).flat_map(|c| (0..years.len()).map(move |t| (c, t))).collect();
    let rows = cells
        .par_iter()
        .map(|&(c, t)| EstimateRow {
            country: spec.index.countries[c].clone(),
            year: years[t],
            estimate: full_estimate(&params, spec, c, t),
            covariate_only: covariate_only_estimate(&params, spec, c, t),
        })
        .collect();
    let table = EstimateTable { rows };
    table.check()?;
    Ok(table)
}

const HEADER: [&str; 8] = ["country", "year", "median", "lower_5", "upper_95", "covariate_median", "covariate_lower_5", "covariate_upper_95"];

impl EstimateTable {
    /// Quantile ordering and positivity of every row.
    pub fn check(&self) -> Result<()> {
        for r in &self.rows {
            for b in [r.estimate, r.covariate_only] {
                if !(b.lower > 0.0 && b.is_ordered()) {
                    return Err(Error::Data(format!("estimate for {} {} is not an ordered positive band: {b:?}", r.country, r.year)));
                }
            }
        }
        Ok(())
    }

    pub fn for_country(&self, country: &str) -> Vec<&EstimateRow> {
        self.rows.iter().filter(|r| r.country == country).collect()
    }

    pub fn countries(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.country) {
                v.push(r.country.clone());
            }
        }
        v
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(HEADER).map_err(|e| Error::csv(path, e))?;
        for r in &self.rows {
            let f = |v: f64| format!("{v:.6}");
            w.write_record([
                r.country.clone(),
                r.year.to_string(),
                f(r.estimate.median),
                f(r.estimate.lower),
                f(r.estimate.upper),
                f(r.covariate_only.median),
                f(r.covariate_only.lower),
                f(r.covariate_only.upper),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = open_reader(path)?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let idx: Vec<usize> = HEADER.iter().map(|h| header_index(path, &headers, h)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let num = |i: usize| {
                rec[idx[i]].parse::<f64>().map_err(|_| Error::Data(format!("{}: bad number `{}`", path.display(), &rec[idx[i]])))
            };
            rows.push(EstimateRow {
                country: rec[idx[0]].to_string(),
                year: rec[idx[1]].parse().map_err(|_| Error::Data(format!("{}: bad year `{}`", path.display(), &rec[idx[1]])))?,
                estimate: Band { median: num(2)?, lower: num(3)?, upper: num(4)? },
                covariate_only: Band { median: num(5)?, lower: num(6)?, upper: num(7)? },
            });
        }
        Ok(EstimateTable { rows })
    }
}
