//! No-U-Turn Hamiltonian Monte Carlo.
//!
//! Targets implement [`LogDensity`] on an unconstrained space and map
//! draws back to named constrained parameters. [`sample`] runs independent
//! chains in parallel, each seeded from the root seed and its chain index,
//! and returns [`PosteriorDraws`] ordered by chain.

mod adapt;
pub mod diagnostics;
pub mod io;
mod nuts;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub use adapt::DualAveraging;
pub use diagnostics::{ess, split_rhat, split_rhat_classic, EssKind, Summary};
pub use nuts::TransitionStats;

use nuts::{Integrator, Point};

/// A differentiable log density on `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density at `x` and writes its gradient into `grad`.
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Names of the constrained parameters returned by [`constrain`](Self::constrain).
    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Maps an unconstrained point to constrained parameter values.
    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    /// Random starting point; uniform on `(-2, 2)` per coordinate by default.
    fn initial_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Iterations per chain, warmup included.
    pub n_iter: usize,
    pub n_warmup: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub seed: u64,
    /// Share of post-warmup divergent transitions that aborts sampling.
    pub max_divergent_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 6,
            n_iter: 6000,
            n_warmup: 2000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 1,
            max_divergent_fraction: 0.25,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be positive".into()));
        }
        if self.n_warmup >= self.n_iter {
            return Err(Error::Config(format!(
                "n_warmup ({}) must be smaller than n_iter ({})",
                self.n_warmup, self.n_iter
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.max_treedepth == 0 {
            return Err(Error::Config("max_treedepth must be positive".into()));
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        self.n_iter - self.n_warmup
    }
}

/// Post-warmup draws of all chains in constrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub n_chains: usize,
    pub n_draws: usize,
    /// `values[chain][draw * n_params + param]`.
    pub values: Vec<Vec<f64>>,
    pub stats: Vec<Vec<TransitionStats>>,
    /// Adapted step size per chain.
    pub step_sizes: Vec<f64>,
}

impl PosteriorDraws {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Constrained parameter vector of one draw.
    pub fn draw(&self, chain: usize, i: usize) -> &[f64] {
        let p = self.n_params();
        &self.values[chain][i * p..(i + 1) * p]
    }

    /// Iterates over every draw of every chain, chain-major.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_chains).flat_map(move |c| (0..self.n_draws).map(move |i| self.draw(c, i)))
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    /// Per-chain traces of parameter `param`.
    pub fn chains_of(&self, param: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| (0..self.n_draws).map(|i| self.draw(c, i)[param]).collect())
            .collect()
    }

    /// All draws of `param`, chain-major.
    pub fn pooled(&self, param: usize) -> Vec<f64> {
        self.iter_draws().map(|d| d[param]).collect()
    }

    pub fn divergent_count(&self) -> usize {
        self.stats.iter().flatten().filter(|s| s.divergent).count()
    }

    pub fn summarize(&self) -> Vec<Summary> {
        (0..self.n_params())
            .map(|p| Summary::compute(&self.names[p], &self.chains_of(p)))
            .collect()
    }
}

fn initialize<M: LogDensity, R: Rng>(model: &M, rng: &mut R) -> Result<Point> {
    for _ in 0..100 {
        let q = model.initial_point(rng);
        if let Some(z) = Point::at(model, q) {
            return Ok(z);
        }
    }
    Err(Error::Sampler(
        "log density or gradient not finite at 100 random initial points".into(),
    ))
}

struct ChainOutput {
    draws: Vec<f64>,
    stats: Vec<TransitionStats>,
    step_size: f64,
}

fn run_chain<M: LogDensity>(model: &M, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = rng_from(derive_seed(config.seed, chain as u64));
    let dim = model.dim();
    let mut z = initialize(model, &mut rng)?;
    let mut inv_metric = vec![1.0; dim];

    let mut step = {
        let mut integ = Integrator { model, inv_metric: &inv_metric, step_size: 1.0 };
        integ.find_reasonable_step(&z, &mut rng);
        integ.step_size
    };
    let mut da = DualAveraging::new(config.target_accept, step);
    let mut windows = adapt::WindowedAdapter::new(dim, config.n_warmup);

    let n_params = model.param_names().len();
    let mut draws = Vec::with_capacity(config.n_kept() * n_params);
    let mut stats = Vec::with_capacity(config.n_kept());

    for iter in 0..config.n_iter {
        let integ = Integrator { model, inv_metric: &inv_metric, step_size: step };
        let (next, st) = integ.transition(&z, config.max_treedepth, &mut rng);
        z = next;
        if iter < config.n_warmup {
            step = da.update(st.accept_stat);
            if let Some(new_metric) = windows.observe(&z.q) {
                inv_metric = new_metric;
                let mut integ = Integrator { model, inv_metric: &inv_metric, step_size: step };
                integ.find_reasonable_step(&z, &mut rng);
                step = integ.step_size;
                da.restart(step);
            }
            if iter + 1 == config.n_warmup {
                step = da.final_step();
            }
        } else {
            draws.extend(model.constrain(&z.q));
            stats.push(st);
        }
    }
    Ok(ChainOutput { draws, stats, step_size: step })
}

/// Runs `config.n_chains` NUTS chains in parallel.
pub fn sample<M: LogDensity>(model: &M, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let outputs: Vec<ChainOutput> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(model, config, c))
        .collect::<Result<_>>()?;
    let names = model.param_names();
    let mut draws = PosteriorDraws {
        names,
        n_chains: config.n_chains,
        n_draws: config.n_kept(),
        values: Vec::with_capacity(config.n_chains),
        stats: Vec::with_capacity(config.n_chains),
        step_sizes: Vec::with_capacity(config.n_chains),
    };
    for out in outputs {
        draws.values.push(out.draws);
        draws.stats.push(out.stats);
        draws.step_sizes.push(out.step_size);
    }
    let n_div = draws.divergent_count();
    let frac = n_div as f64 / draws.total_draws() as f64;
    if frac > config.max_divergent_fraction {
        return Err(Error::Sampler(format!(
            "{n_div} of {} post-warmup transitions diverged ({:.1}%); step sizes {:?}",
            draws.total_draws(),
            100.0 * frac,
            draws.step_sizes
        )));
    }
    if n_div > 0 {
        log::warn!("{n_div} divergent transitions after warmup");
    }
    Ok(draws)
}
