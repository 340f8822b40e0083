use sbr_core::sampler::io::{read_draws, write_draws};
use sbr_core::sampler::{sample, LogDensity, SamplerConfig};
use sbr_core::Result;

struct StdNormal(usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().zip(x).for_each(|(g, v)| *g = -v);
        Ok(-0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }
}

/// Neal's funnel: `v ~ N(0, 3)`, `x | v ~ N(0, exp(v / 2))`.
struct Funnel;

impl LogDensity for Funnel {
    fn dim(&self) -> usize {
        10
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let v = x[0];
        let mut lp = -v * v / 18.0;
        grad[0] = -v / 9.0;
        for i in 1..10 {
            let e = (-v).exp();
            lp += -0.5 * x[i] * x[i] * e - 0.5 * v;
            grad[i] = -x[i] * e;
            grad[0] += 0.5 * x[i] * x[i] * e - 0.5;
        }
        Ok(lp)
    }
}

/// Log-normal on the positive axis, sampled through `log x`.
struct LogNormal;

impl LogDensity for LogNormal {
    fn dim(&self) -> usize {
        1
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad[0] = -x[0];
        Ok(-0.5 * x[0] * x[0])
    }

    fn param_names(&self) -> Vec<String> {
        vec!["x".into()]
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0].exp()]
    }
}

fn cfg(seed: u64) -> SamplerConfig {
    SamplerConfig { n_chains: 3, n_iter: 1500, n_warmup: 500, seed, ..SamplerConfig::default() }
}

#[test]
fn same_seed_same_draws_and_file_round_trip() {
    let a = sample(&StdNormal(3), &cfg(4)).unwrap();
    let b = sample(&StdNormal(3), &cfg(4)).unwrap();
    assert_eq!(a, b);
    let c = sample(&StdNormal(3), &cfg(5)).unwrap();
    assert_ne!(a, c);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_draws(&path, &a).unwrap();
    let back = read_draws(&path).unwrap();
    assert_eq!((back.names, back.n_chains, back.n_draws), (a.names.clone(), a.n_chains, a.n_draws));
    assert_eq!(back.values, a.values);
    assert_eq!(back.step_sizes, a.step_sizes);
}

#[test]
fn draws_are_reported_on_the_constrained_scale() {
    let d = sample(&LogNormal, &cfg(6)).unwrap();
    let x = d.pooled(d.index_of("x").unwrap());
    assert!(x.iter().all(|v| *v > 0.0));
    let mut logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    logs.sort_by(f64::total_cmp);
    let med = logs[logs.len() / 2];
    assert!(med.abs() < 0.1, "{med}");
}

#[test]
fn funnel_divergences_trip_the_limit() {
    let strict = SamplerConfig { max_divergent_fraction: 0.0, ..cfg(7) };
    let err = sample(&Funnel, &strict).unwrap_err().to_string();
    assert!(err.contains("diverg"), "{err}");
}

#[test]
fn chains_pass_convergence_checks() {
    let d = sample(&StdNormal(5), &cfg(8)).unwrap();
    assert_eq!(d.total_draws(), 3 * 1000);
    for s in d.summarize() {
        assert!(s.rhat < 1.01, "{s:?}");
        assert!(s.ess_bulk > 1000.0, "{s:?}");
        assert!(s.mean.abs() < 0.1, "{s:?}");
    }
}
