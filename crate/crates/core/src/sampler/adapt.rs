//! Warmup adaptation: dual-averaging step size and a windowed diagonal
//! metric estimate.

/// Nesterov dual averaging on `log(step_size)`.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(target: f64, initial_step: f64) -> Self {
        DualAveraging {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: (10.0 * initial_step).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let a = if accept_stat.is_finite() { accept_stat.min(1.0) } else { 0.0 };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Step size to use after warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|s| s / (self.n - 1.0)).collect()
    }
}

/// Stan-style warmup schedule: a fast initial buffer, a sequence of
/// doubling slow windows for metric estimation, and a fast terminal buffer.
#[derive(Debug, Clone)]
pub struct WindowedAdapter {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    window_end: usize,
    counter: usize,
    estimator: Welford,
}

impl WindowedAdapter {
    pub fn new(dim: usize, n_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (75usize, 50usize, 25usize);
        if init_buffer + base_window + term_buffer > n_warmup {
            init_buffer = (0.15 * n_warmup as f64) as usize;
            term_buffer = (0.1 * n_warmup as f64) as usize;
            base_window = n_warmup.saturating_sub(init_buffer + term_buffer);
        }
        WindowedAdapter {
            n_warmup,
            init_buffer,
            term_buffer,
            window_size: base_window,
            window_end: init_buffer + base_window,
            counter: 0,
            estimator: Welford::new(dim),
        }
    }

    fn in_slow_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.n_warmup.saturating_sub(self.term_buffer)
            && self.counter < self.n_warmup
    }

    /// Records a warmup draw. Returns a new inverse metric when a slow
    /// window closes.
    pub fn observe(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        if self.window_size == 0 {
            self.counter += 1;
            return None;
        }
        let mut update = None;
        if self.in_slow_window() {
            self.estimator.add(x);
            if self.counter + 1 == self.window_end {
                let n = self.estimator.n;
                let var = self.estimator.variance();
                let inv_metric = var
                    .iter()
                    .map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0)))
                    .collect();
                update = Some(inv_metric);
                self.estimator = Welford::new(x.len());
                self.window_size *= 2;
                let next_end = self.window_end + self.window_size;
                let slow_end = self.n_warmup - self.term_buffer;
                self.window_end = if next_end + 2 * self.window_size >= slow_end {
                    slow_end
                } else {
                    next_end
                };
                if self.window_end <= self.counter + 1 {
                    self.window_size = 0;
                }
            }
        }
        self.counter += 1;
        update
    }
}
