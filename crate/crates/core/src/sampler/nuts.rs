//! One NUTS transition: multinomial sampling over the trajectory, biased
//! progressive sampling between doublings, and the generalized no-U-turn
//! criterion checked across merged subtrees.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn at<M: LogDensity>(model: &M, q: Vec<f64>) -> Option<Point> {
        let mut grad = vec![0.0; q.len()];
        let logp = model.log_density_and_grad(&q, &mut grad).ok()?;
        (logp.is_finite() && grad.iter().all(|g| g.is_finite())).then(|| Point {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TransitionStats {
    pub step_size: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub accept_stat: f64,
    pub energy: f64,
    pub logp: f64,
}

pub(crate) struct Integrator<'a, M> {
    pub model: &'a M,
    pub inv_metric: &'a [f64],
    pub step_size: f64,
}

impl<M: LogDensity> Integrator<'_, M> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    pub fn hamiltonian(&self, z: &Point) -> f64 {
        -z.logp + self.kinetic(&z.p)
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(self.inv_metric).map(|(p, m)| p * m).collect()
    }

    pub fn sample_momentum<R: Rng>(&self, z: &mut Point, rng: &mut R) {
        for (p, m) in z.p.iter_mut().zip(self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    /// Leapfrog step in place. Returns false when the density cannot be
    /// evaluated at the new position.
    pub fn leapfrog(&self, z: &mut Point, eps: f64) -> bool {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(self.inv_metric) {
            *q += eps * m * p;
        }
        match self.model.log_density_and_grad(&z.q, &mut z.grad) {
            Ok(lp) if lp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => {
                z.logp = lp;
                for (p, g) in z.p.iter_mut().zip(&z.grad) {
                    *p += 0.5 * eps * g;
                }
                true
            }
            _ => {
                z.logp = f64::NEG_INFINITY;
                false
            }
        }
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct TreeState {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
    h0: f64,
}

/// Edge momenta of a subtree: `(p_beg, p_sharp_beg, p_end, p_sharp_end)`.
struct Edges {
    p_beg: Vec<f64>,
    ps_beg: Vec<f64>,
    p_end: Vec<f64>,
    ps_end: Vec<f64>,
}

impl<M: LogDensity> Integrator<'_, M> {
    /// Extends the trajectory from `z` by `2^depth` leapfrog steps in
    /// direction `sign`. Returns `None` when the subtree is invalid
    /// (divergence or U-turn); otherwise the proposal, edges, summed
    /// momentum and log weight of the subtree.
    fn build_tree<R: Rng>(
        &self,
        depth: usize,
        z: &mut Point,
        sign: f64,
        st: &mut TreeState,
        rng: &mut R,
    ) -> Option<(Point, Edges, Vec<f64>, f64)> {
        if depth == 0 {
            let ok = self.leapfrog(z, sign * self.step_size);
            st.n_leapfrog += 1;
            let h = if ok { self.hamiltonian(z) } else { f64::INFINITY };
            let h = if h.is_nan() { f64::INFINITY } else { h };
            if h - st.h0 > MAX_DELTA_H {
                st.divergent = true;
            }
            let log_w = st.h0 - h;
            st.sum_metro_prob += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            if st.divergent {
                return None;
            }
            let ps = self.p_sharp(&z.p);
            let edges = Edges { p_beg: z.p.clone(), ps_beg: ps.clone(), p_end: z.p.clone(), ps_end: ps };
            return Some((z.clone(), edges, z.p.clone(), log_w));
        }

        let (prop_init, e_init, rho_init, lw_init) = self.build_tree(depth - 1, z, sign, st, rng)?;
        let (prop_final, e_final, rho_final, lw_final) = self.build_tree(depth - 1, z, sign, st, rng)?;

        let lw_subtree = log_sum_exp(lw_init, lw_final);
        let proposal = if lw_final > lw_subtree || rng.random::<f64>() < (lw_final - lw_subtree).exp() {
            prop_final
        } else {
            prop_init
        };

        let rho = add(&rho_init, &rho_final);
        let mut persist = no_u_turn(&e_init.ps_beg, &e_final.ps_end, &rho);
        persist &= no_u_turn(&e_init.ps_beg, &e_final.ps_beg, &add(&rho_init, &e_final.p_beg));
        persist &= no_u_turn(&e_init.ps_end, &e_final.ps_end, &add(&rho_final, &e_init.p_end));
        if !persist {
            return None;
        }
        let edges = Edges {
            p_beg: e_init.p_beg,
            ps_beg: e_init.ps_beg,
            p_end: e_final.p_end,
            ps_end: e_final.ps_end,
        };
        Some((proposal, edges, rho, lw_subtree))
    }

    /// Runs one transition starting at `z0` (momentum is resampled).
    pub fn transition<R: Rng>(&self, z0: &Point, max_depth: usize, rng: &mut R) -> (Point, TransitionStats) {
        let mut z = z0.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut sample = z.clone();
        let ps0 = self.p_sharp(&z.p);
        // Outer edges of the whole trajectory.
        let mut edges = Edges { p_beg: z.p.clone(), ps_beg: ps0.clone(), p_end: z.p.clone(), ps_end: ps0 };
        let mut rho = z.p.clone();
        let mut log_sum_w = 0.0;
        let mut st = TreeState { n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false, h0 };
        let mut depth = 0;

        while depth < max_depth {
            let forward = rng.random::<f64>() > 0.5;
            let built = if forward {
                self.build_tree(depth, &mut z_fwd, 1.0, &mut st, rng)
            } else {
                self.build_tree(depth, &mut z_bck, -1.0, &mut st, rng)
            };
            let Some((proposal, sub, rho_sub, lw_sub)) = built else { break };
            depth += 1;

            if lw_sub > log_sum_w || rng.random::<f64>() < (lw_sub - log_sum_w).exp() {
                sample = proposal;
            }
            log_sum_w = log_sum_exp(log_sum_w, lw_sub);

            // Orient the old trajectory and the new subtree backward to forward.
            // A backward subtree starts next to the old trajectory.
            let (bck, fwd, rho_bck, rho_fwd) = if forward {
                (edges, sub, rho.clone(), rho_sub)
            } else {
                let flipped = Edges { p_beg: sub.p_end, ps_beg: sub.ps_end, p_end: sub.p_beg, ps_end: sub.ps_beg };
                (flipped, edges, rho_sub, rho.clone())
            };
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&bck.ps_beg, &fwd.ps_end, &rho);
            persist &= no_u_turn(&bck.ps_beg, &fwd.ps_beg, &add(&rho_bck, &fwd.p_beg));
            persist &= no_u_turn(&bck.ps_end, &fwd.ps_end, &add(&rho_fwd, &bck.p_end));
            edges = Edges { p_beg: bck.p_beg, ps_beg: bck.ps_beg, p_end: fwd.p_end, ps_end: fwd.ps_end };
            if !persist {
                break;
            }
        }

        let stats = TransitionStats {
            step_size: self.step_size,
            tree_depth: depth,
            n_leapfrog: st.n_leapfrog,
            divergent: st.divergent,
            accept_stat: if st.n_leapfrog > 0 { st.sum_metro_prob / st.n_leapfrog as f64 } else { 0.0 },
            energy: self.hamiltonian(&sample),
            logp: sample.logp,
        };
        (sample, stats)
    }

    /// Doubles or halves the step size until a single leapfrog step has an
    /// acceptance probability near 0.8.
    pub fn find_reasonable_step<R: Rng>(&mut self, z0: &Point, rng: &mut R) {
        let log_target = 0.8f64.ln();
        let delta = |this: &Self, rng: &mut R| -> f64 {
            let mut z = z0.clone();
            this.sample_momentum(&mut z, rng);
            let h0 = this.hamiltonian(&z);
            if !this.leapfrog(&mut z, this.step_size) {
                return f64::NEG_INFINITY;
            }
            let d = h0 - this.hamiltonian(&z);
            if d.is_nan() { f64::NEG_INFINITY } else { d }
        };
        let direction = if delta(self, rng) > log_target { 1.0 } else { -1.0 };
        for _ in 0..100 {
            let d = delta(self, rng);
            if direction > 0.0 && d <= log_target {
                break;
            }
            if direction < 0.0 && d >= log_target {
                break;
            }
            self.step_size = if direction > 0.0 { self.step_size * 2.0 } else { self.step_size * 0.5 };
            if !(self.step_size > 1e-12 && self.step_size < 1e7) {
                self.step_size = self.step_size.clamp(1e-12, 1e7);
                break;
            }
        }
    }
}
