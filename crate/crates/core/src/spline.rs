//! Equally spaced quadratic B-splines with knots at integer years.
//!
//! The knot grid runs from `start - 2` to `end + 2`, so every year of the
//! estimation window is covered by exactly three basis functions and the
//! basis forms a partition of unity on the whole window. This gives
//! `H = (end - start) + 2` basis functions.

use serde::{Deserialize, Serialize};

use crate::data::YearWindow;
use crate::error::{Error, Result};

const DEGREE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub window: YearWindow,
    pub knots: Vec<f64>,
    n_basis: usize,
    /// Row-major `[year][h]`.
    k_matrix: Vec<f64>,
}

impl SplineBasis {
    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn n_years(&self) -> usize {
        self.window.len()
    }

    /// Basis values `k_h(t)` at window year offset `t`.
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.k_matrix[t * self.n_basis..(t + 1) * self.n_basis]
    }

    pub fn k_matrix(&self) -> &[f64] {
        &self.k_matrix
    }

    /// Evaluates every basis function at a (possibly fractional) year.
    pub fn evaluate(&self, year: f64) -> Vec<f64> {
        (0..self.n_basis).map(|h| cox_de_boor(&self.knots, h, DEGREE, year)).collect()
    }

    /// First-difference operator, `(H-1) x H`, row-major.
    pub fn difference_matrix(&self) -> Vec<Vec<f64>> {
        let h = self.n_basis;
        (1..h)
            .map(|r| {
                let mut row = vec![0.0; h];
                row[r] = 1.0;
                row[r - 1] = -1.0;
                row
            })
            .collect()
    }
}

/// Builds the basis for the inclusive year range `[start, end]`.
pub fn build_basis(start: i32, end: i32) -> Result<SplineBasis> {
    if end <= start {
        return Err(Error::Precondition(format!(
            "spline window {start}-{end} is shorter than two years"
        )));
    }
    let window = YearWindow { start, end };
    let knots: Vec<f64> = ((start - DEGREE as i32)..=(end + DEGREE as i32)).map(f64::from).collect();
    let n_basis = knots.len() - DEGREE - 1;
    debug_assert_eq!(n_basis, (end - start) as usize + 2);
    let mut k_matrix = Vec::with_capacity(window.len() * n_basis);
    for year in window.years() {
        for h in 0..n_basis {
            k_matrix.push(cox_de_boor(&knots, h, DEGREE, f64::from(year)));
        }
    }
    Ok(SplineBasis { window, knots, n_basis, k_matrix })
}

/// Cox–de Boor recursion for basis `i` of degree `p`, using half-open
/// support intervals.
fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let left = knots[i + p] - knots[i];
    if left > 0.0 {
        v += (x - knots[i]) / left * cox_de_boor(knots, i, p - 1, x);
    }
    let right = knots[i + p + 1] - knots[i + 1];
    if right > 0.0 {
        v += (knots[i + p + 1] - x) / right * cox_de_boor(knots, i + 1, p - 1, x);
    }
    v
}

/// `delta_{c,t} = sum_h k_h(t) alpha_h` at window offset `t`.
pub fn smoother_value(alpha: &[f64], basis: &SplineBasis, t: usize) -> Result<f64> {
    if alpha.len() != basis.n_basis() {
        return Err(Error::Precondition(format!(
            "expected {} spline coefficients, got {}",
            basis.n_basis(),
            alpha.len()
        )));
    }
    if t >= basis.n_years() {
        return Err(Error::Precondition(format!("year offset {t} outside the basis window")));
    }
    Ok(basis.row(t).iter().zip(alpha).map(|(k, a)| k * a).sum())
}
