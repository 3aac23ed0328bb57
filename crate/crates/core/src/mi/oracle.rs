//! Reference mutual-information values for testing the estimator.

use crate::diff::exact_sum;
use crate::error::{Error, Result};

/// Exact MI of `d` independent coordinate pairs, each a standard bivariate
/// Gaussian with correlation `rho`: `-(d/2) ln(1 - rho^2)`.
pub fn gaussian_mi_oracle(rho: f64, d: usize) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|rho| must be < 1, got {rho}")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    Ok(-0.5 * d as f64 * (1.0 - rho * rho).ln())
}

/// Cell-centred evaluation grid over `[lo, hi]^2` with `n x n` cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2d {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid2d {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn centre(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.step()
    }
}

/// Riemann-sum MI of a 2-D joint density. Marginals are row and column sums
/// of the discretized joint.
pub fn numeric_mi_oracle<F>(density: F, grid: Grid2d) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    if grid.n == 0 || !(grid.hi > grid.lo) {
        return Err(Error::InvalidArgument(format!("bad grid {grid:?}")));
    }
    let n = grid.n;
    let cell = grid.step() * grid.step();
    let mut p = Vec::with_capacity(n * n);
    for i in 0..n {
        let x = grid.centre(i);
        for j in 0..n {
            let v = density(x, grid.centre(j));
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("density {v} at ({x}, {})", grid.centre(j))));
            }
            p.push(v * cell);
        }
    }
    let total = exact_sum(p.iter().copied());
    if (total - 1.0).abs() > 1e-3 {
        return Err(Error::Degenerate(format!(
            "grid mass {total} is not within 1e-3 of 1; refine or widen the grid"
        )));
    }
    p.iter_mut().for_each(|v| *v /= total);
    let px: Vec<f64> = (0..n).map(|i| exact_sum(p[i * n..(i + 1) * n].iter().copied())).collect();
    let py: Vec<f64> = (0..n).map(|j| exact_sum((0..n).map(|i| p[i * n + j]))).collect();
    let terms = (0..n).flat_map(|i| {
        let (p, px, py) = (&p, &px, &py);
        (0..n).filter_map(move |j| {
            let v = p[i * n + j];
            (v > 0.0).then(|| v * (v / (px[i] * py[j])).ln())
        })
    });
    Ok(exact_sum(terms))
}
