//! One-dimensional grid quadrature used as an exact oracle.

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + h * i as f64).collect()
}

/// Trapezoid rule for samples `ys` on the (possibly non-uniform) grid `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

fn check_grid(grid: &[f64], min_points: usize) -> Result<()> {
    if grid.len() < min_points {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least {min_points} points, got {}",
            grid.len()
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Trapezoid-weighted `log ∫ exp(log_density(x)) dx`, computed in log space.
pub fn grid_log_normalizer(log_density: impl Fn(f64) -> f64, grid: &[f64]) -> Result<f64> {
    check_grid(grid, 2)?;
    let logs: Vec<f64> = grid.iter().map(|&x| log_density(x)).collect();
    log_trapezoid(grid, &logs)
}

fn log_trapezoid(grid: &[f64], logs: &[f64]) -> Result<f64> {
    let n = grid.len();
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let lo = if i > 0 { grid[i] - grid[i - 1] } else { 0.0 };
            let hi = if i + 1 < n { grid[i + 1] - grid[i] } else { 0.0 };
            logs[i] + (0.5 * (lo + hi)).ln()
        })
        .collect();
    let z = log_sum_exp(&terms);
    if z == f64::NEG_INFINITY || z.is_nan() {
        return Err(Error::InvalidArgument("density is zero on the whole grid".into()));
    }
    Ok(z)
}

/// Density values on `grid` normalized so their trapezoid integral is one.
pub fn grid_posterior_1d(
    unnormalized_log_density: impl Fn(f64) -> f64,
    grid: &[f64],
) -> Result<Vec<f64>> {
    check_grid(grid, 100)?;
    let logs: Vec<f64> = grid.iter().map(|&x| unnormalized_log_density(x)).collect();
    let z = log_trapezoid(grid, &logs)?;
    Ok(logs.iter().map(|l| (l - z).exp()).collect())
}
