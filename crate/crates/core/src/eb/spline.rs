//! Natural cubic spline basis over a fixed grid.
//!
//! Standard truncated-power construction with the natural (linear-beyond-
//! boundary) constraints: for knots k_1 < ... < k_K the basis is
//! `[x, d_1 - d_{K-1}, ..., d_{K-2} - d_{K-1}]` where
//! `d_m(x) = [(x - k_m)^3_+ - (x - k_K)^3_+] / (k_K - k_m)`,
//! giving `p = K - 1` columns. Columns are centered and scaled to unit
//! standard deviation over the grid for conditioning; the downstream
//! exponential-family model is invariant to such affine changes of basis.

use nalgebra::DMatrix;

use crate::{Error, Result};

fn pos_cube(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Evaluate the p-column natural cubic spline basis on `grid`, with p+1
/// equally spaced knots spanning the grid.
pub fn natural_cubic_basis(grid: &[f64], p: usize) -> Result<DMatrix<f64>> {
    if p < 2 {
        return Err(Error::InvalidInput(format!(
            "spline basis needs at least 2 columns, got {p}"
        )));
    }
    let n = grid.len();
    if n < p + 1 {
        return Err(Error::InvalidInput(format!(
            "grid of {n} points cannot support {p} basis columns"
        )));
    }
    let lo = grid[0];
    let hi = grid[n - 1];
    if !(hi > lo) {
        return Err(Error::InvalidInput("grid must be increasing".into()));
    }
    let k = p + 1;
    let knots: Vec<f64> = (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
        .collect();

    let d = |m: usize, x: f64| -> f64 {
        (pos_cube(x - knots[m]) - pos_cube(x - knots[k - 1])) / (knots[k - 1] - knots[m])
    };

    let mut q = DMatrix::<f64>::zeros(n, p);
    for (i, &x) in grid.iter().enumerate() {
        q[(i, 0)] = x;
        for m in 0..k.saturating_sub(2) {
            q[(i, m + 1)] = d(m, x) - d(k - 2, x);
        }
    }

    // Center and scale each column over the grid.
    let nf = n as f64;
    for c in 0..p {
        let mean = q.column(c).sum() / nf;
        let mut var = 0.0;
        for i in 0..n {
            q[(i, c)] -= mean;
            var += q[(i, c)] * q[(i, c)];
        }
        let sd = (var / nf).sqrt();
        if sd > 0.0 {
            for i in 0..n {
                q[(i, c)] /= sd;
            }
        }
    }
    Ok(q)
}
