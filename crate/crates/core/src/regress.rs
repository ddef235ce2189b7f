//! Least-squares engine with multi-way fixed-effect absorption and
//! cluster-robust covariance.
//!
//! Fixed effects are absorbed by alternating within-group demeaning
//! (weighted when row weights are supplied), so the coefficient solve only
//! ever sees the low-dimensional common-covariate block. Cluster-robust
//! covariances are the usual sandwich with cluster-summed scores; two-way
//! clustering uses inclusion-exclusion over the two partitions and their
//! intersection, with negative eigenvalues of the combined matrix truncated
//! at zero.

use std::collections::BTreeMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::{Error, Result};

/// One regressor column.
#[derive(Debug, Clone)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column { name: name.into(), values }
    }
}

/// A categorical dimension to absorb, as dense level codes per row.
#[derive(Debug, Clone)]
pub struct FixedDim {
    pub name: String,
    pub levels: Vec<u32>,
}

impl FixedDim {
    pub fn new(name: impl Into<String>, levels: Vec<u32>) -> Self {
        FixedDim { name: name.into(), levels }
    }

    fn n_levels(&self) -> usize {
        self.levels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }
}

/// Clustering request for the covariance.
#[derive(Debug, Clone)]
pub enum ClusterSpec {
    /// Homoskedastic classical covariance.
    None,
    /// Heteroskedasticity-robust (each row its own cluster).
    Robust,
    OneWay(Vec<u32>),
    TwoWay(Vec<u32>, Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Convergence threshold on the largest within-group mean, relative to
    /// column scale.
    pub demean_tol: f64,
    pub max_sweeps: usize,
    /// Relative tolerance below which a demeaned column counts as absorbed
    /// or collinear.
    pub collinearity_tol: f64,
    /// Apply the G/(G-1) x (N-1)/(N-K) small-cluster correction.
    pub df_correction: bool,
    /// Error out (instead of dropping with a notice) when a requested
    /// regressor is collinear.
    pub error_on_collinear: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            demean_tol: 1e-10,
            max_sweeps: 1000,
            collinearity_tol: 1e-10,
            df_correction: true,
            error_on_collinear: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub coefficients: Vec<Coefficient>,
    /// Covariance of the kept coefficients, same order as `coefficients`.
    pub vcov: DMatrix<f64>,
    /// Names of columns dropped as absorbed or collinear.
    pub dropped: Vec<String>,
    pub n: usize,
    /// Kept regressors plus absorbed fixed-effect parameters.
    pub k_total: usize,
    pub absorbed_df: usize,
    /// Cluster counts per clustering dimension actually used.
    pub n_clusters: Vec<usize>,
    pub r2_within: f64,
    pub residuals: Vec<f64>,
    pub notices: Vec<String>,
    /// Two-way covariance needed an eigenvalue floor at zero.
    pub psd_repaired: bool,
    pub sweeps_used: usize,
}

impl Fit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Map arbitrary keys to dense 0-based codes in sorted key order.
pub fn dense_codes<T: Ord + Hash + Clone>(keys: &[T]) -> Vec<u32> {
    let mut map = BTreeMap::new();
    for k in keys {
        let next = map.len() as u32;
        map.entry(k.clone()).or_insert(next);
    }
    keys.iter().map(|k| map[k]).collect()
}

/// Weighted least squares of `y` on `columns` after absorbing `fixed`.
pub fn fit(
    y: &[f64],
    columns: &[Column],
    weights: Option<&[f64]>,
    fixed: &[FixedDim],
    cluster: &ClusterSpec,
    opts: &FitOptions,
) -> Result<Fit> {
    let n = y.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty design".into()));
    }
    for c in columns {
        if c.values.len() != n {
            return Err(Error::InvalidInput(format!(
                "column {} has {} rows, expected {n}",
                c.name,
                c.values.len()
            )));
        }
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::InvalidInput("weights length mismatch".into()));
        }
        if w.iter().any(|&wi| !(wi > 0.0) || !wi.is_finite()) {
            return Err(Error::InvalidInput("weights must be positive and finite".into()));
        }
    }

    let mut notices = Vec::new();

    // Drop single-level dimensions: they are just an intercept.
    let mut used_dims: Vec<&FixedDim> = Vec::new();
    let mut saw_single_level = false;
    for d in fixed {
        if d.levels.len() != n {
            return Err(Error::InvalidInput(format!(
                "fixed-effect dimension {} has {} rows, expected {n}",
                d.name,
                d.levels.len()
            )));
        }
        if d.n_levels() <= 1 {
            notices.push(format!("fixed-effect dimension {} has a single level; dropped", d.name));
            saw_single_level = true;
        } else {
            used_dims.push(d);
        }
    }

    // Assemble the working matrix: y then the requested columns.
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(columns.len() + 1);
    data.push(y.to_vec());
    for c in columns {
        data.push(c.values.clone());
    }
    let scales: Vec<f64> = data
        .iter()
        .map(|col| col.iter().fold(1.0f64, |a, &v| a.max(v.abs())))
        .collect();

    // Absorb fixed effects; an intercept is implicitly absorbed alongside,
    // including when only a single-level dimension was requested.
    let groups: Vec<Vec<Vec<u32>>> = used_dims.iter().map(|d| level_rows(d)).collect();
    let sweeps_used = if !used_dims.is_empty() || saw_single_level {
        demean(&mut data, weights, &groups, &scales, opts)?
    } else {
        0
    };

    let absorbed_df = if used_dims.is_empty() {
        usize::from(saw_single_level)
    } else {
        1 + groups.iter().map(|g| g.len() - 1).sum::<usize>()
    };

    let w_all = |i: usize| weights.map_or(1.0, |w| w[i]);

    // Collinearity pass over the demeaned columns (modified Gram-Schmidt in
    // the weighted inner product).
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let v = &data[j + 1];
        let pre_norm2: f64 = (0..n).map(|i| w_all(i) * col.values[i] * col.values[i]).sum();
        let post_norm2: f64 = (0..n).map(|i| w_all(i) * v[i] * v[i]).sum();
        let tol2 = opts.collinearity_tol * opts.collinearity_tol;
        if post_norm2 <= tol2 * pre_norm2.max(f64::MIN_POSITIVE) {
            dropped.push(col.name.clone());
            notices.push(format!("column {} absorbed by fixed effects; dropped", col.name));
            continue;
        }
        let mut resid = v.clone();
        for b in &basis {
            let dot: f64 = (0..n).map(|i| w_all(i) * resid[i] * b[i]).sum();
            let bb: f64 = (0..n).map(|i| w_all(i) * b[i] * b[i]).sum();
            let coef = dot / bb;
            for i in 0..n {
                resid[i] -= coef * b[i];
            }
        }
        let resid_norm2: f64 = (0..n).map(|i| w_all(i) * resid[i] * resid[i]).sum();
        if resid_norm2 <= tol2.max(1e-24) * post_norm2 {
            if opts.error_on_collinear {
                return Err(Error::Collinear(vec![col.name.clone()]));
            }
            dropped.push(col.name.clone());
            notices.push(format!("column {} is collinear; dropped", col.name));
            continue;
        }
        kept.push(j);
        basis.push(resid);
    }

    if kept.is_empty() {
        return Err(Error::InvalidInput(
            "no regressors survive absorption and collinearity checks".into(),
        ));
    }
    let p = kept.len();

    // Normal equations on the kept, demeaned columns.
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for (a, &ja) in kept.iter().enumerate() {
        let xa = &data[ja + 1];
        for (b, &jb) in kept.iter().enumerate().skip(a) {
            let xb = &data[jb + 1];
            let s: f64 = (0..n).map(|i| w_all(i) * xa[i] * xb[i]).sum();
            xtx[(a, b)] = s;
            xtx[(b, a)] = s;
        }
        xty[a] = (0..n).map(|i| w_all(i) * xa[i] * data[0][i]).sum();
    }
    let chol = nalgebra::Cholesky::new(xtx.clone()).ok_or_else(|| {
        Error::Collinear(kept.iter().map(|&j| columns[j].name.clone()).collect())
    })?;
    let beta = chol.solve(&xty);
    let xtx_inv = chol.inverse();

    // Residuals on the demeaned scale (identical to full-model residuals).
    let mut residuals = data[0].clone();
    for (a, &ja) in kept.iter().enumerate() {
        let xa = &data[ja + 1];
        let b = beta[a];
        for i in 0..n {
            residuals[i] -= b * xa[i];
        }
    }

    let tss: f64 = (0..n).map(|i| w_all(i) * data[0][i] * data[0][i]).sum();
    let rss: f64 = (0..n).map(|i| w_all(i) * residuals[i] * residuals[i]).sum();
    let r2_within = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };

    let k_total = p + absorbed_df;

    // Covariance.
    let xcols: Vec<&Vec<f64>> = kept.iter().map(|&j| &data[j + 1]).collect();
    let mut psd_repaired = false;
    let mut n_clusters = Vec::new();
    let vcov = match cluster {
        ClusterSpec::None => {
            let dof = n.saturating_sub(k_total).max(1) as f64;
            let sigma2 = rss / dof;
            &xtx_inv * sigma2
        }
        ClusterSpec::Robust => {
            let codes: Vec<u32> = (0..n as u32).collect();
            n_clusters.push(n);
            sandwich(&xcols, &residuals, weights, &xtx_inv, &codes, n, k_total, opts)
        }
        ClusterSpec::OneWay(codes) => {
            if codes.len() != n {
                return Err(Error::InvalidInput("cluster codes length mismatch".into()));
            }
            let g = count_levels(codes);
            n_clusters.push(g);
            if g < p {
                notices.push(format!(
                    "only {g} clusters for {p} parameters; covariance may be rank-deficient"
                ));
            }
            sandwich(&xcols, &residuals, weights, &xtx_inv, codes, n, k_total, opts)
        }
        ClusterSpec::TwoWay(c1, c2) => {
            if c1.len() != n || c2.len() != n {
                return Err(Error::InvalidInput("cluster codes length mismatch".into()));
            }
            let g1 = count_levels(c1);
            let g2 = count_levels(c2);
            n_clusters.push(g1);
            n_clusters.push(g2);
            let inter = intersection_codes(c1, c2);
            let v1 = sandwich(&xcols, &residuals, weights, &xtx_inv, c1, n, k_total, opts);
            let v2 = sandwich(&xcols, &residuals, weights, &xtx_inv, c2, n, k_total, opts);
            let v12 = sandwich(&xcols, &residuals, weights, &xtx_inv, &inter, n, k_total, opts);
            let combined = v1 + v2 - v12;
            let (repaired, flag) = repair_psd(combined);
            psd_repaired = flag;
            if flag {
                notices.push("two-way covariance had negative eigenvalues; floored at zero".into());
            }
            repaired
        }
    };

    let coefficients = kept
        .iter()
        .enumerate()
        .map(|(a, &j)| Coefficient {
            name: columns[j].name.clone(),
            estimate: beta[a],
            se: vcov[(a, a)].max(0.0).sqrt(),
        })
        .collect();

    Ok(Fit {
        coefficients,
        vcov,
        dropped,
        n,
        k_total,
        absorbed_df,
        n_clusters,
        r2_within,
        residuals,
        notices,
        psd_repaired,
        sweeps_used,
    })
}

fn level_rows(dim: &FixedDim) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); dim.n_levels()];
    for (i, &lvl) in dim.levels.iter().enumerate() {
        rows[lvl as usize].push(i as u32);
    }
    rows
}

fn count_levels(codes: &[u32]) -> usize {
    codes.iter().copied().max().map_or(0, |m| m as usize + 1)
}

/// Combine two cluster partitions into their intersection partition.
pub fn intersection_codes(c1: &[u32], c2: &[u32]) -> Vec<u32> {
    let pairs: Vec<(u32, u32)> = c1.iter().copied().zip(c2.iter().copied()).collect();
    dense_codes(&pairs)
}

/// Alternating within-group demeaning of every column in `data`.
///
/// Converges when the largest weighted within-group mean, relative to each
/// column's original scale, falls below `opts.demean_tol`; two polish sweeps
/// then tighten the result toward machine precision.
fn demean(
    data: &mut [Vec<f64>],
    weights: Option<&[f64]>,
    groups: &[Vec<Vec<u32>>],
    scales: &[f64],
    opts: &FitOptions,
) -> Result<usize> {
    if groups.is_empty() {
        // Single-level case: plain weighted centering.
        for (col, &scale) in data.iter_mut().zip(scales) {
            let _ = scale;
            center(col, weights);
        }
        return Ok(1);
    }
    let mut sweeps = 0usize;
    let mut polish = 0usize;
    loop {
        sweeps += 1;
        if sweeps > opts.max_sweeps {
            let residual = max_group_mean(data, weights, groups, scales);
            return Err(Error::DemeaningDiverged { residual, sweeps: sweeps - 1 });
        }
        data.par_iter_mut().enumerate().for_each(|(j, col)| {
            let _ = j;
            for dim in groups {
                subtract_group_means(col, weights, dim);
            }
        });
        if groups.len() == 1 {
            break;
        }
        let worst = max_group_mean(data, weights, groups, scales);
        if worst < opts.demean_tol {
            polish += 1;
            if polish > 2 {
                break;
            }
        }
    }
    Ok(sweeps)
}

fn center(col: &mut [f64], weights: Option<&[f64]>) {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, v) in col.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        num += w * v;
        den += w;
    }
    let mean = num / den;
    for v in col.iter_mut() {
        *v -= mean;
    }
}

fn subtract_group_means(col: &mut [f64], weights: Option<&[f64]>, dim: &[Vec<u32>]) {
    for rows in dim {
        if rows.is_empty() {
            continue;
        }
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &i in rows {
            let w = weights.map_or(1.0, |w| w[i as usize]);
            num += w * col[i as usize];
            den += w;
        }
        let mean = num / den;
        for &i in rows {
            col[i as usize] -= mean;
        }
    }
}

fn max_group_mean(
    data: &[Vec<f64>],
    weights: Option<&[f64]>,
    groups: &[Vec<Vec<u32>>],
    scales: &[f64],
) -> f64 {
    let mut worst = 0.0f64;
    for (col, &scale) in data.iter().zip(scales) {
        for dim in groups {
            for rows in dim {
                if rows.is_empty() {
                    continue;
                }
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for &i in rows {
                    let w = weights.map_or(1.0, |w| w[i as usize]);
                    num += w * col[i as usize];
                    den += w;
                }
                worst = worst.max((num / den).abs() / scale);
            }
        }
    }
    worst
}

/// One-way cluster sandwich for the kept-column block.
#[allow(clippy::too_many_arguments)]
fn sandwich(
    xcols: &[&Vec<f64>],
    residuals: &[f64],
    weights: Option<&[f64]>,
    xtx_inv: &DMatrix<f64>,
    codes: &[u32],
    n: usize,
    k_total: usize,
    opts: &FitOptions,
) -> DMatrix<f64> {
    let p = xcols.len();
    let g = count_levels(codes);
    let mut scores = vec![0.0f64; g * p];
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let we = w * residuals[i];
        let row = codes[i] as usize * p;
        for (a, x) in xcols.iter().enumerate() {
            scores[row + a] += we * x[i];
        }
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for gi in 0..g {
        let s = &scores[gi * p..(gi + 1) * p];
        for a in 0..p {
            for b in a..p {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            meat[(a, b)] = meat[(b, a)];
        }
    }
    let mut v = xtx_inv * meat * xtx_inv;
    if opts.df_correction && g > 1 && n > k_total {
        let gf = g as f64;
        let nf = n as f64;
        let kf = k_total as f64;
        v *= (gf / (gf - 1.0)) * ((nf - 1.0) / (nf - kf));
    }
    v
}

/// Floor negative eigenvalues of a symmetric matrix at zero.
fn repair_psd(m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return (sym, false);
    }
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (repaired, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(rng)
    }

    /// Brute-force oracle: explicit dummy columns (first dimension full,
    /// later dimensions drop-first), solved directly, with the sandwich
    /// computed from the full design. Independent of the absorption path.
    fn oracle(
        y: &[f64],
        columns: &[Column],
        fixed: &[FixedDim],
        cluster: &[u32],
        df_correction: bool,
    ) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let n = y.len();
        let p = columns.len();
        let mut zcols: Vec<Vec<f64>> = columns.iter().map(|c| c.values.clone()).collect();
        for (d, dim) in fixed.iter().enumerate() {
            let levels = dim.levels.iter().copied().max().unwrap() as usize + 1;
            let first_drop = usize::from(d > 0);
            for level in first_drop..levels {
                zcols.push(
                    dim.levels
                        .iter()
                        .map(|&l| f64::from(l as usize == level))
                        .collect(),
                );
            }
        }
        let k = zcols.len();
        let mut z = DMatrix::<f64>::zeros(n, k);
        for (j, col) in zcols.iter().enumerate() {
            for i in 0..n {
                z[(i, j)] = col[i];
            }
        }
        let zt = z.transpose();
        let ztz = &zt * &z;
        let chol = nalgebra::Cholesky::new(ztz)?;
        let yv = DVector::from_column_slice(y);
        let beta = chol.solve(&(&zt * &yv));
        let resid = &yv - &z * &beta;
        let a = chol.inverse();

        let g = cluster.iter().copied().max().unwrap() as usize + 1;
        let mut meat = DMatrix::<f64>::zeros(k, k);
        let mut scores = vec![DVector::<f64>::zeros(k); g];
        for i in 0..n {
            let gi = cluster[i] as usize;
            for j in 0..k {
                scores[gi][j] += z[(i, j)] * resid[i];
            }
        }
        for s in &scores {
            meat += s * s.transpose();
        }
        let mut v = &a * meat * &a;
        if df_correction && g > 1 && n > k {
            let (gf, nf, kf) = (g as f64, n as f64, k as f64);
            v *= (gf / (gf - 1.0)) * ((nf - 1.0) / (nf - kf));
        }
        let common = beta.rows(0, p).iter().copied().collect();
        Some((common, v.view((0, 0), (p, p)).into()))
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        dims: &[usize],
    ) -> (Vec<f64>, Vec<Column>, Vec<FixedDim>, Vec<u32>) {
        let fixed: Vec<FixedDim> = dims
            .iter()
            .enumerate()
            .map(|(d, &levels)| {
                // Every level occupied at least once.
                let mut codes: Vec<u32> = (0..n)
                    .map(|i| if i < levels { i as u32 } else { rng.gen_range(0..levels) as u32 })
                    .collect();
                // Shuffle deterministically.
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    codes.swap(i, j);
                }
                FixedDim::new(format!("fe{d}"), codes)
            })
            .collect();
        let columns: Vec<Column> = (0..p)
            .map(|j| Column::new(format!("x{j}"), (0..n).map(|_| normal(rng)).collect()))
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = normal(rng);
                for (j, c) in columns.iter().enumerate() {
                    v += (j as f64 + 1.0) * 0.5 * c.values[i];
                }
                for f in &fixed {
                    v += f.levels[i] as f64 * 0.7;
                }
                v
            })
            .collect();
        let clusters: Vec<u32> = (0..n).map(|_| rng.gen_range(0..(n / 3).max(2)) as u32).collect();
        (y, columns, fixed, dense_codes(&clusters))
    }

    #[test]
    fn absorption_matches_explicit_dummies() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut done = 0;
        while done < 20 {
            let n = rng.gen_range(25..60);
            let p = rng.gen_range(1..4);
            let dims = [rng.gen_range(2..5usize), rng.gen_range(2..4usize)];
            let (y, columns, fixed, clusters) = random_instance(&mut rng, n, p, &dims);
            let Some((oracle_beta, oracle_v)) =
                oracle(&y, &columns, &fixed, &clusters, true)
            else {
                continue; // collinear draw; try another
            };
            let fit = fit(
                &y,
                &columns,
                None,
                &fixed,
                &ClusterSpec::OneWay(clusters.clone()),
                &FitOptions::default(),
            )
            .unwrap();
            assert_eq!(fit.coefficients.len(), p);
            for (c, ob) in fit.coefficients.iter().zip(&oracle_beta) {
                assert!(
                    (c.estimate - ob).abs() < 1e-8,
                    "coefficient {} vs oracle {}",
                    c.estimate,
                    ob
                );
            }
            for a in 0..p {
                for b in 0..p {
                    assert!(
                        (fit.vcov[(a, b)] - oracle_v[(a, b)]).abs() < 1e-10,
                        "vcov ({a},{b}): {} vs {}",
                        fit.vcov[(a, b)],
                        oracle_v[(a, b)]
                    );
                }
            }
            done += 1;
        }
    }

    #[test]
    fn singleton_clusters_match_hand_hc_sandwich() {
        // Six rows, one regressor plus intercept, each row its own cluster.
        let y = vec![1.0, 2.0, 1.5, 3.0, 2.5, 4.0];
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let columns = vec![
            Column::new("const", vec![1.0; 6]),
            Column::new("x", x.clone()),
        ];
        let clusters: Vec<u32> = (0..6).collect();
        let fit = fit(
            &y,
            &columns,
            None,
            &[],
            &ClusterSpec::OneWay(clusters.clone()),
            &FitOptions { df_correction: false, ..FitOptions::default() },
        )
        .unwrap();
        let (ob, ov) = oracle(&y, &columns, &[], &clusters, false).unwrap();
        for (c, b) in fit.coefficients.iter().zip(&ob) {
            assert!((c.estimate - b).abs() < 1e-10);
        }
        for a in 0..2 {
            for b in 0..2 {
                assert!((fit.vcov[(a, b)] - ov[(a, b)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn robust_equals_singleton_oneway() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, columns, fixed, _) = random_instance(&mut rng, 30, 2, &[3]);
        let singles: Vec<u32> = (0..30).collect();
        let a = fit(&y, &columns, None, &fixed, &ClusterSpec::Robust, &FitOptions::default())
            .unwrap();
        let b = fit(
            &y,
            &columns,
            None,
            &fixed,
            &ClusterSpec::OneWay(singles),
            &FitOptions::default(),
        )
        .unwrap();
        for (ca, cb) in a.coefficients.iter().zip(&b.coefficients) {
            assert_eq!(ca.estimate, cb.estimate);
            assert_eq!(ca.se, cb.se);
        }
    }

    #[test]
    fn twoway_collapses_to_oneway_when_partitions_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (y, columns, fixed, clusters) = random_instance(&mut rng, 40, 2, &[3, 2]);
        let one = fit(
            &y,
            &columns,
            None,
            &fixed,
            &ClusterSpec::OneWay(clusters.clone()),
            &FitOptions::default(),
        )
        .unwrap();
        let two = fit(
            &y,
            &columns,
            None,
            &fixed,
            &ClusterSpec::TwoWay(clusters.clone(), clusters),
            &FitOptions::default(),
        )
        .unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (one.vcov[(a, b)] - two.vcov[(a, b)]).abs() < 1e-12,
                    "{} vs {}",
                    one.vcov[(a, b)],
                    two.vcov[(a, b)]
                );
            }
        }
        assert!(!two.psd_repaired);
    }

    #[test]
    fn constant_outcome_gives_zero_slopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, columns, fixed, clusters) = random_instance(&mut rng, 30, 3, &[3, 2]);
        let y = vec![2.5; 30];
        let fit = fit(
            &y,
            &columns,
            None,
            &fixed,
            &ClusterSpec::OneWay(clusters),
            &FitOptions::default(),
        )
        .unwrap();
        for c in &fit.coefficients {
            assert!(c.estimate.abs() < 1e-10, "{} = {}", c.name, c.estimate);
        }
    }

    #[test]
    fn within_cluster_duplication_preserves_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (y, columns, fixed, clusters) = random_instance(&mut rng, 24, 2, &[2]);
        let fit_once = fit(
            &y,
            &columns,
            None,
            &fixed,
            &ClusterSpec::OneWay(clusters.clone()),
            &FitOptions::default(),
        )
        .unwrap();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let columns2: Vec<Column> = columns
            .iter()
            .map(|c| {
                Column::new(
                    c.name.clone(),
                    c.values.iter().chain(&c.values).copied().collect::<Vec<f64>>(),
                )
            })
            .collect();
        let fixed2: Vec<FixedDim> = fixed
            .iter()
            .map(|f| {
                FixedDim::new(
                    f.name.clone(),
                    f.levels.iter().chain(&f.levels).copied().collect::<Vec<u32>>(),
                )
            })
            .collect();
        let clusters2: Vec<u32> = clusters.iter().chain(&clusters).copied().collect();
        let fit_twice = fit(
            &y2,
            &columns2,
            None,
            &fixed2,
            &ClusterSpec::OneWay(clusters2),
            &FitOptions::default(),
        )
        .unwrap();
        for (a, b) in fit_once.coefficients.iter().zip(&fit_twice.coefficients) {
            assert!((a.estimate - b.estimate).abs() < 1e-10);
        }
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (y, columns, fixed, clusters) = random_instance(&mut rng, 35, 2, &[3]);
        let unweighted = fit(
            &y,
            &columns,
            None,
            &fixed,
            &ClusterSpec::OneWay(clusters.clone()),
            &FitOptions::default(),
        )
        .unwrap();
        let weights = vec![3.7; 35];
        let weighted = fit(
            &y,
            &columns,
            Some(&weights),
            &fixed,
            &ClusterSpec::OneWay(clusters),
            &FitOptions::default(),
        )
        .unwrap();
        for (a, b) in unweighted.coefficients.iter().zip(&weighted.coefficients) {
            assert!((a.estimate - b.estimate).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_column_dropped_or_errors() {
        let x1: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x2: Vec<f64> = x1.iter().map(|v| 2.0 * v).collect();
        let y: Vec<f64> = x1.iter().map(|v| v + 1.0).collect();
        let columns = vec![
            Column::new("const", vec![1.0; 20]),
            Column::new("x1", x1),
            Column::new("x2", x2),
        ];
        let lenient = fit(&y, &columns, None, &[], &ClusterSpec::None, &FitOptions::default())
            .unwrap();
        assert_eq!(lenient.dropped, vec!["x2".to_string()]);
        let strict = fit(
            &y,
            &columns,
            None,
            &[],
            &ClusterSpec::None,
            &FitOptions { error_on_collinear: true, ..FitOptions::default() },
        );
        assert!(matches!(strict, Err(crate::Error::Collinear(_))));
    }

    #[test]
    fn fe_constant_column_is_absorbed() {
        // A column constant within each group is spanned by the dummies.
        let levels: Vec<u32> = (0..24).map(|i| (i % 3) as u32).collect();
        let col: Vec<f64> = levels.iter().map(|&l| l as f64 * 10.0).collect();
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = x.iter().zip(&col).map(|(a, b)| a + b).collect();
        let columns = vec![Column::new("absorbed", col), Column::new("x", x)];
        let fixed = vec![FixedDim::new("g", levels)];
        let fit = fit(&y, &columns, None, &fixed, &ClusterSpec::Robust, &FitOptions::default())
            .unwrap();
        assert_eq!(fit.dropped, vec!["absorbed".to_string()]);
        let c = fit.coefficient("x").unwrap();
        assert!((c.estimate - 1.0).abs() < 1e-8);
    }

    #[test]
    fn single_level_dimension_dropped_with_notice() {
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let columns = vec![Column::new("x", vec![0.0, 1.0, 2.0, 3.0])];
        let fixed = vec![FixedDim::new("only", vec![0, 0, 0, 0])];
        let fit = fit(&y, &columns, None, &fixed, &ClusterSpec::None, &FitOptions::default())
            .unwrap();
        assert!(fit.notices.iter().any(|n| n.contains("single level")));
        assert_eq!(fit.absorbed_df, 1);
        let c = fit.coefficient("x").unwrap();
        assert!((c.estimate - 1.0).abs() < 1e-10);
    }
}
