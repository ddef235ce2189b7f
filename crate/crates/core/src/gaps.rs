//! The two-equation grading-gap estimator.
//!
//! Both equations regress a score on teacher-by-gender cell intercepts plus
//! common covariates: the blind equation carries the cell effects a1 (female
//! cell) and a1+a2 (male cell), the teacher-graded equation b1 and b1+b2.
//! Cells are absorbed exactly by one-pass demeaning; only the common block is
//! solved by normal equations. The per-teacher gap is
//!
//! ```text
//! theta_j = b2_j - a2_j
//! ```
//!
//! i.e. the male-female gap in teacher-assigned scores net of the same gap in
//! blindly graded scores. Standard errors cluster at the student level and
//! are computed per teacher from the influence representation of the cell
//! contrasts, which avoids materializing the full dummy design. The SURE
//! variant keeps the same point estimates (both equations share one design)
//! and adds cross-equation sampling covariances from cluster-level score
//! cross-products.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::panel::{ScoreObservation, StudentRecord, Subject};
use crate::regress::Column;
use crate::table::{flush, fmt_f64, write_record, writer};
use crate::{Error, Result};

/// Common-covariate specification for the estimating system.
#[derive(Debug, Clone, Default)]
pub struct CovariateSpec {
    /// Include (z, z^2) pairs for the lagged math, language, and
    /// physical-education scores, with missing-value indicators.
    pub lag_quadratics: bool,
    /// Extra caller-supplied columns aligned with the observation slice.
    pub extra: Vec<Column>,
}

impl CovariateSpec {
    pub fn with_lags() -> Self {
        CovariateSpec { lag_quadratics: true, extra: Vec::new() }
    }
}

/// Which estimating equation a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    Blind,
    Teacher,
}

/// Map each observation to the student's gender using enrollment records.
/// Errors when a score row has no matching student.
pub fn join_gender(obs: &[ScoreObservation], students: &[StudentRecord]) -> Result<Vec<bool>> {
    let gender: BTreeMap<&str, bool> = students
        .iter()
        .map(|s| (s.student_id.as_str(), s.female))
        .collect();
    obs.iter()
        .map(|o| {
            gender.get(o.student_id.as_str()).copied().ok_or_else(|| {
                Error::InvalidInput(format!("score row for unknown student {}", o.student_id))
            })
        })
        .collect()
}

/// Fitted two-equation system with everything needed for per-teacher
/// contrast covariances.
#[derive(Debug, Clone)]
pub struct SystemFit {
    pub subject: Subject,
    /// Dense teacher index -> id, sorted by id.
    pub teacher_ids: Vec<String>,
    /// Per teacher: [female cell, male cell] indices into the cell arrays.
    pub teacher_cells: Vec<[Option<u32>; 2]>,
    /// Per cell: owning teacher index.
    pub cell_teacher: Vec<u32>,
    /// Per cell: true when the female cell.
    pub cell_female: Vec<bool>,
    pub cell_n: Vec<usize>,
    /// Cell-level intercepts recovered by cell-mean back-substitution.
    pub cell_effect_blind: Vec<f64>,
    pub cell_effect_teacher: Vec<f64>,
    /// Cell means of the kept covariate columns (raw scale).
    pub cell_xbar: Vec<DVector<f64>>,
    /// Common coefficients (blind / teacher equations) with column names.
    pub covariate_names: Vec<String>,
    pub alpha3: DVector<f64>,
    pub beta3: DVector<f64>,
    pub resid_blind: Vec<f64>,
    pub resid_teacher: Vec<f64>,
    pub row_cell: Vec<u32>,
    /// Dense student cluster code per row.
    pub row_cluster: Vec<u32>,
    pub n_clusters: usize,
    pub rows_by_cell: Vec<Vec<u32>>,
    /// Inverse of the demeaned-covariate Gram matrix (p x p).
    pub xtx_inv: DMatrix<f64>,
    /// Cluster score vectors, flat g x p, per equation.
    pub scores_blind: Vec<f64>,
    pub scores_teacher: Vec<f64>,
    /// Sum over clusters of score outer products, per equation pair.
    pub meat_bb: DMatrix<f64>,
    pub meat_tt: DMatrix<f64>,
    pub meat_bt: DMatrix<f64>,
    /// Per-row cross-equation residual covariance (2x2: blind, teacher).
    pub sigma_cross: [[f64; 2]; 2],
    /// Teachers observed with a single gender, excluded from gap extraction.
    pub single_gender_teachers: Vec<String>,
    pub years_by_teacher: Vec<BTreeSet<i32>>,
    pub students_by_teacher: Vec<usize>,
    /// Joint estimation requested: gap standard errors subtract the
    /// cross-equation sampling covariance instead of assuming independence.
    pub sure: bool,
    pub warnings: Vec<String>,
    pub dropped_columns: Vec<String>,
}

impl SystemFit {
    pub fn n_rows(&self) -> usize {
        self.row_cell.len()
    }

    pub fn teacher_index(&self, id: &str) -> Option<usize> {
        self.teacher_ids.binary_search_by(|t| t.as_str().cmp(id)).ok()
    }

    /// Cross-equation residual correlation.
    pub fn residual_correlation(&self) -> f64 {
        let den = (self.sigma_cross[0][0] * self.sigma_cross[1][1]).sqrt();
        if den == 0.0 {
            0.0
        } else {
            self.sigma_cross[0][1] / den
        }
    }
}

/// Per-teacher gap estimate in test-score standard-deviation units.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherGapEstimate {
    pub teacher_id: String,
    pub subject: Subject,
    pub theta_hat: f64,
    pub se: f64,
    pub n_female: usize,
    pub n_male: usize,
    /// Distinct students taught; the weight basis for student-weighted
    /// moments.
    pub n_students: usize,
    pub years_used: BTreeSet<i32>,
}

#[derive(Debug, Clone, Default)]
pub struct GapSet {
    pub gaps: Vec<TeacherGapEstimate>,
    /// Teachers omitted by the minimum-cell-size rule.
    pub omitted_min_cell: usize,
    /// Teachers omitted for having a single gender cell.
    pub omitted_single_gender: usize,
}

/// Estimate both equations separately (shared design; gap standard errors
/// combine the two contrast variances assuming cross-equation independence).
pub fn estimate_system(
    obs: &[ScoreObservation],
    female: &[bool],
    spec: &CovariateSpec,
) -> Result<SystemFit> {
    fit_system(obs, female, spec, false)
}

/// Joint (SURE) estimation: identical point estimates, cross-equation
/// residual and sampling covariances retained and used.
pub fn sure_fit(
    obs: &[ScoreObservation],
    female: &[bool],
    spec: &CovariateSpec,
) -> Result<SystemFit> {
    fit_system(obs, female, spec, true)
}

fn build_covariates(obs: &[ScoreObservation], spec: &CovariateSpec) -> Result<Vec<Column>> {
    let n = obs.len();
    let mut cols = Vec::new();
    if spec.lag_quadratics {
        type Get = fn(&ScoreObservation) -> Option<f64>;
        let lags: [(&str, Get); 3] = [
            ("lag_math", |o: &ScoreObservation| o.lagged_math),
            ("lag_language", |o: &ScoreObservation| o.lagged_language),
            ("lag_physed", |o: &ScoreObservation| o.lagged_physed),
        ];
        for (name, get) in lags {
            if !obs.iter().any(|o| get(o).is_some()) {
                continue;
            }
            let any_missing = obs.iter().any(|o| get(o).is_none());
            let z: Vec<f64> = obs.iter().map(|o| get(o).unwrap_or(0.0)).collect();
            let z2: Vec<f64> = z.iter().map(|v| v * v).collect();
            cols.push(Column::new(format!("{name}_z"), z));
            cols.push(Column::new(format!("{name}_z2"), z2));
            if any_missing {
                let miss: Vec<f64> = obs
                    .iter()
                    .map(|o| if get(o).is_none() { 1.0 } else { 0.0 })
                    .collect();
                cols.push(Column::new(format!("{name}_missing"), miss));
            }
        }
    }
    for c in &spec.extra {
        if c.values.len() != n {
            return Err(Error::InvalidInput(format!(
                "extra covariate {} has {} rows, expected {n}",
                c.name,
                c.values.len()
            )));
        }
        cols.push(c.clone());
    }
    Ok(cols)
}

fn fit_system(
    obs: &[ScoreObservation],
    female: &[bool],
    spec: &CovariateSpec,
    sure: bool,
) -> Result<SystemFit> {
    if obs.is_empty() {
        return Err(Error::InvalidInput("no score observations".into()));
    }
    if female.len() != obs.len() {
        return Err(Error::InvalidInput("gender slice length mismatch".into()));
    }
    let subject = obs[0].subject;
    if obs.iter().any(|o| o.subject != subject) {
        return Err(Error::InvalidInput(
            "estimate the system one subject at a time".into(),
        ));
    }
    let n = obs.len();
    let mut warnings = Vec::new();

    // Dense teacher indexing, sorted by id.
    let teacher_ids: Vec<String> = {
        let set: BTreeSet<&str> = obs.iter().map(|o| o.teacher_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    };
    let teacher_idx: BTreeMap<&str, u32> = teacher_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let n_teachers = teacher_ids.len();

    // Cells: one per observed (teacher, gender), ordered by (teacher, male).
    let mut teacher_cells: Vec<[Option<u32>; 2]> = vec![[None, None]; n_teachers];
    let mut cell_teacher = Vec::new();
    let mut cell_female = Vec::new();
    let mut row_cell = vec![0u32; n];
    for (i, o) in obs.iter().enumerate() {
        let t = teacher_idx[o.teacher_id.as_str()] as usize;
        let slot = usize::from(!female[i]); // 0 = female cell, 1 = male cell
        let cell = match teacher_cells[t][slot] {
            Some(c) => c,
            None => {
                let c = cell_teacher.len() as u32;
                cell_teacher.push(t as u32);
                cell_female.push(slot == 0);
                teacher_cells[t][slot] = Some(c);
                c
            }
        };
        row_cell[i] = cell;
    }
    let n_cells = cell_teacher.len();
    let mut rows_by_cell: Vec<Vec<u32>> = vec![Vec::new(); n_cells];
    for (i, &c) in row_cell.iter().enumerate() {
        rows_by_cell[c as usize].push(i as u32);
    }
    let cell_n: Vec<usize> = rows_by_cell.iter().map(Vec::len).collect();

    let single_gender_teachers: Vec<String> = teacher_cells
        .iter()
        .enumerate()
        .filter(|(_, cells)| cells[0].is_none() || cells[1].is_none())
        .map(|(t, _)| teacher_ids[t].clone())
        .collect();

    // Student clusters, dense by sorted id.
    let cluster_ids: Vec<&str> = {
        let set: BTreeSet<&str> = obs.iter().map(|o| o.student_id.as_str()).collect();
        set.into_iter().collect()
    };
    let cluster_idx: BTreeMap<&str, u32> = cluster_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i as u32))
        .collect();
    let row_cluster: Vec<u32> = obs
        .iter()
        .map(|o| cluster_idx[o.student_id.as_str()])
        .collect();
    let n_clusters = cluster_ids.len();

    // Covariates: drop empty columns, demean within cells, check rank.
    let raw_cols = build_covariates(obs, spec)?;
    let mut kept_cols: Vec<Column> = Vec::new();
    let mut dropped_columns = Vec::new();
    for c in raw_cols {
        if c.values.iter().all(|&v| v == 0.0) {
            dropped_columns.push(c.name.clone());
            continue;
        }
        kept_cols.push(c);
    }
    let p = kept_cols.len();
    let covariate_names: Vec<String> = kept_cols.iter().map(|c| c.name.clone()).collect();

    let mut x_dm: Vec<Vec<f64>> = kept_cols.iter().map(|c| c.values.clone()).collect();
    let mut y_blind: Vec<f64> = obs.iter().map(|o| o.blind_score).collect();
    let mut y_teacher: Vec<f64> = obs.iter().map(|o| o.teacher_score).collect();
    for rows in &rows_by_cell {
        let nf = rows.len() as f64;
        for col in x_dm.iter_mut() {
            let mean = rows.iter().map(|&i| col[i as usize]).sum::<f64>() / nf;
            for &i in rows {
                col[i as usize] -= mean;
            }
        }
        for y in [&mut y_blind, &mut y_teacher] {
            let mean = rows.iter().map(|&i| y[i as usize]).sum::<f64>() / nf;
            for &i in rows {
                y[i as usize] -= mean;
            }
        }
    }

    // Rank check on the demeaned covariates (modified Gram-Schmidt): a
    // collinear common block is a hard error naming the offending columns.
    {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut collinear = Vec::new();
        for (j, col) in x_dm.iter().enumerate() {
            let norm0: f64 = col.iter().map(|v| v * v).sum();
            if norm0 == 0.0 {
                collinear.push(covariate_names[j].clone());
                continue;
            }
            let mut r = col.clone();
            for b in &basis {
                let bb: f64 = b.iter().map(|v| v * v).sum();
                let dot: f64 = r.iter().zip(b).map(|(a, c)| a * c).sum();
                let k = dot / bb;
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= k * bi;
                }
            }
            let rn: f64 = r.iter().map(|v| v * v).sum();
            if rn <= 1e-20 * norm0 {
                collinear.push(covariate_names[j].clone());
            } else {
                basis.push(r);
            }
        }
        if !collinear.is_empty() {
            return Err(Error::Collinear(collinear));
        }
    }

    // Common-coefficient solve, shared Gram matrix, two right-hand sides.
    let (alpha3, beta3, xtx_inv) = if p == 0 {
        (DVector::zeros(0), DVector::zeros(0), DMatrix::zeros(0, 0))
    } else {
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty_b = DVector::<f64>::zeros(p);
        let mut xty_t = DVector::<f64>::zeros(p);
        for a in 0..p {
            for b in a..p {
                let s: f64 = x_dm[a].iter().zip(&x_dm[b]).map(|(u, v)| u * v).sum();
                xtx[(a, b)] = s;
                xtx[(b, a)] = s;
            }
            xty_b[a] = x_dm[a].iter().zip(&y_blind).map(|(u, v)| u * v).sum();
            xty_t[a] = x_dm[a].iter().zip(&y_teacher).map(|(u, v)| u * v).sum();
        }
        let chol = nalgebra::Cholesky::new(xtx)
            .ok_or_else(|| Error::Collinear(covariate_names.clone()))?;
        (chol.solve(&xty_b), chol.solve(&xty_t), chol.inverse())
    };

    // Residuals on the demeaned scale (= full-model residuals).
    let mut resid_blind = y_blind;
    let mut resid_teacher = y_teacher;
    for a in 0..p {
        let (ca, cb) = (alpha3[a], beta3[a]);
        for i in 0..n {
            resid_blind[i] -= ca * x_dm[a][i];
            resid_teacher[i] -= cb * x_dm[a][i];
        }
    }

    // Cell effects by back-substitution on the raw scale.
    let mut cell_effect_blind = vec![0.0f64; n_cells];
    let mut cell_effect_teacher = vec![0.0f64; n_cells];
    let mut cell_xbar: Vec<DVector<f64>> = vec![DVector::zeros(p); n_cells];
    for (c, rows) in rows_by_cell.iter().enumerate() {
        let nf = rows.len() as f64;
        let mut mb = 0.0;
        let mut mt = 0.0;
        let mut xbar = DVector::<f64>::zeros(p);
        for &i in rows {
            let i = i as usize;
            mb += obs[i].blind_score;
            mt += obs[i].teacher_score;
            for a in 0..p {
                xbar[a] += kept_cols[a].values[i];
            }
        }
        mb /= nf;
        mt /= nf;
        xbar /= nf;
        cell_effect_blind[c] = mb - alpha3.dot(&xbar);
        cell_effect_teacher[c] = mt - beta3.dot(&xbar);
        cell_xbar[c] = xbar;
    }

    // Cluster-level score vectors and their cross-products.
    let mut scores_blind = vec![0.0f64; n_clusters * p];
    let mut scores_teacher = vec![0.0f64; n_clusters * p];
    for i in 0..n {
        let g = row_cluster[i] as usize * p;
        for a in 0..p {
            let x = x_dm[a][i];
            scores_blind[g + a] += x * resid_blind[i];
            scores_teacher[g + a] += x * resid_teacher[i];
        }
    }
    let mut meat_bb = DMatrix::<f64>::zeros(p, p);
    let mut meat_tt = DMatrix::<f64>::zeros(p, p);
    let mut meat_bt = DMatrix::<f64>::zeros(p, p);
    for g in 0..n_clusters {
        let sb = &scores_blind[g * p..(g + 1) * p];
        let st = &scores_teacher[g * p..(g + 1) * p];
        for a in 0..p {
            for b in 0..p {
                meat_bb[(a, b)] += sb[a] * sb[b];
                meat_tt[(a, b)] += st[a] * st[b];
                meat_bt[(a, b)] += sb[a] * st[b];
            }
        }
    }

    // Cross-equation residual second moments.
    let nf = n as f64;
    let sigma_cross = [
        [
            resid_blind.iter().map(|e| e * e).sum::<f64>() / nf,
            resid_blind
                .iter()
                .zip(&resid_teacher)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / nf,
        ],
        [
            resid_blind
                .iter()
                .zip(&resid_teacher)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / nf,
            resid_teacher.iter().map(|e| e * e).sum::<f64>() / nf,
        ],
    ];

    // Bookkeeping per teacher.
    let mut years_by_teacher: Vec<BTreeSet<i32>> = vec![BTreeSet::new(); n_teachers];
    let mut students_by_teacher_sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n_teachers];
    for o in obs {
        let t = teacher_idx[o.teacher_id.as_str()] as usize;
        years_by_teacher[t].insert(o.school_year);
        students_by_teacher_sets[t].insert(o.student_id.as_str());
    }
    let students_by_teacher: Vec<usize> =
        students_by_teacher_sets.iter().map(BTreeSet::len).collect();

    if n_clusters < p + 2 {
        warnings.push(format!(
            "only {n_clusters} student clusters for {p} common covariates; contrast \
             covariances may be unreliable"
        ));
    }

    Ok(SystemFit {
        subject,
        teacher_ids,
        teacher_cells,
        cell_teacher,
        cell_female,
        cell_n,
        cell_effect_blind,
        cell_effect_teacher,
        cell_xbar,
        covariate_names,
        alpha3,
        beta3,
        resid_blind,
        resid_teacher,
        row_cell,
        row_cluster,
        n_clusters,
        rows_by_cell,
        xtx_inv,
        scores_blind,
        scores_teacher,
        meat_bb,
        meat_tt,
        meat_bt,
        sigma_cross,
        single_gender_teachers,
        years_by_teacher,
        students_by_teacher,
        sure,
        warnings,
        dropped_columns,
    })
}

/// A linear functional of the fitted parameters, represented by its
/// per-cluster influence: a local part supported on the clusters that touch
/// the defining cells, minus global corrections through the common-coefficient
/// solve.
struct Functional {
    local: BTreeMap<u32, f64>,
    /// Correction vectors (already multiplied by the Gram inverse).
    global: Vec<(Equation, DVector<f64>)>,
}

impl Functional {
    fn correction(&self, fit: &SystemFit, g: u32) -> f64 {
        let p = fit.covariate_names.len();
        let mut c = 0.0;
        for (eq, v) in &self.global {
            let scores = match eq {
                Equation::Blind => &fit.scores_blind,
                Equation::Teacher => &fit.scores_teacher,
            };
            let base = g as usize * p;
            for a in 0..p {
                c += v[a] * scores[base + a];
            }
        }
        c
    }
}

fn meat(fit: &SystemFit, e1: Equation, e2: Equation) -> &DMatrix<f64> {
    match (e1, e2) {
        (Equation::Blind, Equation::Blind) => &fit.meat_bb,
        (Equation::Teacher, Equation::Teacher) => &fit.meat_tt,
        _ => &fit.meat_bt,
    }
}

/// Sampling covariance of two linear functionals under student clustering.
fn functional_cov(fit: &SystemFit, fa: &Functional, fb: &Functional) -> f64 {
    // Local and cross terms over the touched clusters only.
    let mut total = 0.0;
    let clusters: BTreeSet<u32> = fa.local.keys().chain(fb.local.keys()).copied().collect();
    for g in clusters {
        let la = fa.local.get(&g).copied().unwrap_or(0.0);
        let lb = fb.local.get(&g).copied().unwrap_or(0.0);
        total += la * lb;
        if la != 0.0 {
            total -= la * fb.correction(fit, g);
        }
        if lb != 0.0 {
            total -= lb * fa.correction(fit, g);
        }
    }
    // Quadratic term through the full meat matrices.
    for (e1, v1) in &fa.global {
        for (e2, v2) in &fb.global {
            let m = meat(fit, *e1, *e2);
            total += match (e1, e2) {
                (Equation::Teacher, Equation::Blind) => (m.transpose() * v1).dot(v2),
                _ => (v1.transpose() * m * v2)[(0, 0)],
            };
        }
    }
    total
}

/// The male-minus-female cell contrast for one equation of one teacher.
fn gender_contrast(fit: &SystemFit, teacher: usize, eq: Equation) -> Functional {
    let p = fit.covariate_names.len();
    let female_cell = fit.teacher_cells[teacher][0].unwrap() as usize;
    let male_cell = fit.teacher_cells[teacher][1].unwrap() as usize;
    let resid = match eq {
        Equation::Blind => &fit.resid_blind,
        Equation::Teacher => &fit.resid_teacher,
    };
    let mut local = BTreeMap::new();
    let nm = fit.cell_n[male_cell] as f64;
    for &i in &fit.rows_by_cell[male_cell] {
        *local.entry(fit.row_cluster[i as usize]).or_insert(0.0) += resid[i as usize] / nm;
    }
    let nf = fit.cell_n[female_cell] as f64;
    for &i in &fit.rows_by_cell[female_cell] {
        *local.entry(fit.row_cluster[i as usize]).or_insert(0.0) -= resid[i as usize] / nf;
    }
    let h = &fit.cell_xbar[male_cell] - &fit.cell_xbar[female_cell];
    let v = if p == 0 { DVector::zeros(0) } else { &fit.xtx_inv * h };
    Functional { local, global: vec![(eq, v)] }
}

/// The cell-level effect (value added) functional for one equation.
fn cell_level(fit: &SystemFit, cell: usize, eq: Equation) -> Functional {
    let p = fit.covariate_names.len();
    let resid = match eq {
        Equation::Blind => &fit.resid_blind,
        Equation::Teacher => &fit.resid_teacher,
    };
    let mut local = BTreeMap::new();
    let nc = fit.cell_n[cell] as f64;
    for &i in &fit.rows_by_cell[cell] {
        *local.entry(fit.row_cluster[i as usize]).or_insert(0.0) += resid[i as usize] / nc;
    }
    let v = if p == 0 {
        DVector::zeros(0)
    } else {
        &fit.xtx_inv * &fit.cell_xbar[cell]
    };
    Functional { local, global: vec![(eq, v)] }
}

/// Combine two functionals: `a - b`.
fn difference(a: Functional, b: Functional) -> Functional {
    let mut local = a.local;
    for (g, v) in b.local {
        *local.entry(g).or_insert(0.0) -= v;
    }
    let mut global = a.global;
    for (eq, v) in b.global {
        global.push((eq, -v));
    }
    Functional { local, global }
}

/// Cluster-robust variance of the gap contrast for one teacher, under the
/// fit's separate/SURE convention.
pub fn gap_variance(fit: &SystemFit, teacher: usize) -> f64 {
    let ct = gender_contrast(fit, teacher, Equation::Teacher);
    let cb = gender_contrast(fit, teacher, Equation::Blind);
    let vt = functional_cov(fit, &ct, &ct);
    let vb = functional_cov(fit, &cb, &cb);
    if fit.sure {
        let cross = functional_cov(fit, &ct, &cb);
        (vt + vb - 2.0 * cross).max(0.0)
    } else {
        vt + vb
    }
}

/// Extract per-teacher gap estimates from a fitted system.
pub fn teacher_gaps(fit: &SystemFit, min_cell: usize) -> Result<GapSet> {
    let mut out = GapSet::default();
    for (t, cells) in fit.teacher_cells.iter().enumerate() {
        let (Some(fc), Some(mc)) = (cells[0], cells[1]) else {
            out.omitted_single_gender += 1;
            continue;
        };
        let (fc, mc) = (fc as usize, mc as usize);
        let n_female = fit.cell_n[fc];
        let n_male = fit.cell_n[mc];
        if n_female < min_cell || n_male < min_cell {
            out.omitted_min_cell += 1;
            continue;
        }
        let beta2 = fit.cell_effect_teacher[mc] - fit.cell_effect_teacher[fc];
        let alpha2 = fit.cell_effect_blind[mc] - fit.cell_effect_blind[fc];
        let se = gap_variance(fit, t).sqrt();
        out.gaps.push(TeacherGapEstimate {
            teacher_id: fit.teacher_ids[t].clone(),
            subject: fit.subject,
            theta_hat: beta2 - alpha2,
            se,
            n_female,
            n_male,
            n_students: fit.students_by_teacher[t],
            years_used: fit.years_by_teacher[t].clone(),
        });
    }
    Ok(out)
}

/// Weighting choice for the value-added correlation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaWeights {
    Equal,
    Students,
}

/// Bias-corrected correlation matrix over (gap, VA toward females, VA toward
/// males), with per-parameter bias-corrected standard deviations.
#[derive(Debug, Clone)]
pub struct VaCorrelationReport {
    pub subject: Subject,
    pub corr: [[f64; 3]; 3],
    pub sd: [f64; 3],
    pub n_teachers: usize,
    /// A corrected variance was non-positive and got floored.
    pub floored: bool,
}

/// Subtract the mean sampling covariance (from the SURE influence
/// representation) from the raw moment matrix of (theta, VA_f, VA_m), then
/// convert to correlations.
pub fn va_correlation_report(
    fit: &SystemFit,
    min_cell: usize,
    weights: VaWeights,
) -> Result<VaCorrelationReport> {
    if !fit.sure {
        return Err(Error::InvalidInput(
            "value-added correlations need a SURE fit (cross-equation covariances)".into(),
        ));
    }
    let mut values: Vec<[f64; 3]> = Vec::new();
    let mut samplings: Vec<DMatrix<f64>> = Vec::new();
    let mut wts: Vec<f64> = Vec::new();
    for (t, cells) in fit.teacher_cells.iter().enumerate() {
        let (Some(fc), Some(mc)) = (cells[0], cells[1]) else {
            continue;
        };
        let (fc, mc) = (fc as usize, mc as usize);
        if fit.cell_n[fc] < min_cell || fit.cell_n[mc] < min_cell {
            continue;
        }
        let beta2 = fit.cell_effect_teacher[mc] - fit.cell_effect_teacher[fc];
        let alpha2 = fit.cell_effect_blind[mc] - fit.cell_effect_blind[fc];
        let theta = beta2 - alpha2;
        let va_f = fit.cell_effect_blind[fc];
        let va_m = fit.cell_effect_blind[mc];

        let f_theta = difference(
            gender_contrast(fit, t, Equation::Teacher),
            gender_contrast(fit, t, Equation::Blind),
        );
        let f_vaf = cell_level(fit, fc, Equation::Blind);
        let f_vam = cell_level(fit, mc, Equation::Blind);
        let fs = [&f_theta, &f_vaf, &f_vam];
        let mut s = DMatrix::<f64>::zeros(3, 3);
        for a in 0..3 {
            for b in a..3 {
                let c = functional_cov(fit, fs[a], fs[b]);
                s[(a, b)] = c;
                s[(b, a)] = c;
            }
        }
        values.push([theta, va_f, va_m]);
        samplings.push(s);
        wts.push(match weights {
            VaWeights::Equal => 1.0,
            VaWeights::Students => fit.students_by_teacher[t] as f64,
        });
    }
    let j = values.len();
    if j < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 teachers with both gender cells, have {j}"
        )));
    }
    let wsum: f64 = wts.iter().sum();
    let mut mean = [0.0f64; 3];
    for (v, &w) in values.iter().zip(&wts) {
        for a in 0..3 {
            mean[a] += w * v[a] / wsum;
        }
    }
    let mut raw = DMatrix::<f64>::zeros(3, 3);
    let mut sbar = DMatrix::<f64>::zeros(3, 3);
    for (v, (s, &w)) in values.iter().zip(samplings.iter().zip(&wts)) {
        for a in 0..3 {
            for b in 0..3 {
                raw[(a, b)] += w * (v[a] - mean[a]) * (v[b] - mean[b]) / wsum;
            }
        }
        sbar += s * (w / wsum);
    }
    let corrected = raw - sbar;

    let mut floored = false;
    let mut sd = [0.0f64; 3];
    for a in 0..3 {
        let va = corrected[(a, a)];
        if va <= 0.0 {
            floored = true;
            sd[a] = 0.0;
        } else {
            sd[a] = va.sqrt();
        }
    }
    let mut corr = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                corr[a][b] = 1.0;
            } else if sd[a] > 0.0 && sd[b] > 0.0 {
                corr[a][b] = (corrected[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(VaCorrelationReport {
        subject: fit.subject,
        corr,
        sd,
        n_teachers: j,
        floored,
    })
}

const GAP_HEADER: [&str; 8] = [
    "teacher_id",
    "subject",
    "theta_hat",
    "se",
    "n_female",
    "n_male",
    "n_students",
    "years",
];

/// Write gap estimates as delimited rows.
pub fn write_gaps(path: &Path, gaps: &[TeacherGapEstimate]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(&mut w, path, GAP_HEADER.iter().copied())?;
    for g in gaps {
        let years = g
            .years_used
            .iter()
            .map(i32::to_string)
            .collect::<Vec<_>>()
            .join(";");
        let fields = [
            g.teacher_id.clone(),
            g.subject.to_string(),
            fmt_f64(g.theta_hat),
            fmt_f64(g.se),
            g.n_female.to_string(),
            g.n_male.to_string(),
            g.n_students.to_string(),
            years,
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

pub fn read_gaps(path: &Path) -> Result<Vec<TeacherGapEstimate>> {
    let mut reader = crate::table::reader(path)?;
    let mut out = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = (idx + 2) as u64;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let subject = Subject::parse(get(1)).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("unknown subject {:?}", get(1)),
        })?;
        let years = get(7)
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<i32>().unwrap_or_default())
            .collect();
        out.push(TeacherGapEstimate {
            teacher_id: get(0).to_string(),
            subject,
            theta_hat: crate::table::parse_f64(get(2), path, line)?,
            se: crate::table::parse_f64(get(3), path, line)?,
            n_female: get(4).parse().unwrap_or(0),
            n_male: get(5).parse().unwrap_or(0),
            n_students: get(6).parse().unwrap_or(0),
            years_used: years,
        });
    }
    Ok(out)
}
