//! Leave-one-year-out treatment construction and long-run outcome
//! regressions.
//!
//! For each student cohort the gap pipeline is re-run on the score data that
//! excludes the cohort's own exam year(s); the resulting posterior means are
//! standardized by that fit's bias-corrected moments and attached to the
//! cohort's exposure rows. The outcome regression is
//!
//! ```text
//! y = d0 + d1 (t x female) + d2 female + d3 t + d4' X + FE + u
//! ```
//!
//! with cohort/grade/year/school fixed effects absorbed and one-way (school)
//! or two-way (student, school) cluster-robust covariance.

use std::collections::{BTreeMap, BTreeSet};

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::eb::{fit_gaussian_prior, shrink, PosteriorEstimate};
use crate::gaps::{estimate_system, teacher_gaps, CovariateSpec};
use crate::hetero::{variance_decomposition, VarianceDecomposition};
use crate::panel::{standardize_scores, ScoreObservation, StudentRecord};
use crate::regress::{self, ClusterSpec, Coefficient, Column, FitOptions, FixedDim};
use crate::{Error, Result};

/// Empirical Bayes route for the leave-one-year-out treatment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum EbMethod {
    #[default]
    Gaussian,
    /// Moment-calibrated deconvolution posterior means.
    Deconvolve,
}

#[derive(Debug, Clone)]
pub struct LooConfig {
    /// Cohort (projected graduation year) -> exam years to exclude. Multi-
    /// year exclusion sets are legal.
    pub cohort_exclusions: BTreeMap<i32, BTreeSet<i32>>,
    pub min_cell: usize,
    pub covariates: CovariateSpec,
    pub method: EbMethod,
    pub grid: crate::eb::GridSpec,
    pub basis: crate::eb::BasisSpec,
}

impl LooConfig {
    pub fn new(cohort_exclusions: BTreeMap<i32, BTreeSet<i32>>) -> Self {
        LooConfig {
            cohort_exclusions,
            min_cell: 2,
            covariates: CovariateSpec::with_lags(),
            method: EbMethod::Gaussian,
            grid: crate::eb::GridSpec::default(),
            basis: crate::eb::BasisSpec::default(),
        }
    }
}

/// Standardized leave-one-year-out treatment values for one cohort.
#[derive(Debug, Clone)]
pub struct CohortTreatment {
    pub cohort: i32,
    pub excluded_years: BTreeSet<i32>,
    /// teacher id -> standardized posterior mean.
    pub treatment: BTreeMap<String, f64>,
    /// teacher id -> years of score data behind the estimate (provenance).
    pub years_used: BTreeMap<String, BTreeSet<i32>>,
    pub decomposition: Option<VarianceDecomposition>,
    /// Teachers present in the full panel but without a usable estimate
    /// after exclusion.
    pub teachers_missing: usize,
}

impl CohortTreatment {
    /// Provenance assertion: no teacher's estimate uses an excluded year.
    pub fn provenance_ok(&self) -> bool {
        self.years_used
            .values()
            .all(|years| years.is_disjoint(&self.excluded_years))
    }
}

/// Re-run the gap pipeline per cohort, excluding that cohort's exam years.
pub fn leave_one_year_out(
    obs: &[ScoreObservation],
    female: &[bool],
    config: &LooConfig,
) -> Result<Vec<CohortTreatment>> {
    if obs.len() != female.len() {
        return Err(Error::InvalidInput("gender slice length mismatch".into()));
    }
    let all_teachers: BTreeSet<&str> = obs.iter().map(|o| o.teacher_id.as_str()).collect();
    let mut out = Vec::new();
    for (&cohort, excluded) in &config.cohort_exclusions {
        let mut kept_obs = Vec::new();
        let mut kept_female = Vec::new();
        for (o, &f) in obs.iter().zip(female) {
            if !excluded.contains(&o.school_year) {
                kept_obs.push(o.clone());
                kept_female.push(f);
            }
        }
        if kept_obs.is_empty() {
            out.push(CohortTreatment {
                cohort,
                excluded_years: excluded.clone(),
                treatment: BTreeMap::new(),
                years_used: BTreeMap::new(),
                decomposition: None,
                teachers_missing: all_teachers.len(),
            });
            continue;
        }
        let standardized = standardize_scores(&kept_obs)?;
        let fit = estimate_system(&standardized, &kept_female, &config.covariates)?;
        let gap_set = teacher_gaps(&fit, config.min_cell)?;
        if gap_set.gaps.len() < 2 {
            out.push(CohortTreatment {
                cohort,
                excluded_years: excluded.clone(),
                treatment: BTreeMap::new(),
                years_used: BTreeMap::new(),
                decomposition: None,
                teachers_missing: all_teachers.len(),
            });
            continue;
        }
        let decomposition = variance_decomposition(&gap_set.gaps)?;
        let posteriors: Vec<PosteriorEstimate> = match config.method {
            EbMethod::Gaussian => {
                let prior = fit_gaussian_prior(&decomposition);
                shrink(&gap_set.gaps, &prior)?
            }
            EbMethod::Deconvolve => {
                let (_, prior, _) = crate::eb::calibrate_penalty(
                    &gap_set.gaps,
                    &decomposition,
                    &config.grid,
                    &config.basis,
                    &crate::eb::DeconvOptions::default(),
                )?;
                crate::eb::posterior_mean_deconv(&gap_set.gaps, &prior)?
            }
        };
        // Standardize by the fit's bias-corrected moments.
        let mu = decomposition.unadjusted_mean;
        let sd = decomposition.var_weighted.max(crate::eb::PHI2_FLOOR).sqrt();
        let years_used: BTreeMap<String, BTreeSet<i32>> = gap_set
            .gaps
            .iter()
            .map(|g| (g.teacher_id.clone(), g.years_used.clone()))
            .collect();
        let treatment: BTreeMap<String, f64> = posteriors
            .iter()
            .map(|p| (p.teacher_id.clone(), (p.theta_star - mu) / sd))
            .collect();
        let teachers_missing = all_teachers
            .iter()
            .filter(|t| !treatment.contains_key(**t))
            .count();
        out.push(CohortTreatment {
            cohort,
            excluded_years: excluded.clone(),
            treatment,
            years_used,
            decomposition: Some(decomposition),
            teachers_missing,
        });
    }
    Ok(out)
}

/// Standard per-row covariates for the outcome regression: quadratic lagged
/// scores with missing indicators, keyed for [`build_exposure_rows`].
pub fn exposure_covariates(
    obs: &[ScoreObservation],
) -> (Vec<String>, BTreeMap<String, Vec<f64>>) {
    let mut names = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
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
        let z: Vec<f64> = obs.iter().map(|o| get(o).unwrap_or(0.0)).collect();
        let z2: Vec<f64> = z.iter().map(|v| v * v).collect();
        names.push(format!("{name}_z"));
        values.insert(format!("{name}_z"), z);
        names.push(format!("{name}_z2"));
        values.insert(format!("{name}_z2"), z2);
        if obs.iter().any(|o| get(o).is_none()) {
            let miss: Vec<f64> = obs
                .iter()
                .map(|o| if get(o).is_none() { 1.0 } else { 0.0 })
                .collect();
            names.push(format!("{name}_missing"));
            values.insert(format!("{name}_missing"), miss);
        }
    }
    (names, values)
}

/// One student-grade exposure row ready for the outcome regression.
#[derive(Debug, Clone)]
pub struct ExposureRow {
    pub student_id: String,
    pub teacher_id: String,
    pub school_id: String,
    pub cohort: i32,
    pub grade: u8,
    pub school_year: i32,
    pub female: bool,
    /// Standardized leave-one-year-out posterior treatment.
    pub treatment: f64,
    /// Extra covariate values, aligned with the builder's covariate names.
    pub covariates: Vec<f64>,
}

/// Join scores, students, and cohort treatments into exposure rows. Rows
/// whose teacher lacks a leave-one-year-out estimate for the student's
/// cohort are excluded (counted, not silently lost).
pub fn build_exposure_rows(
    obs: &[ScoreObservation],
    students: &[StudentRecord],
    treatments: &[CohortTreatment],
    covariate_names: &[String],
    covariates: &BTreeMap<String, Vec<f64>>,
) -> Result<(Vec<ExposureRow>, usize)> {
    let by_cohort: BTreeMap<i32, &CohortTreatment> =
        treatments.iter().map(|t| (t.cohort, t)).collect();
    let student_info: BTreeMap<&str, &StudentRecord> = students
        .iter()
        .map(|s| (s.student_id.as_str(), s))
        .collect();
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for (i, o) in obs.iter().enumerate() {
        let Some(s) = student_info.get(o.student_id.as_str()) else {
            return Err(Error::InvalidInput(format!(
                "score row for unknown student {}",
                o.student_id
            )));
        };
        let cohort = s.cohort_projected_grad;
        let Some(ct) = by_cohort.get(&cohort) else {
            dropped += 1;
            continue;
        };
        let Some(&treatment) = ct.treatment.get(&o.teacher_id) else {
            dropped += 1;
            continue;
        };
        let mut cov = Vec::with_capacity(covariate_names.len());
        for name in covariate_names {
            let values = covariates.get(name).ok_or_else(|| {
                Error::InvalidInput(format!("covariate {name} missing from the value map"))
            })?;
            if values.len() != obs.len() {
                return Err(Error::InvalidInput(format!(
                    "covariate {name} has {} rows, expected {}",
                    values.len(),
                    obs.len()
                )));
            }
            cov.push(values[i]);
        }
        rows.push(ExposureRow {
            student_id: o.student_id.clone(),
            teacher_id: o.teacher_id.clone(),
            school_id: s.school_id.clone(),
            cohort,
            grade: s.grade,
            school_year: o.school_year,
            female: s.female,
            treatment,
            covariates: cov,
        });
    }
    Ok((rows, dropped))
}

/// Clustering request for the outcome regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EffectsCluster {
    School,
    #[default]
    StudentAndSchool,
}

/// Which fixed-effect dimensions to absorb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeSet {
    pub cohort: bool,
    pub grade: bool,
    pub year: bool,
    pub school: bool,
}

impl Default for FeSet {
    fn default() -> Self {
        FeSet { cohort: true, grade: true, year: true, school: true }
    }
}

#[derive(Debug, Clone)]
pub struct EffectsSpec {
    pub cluster: EffectsCluster,
    pub fe: FeSet,
    /// Interact the school fixed effects with student gender.
    pub school_by_gender: bool,
    pub covariate_names: Vec<String>,
    pub options: FitOptions,
}

impl Default for EffectsSpec {
    fn default() -> Self {
        EffectsSpec {
            cluster: EffectsCluster::StudentAndSchool,
            fe: FeSet::default(),
            school_by_gender: false,
            covariate_names: Vec::new(),
            options: FitOptions::default(),
        }
    }
}

/// Outcome regression result with the named gap coefficients.
#[derive(Debug, Clone)]
pub struct EffectsResult {
    pub outcome: String,
    pub coefficients: Vec<Coefficient>,
    pub vcov: nalgebra::DMatrix<f64>,
    pub ybar_female: f64,
    pub ybar_male: f64,
    pub n: usize,
    pub n_clusters: Vec<usize>,
    pub fixed_effects: Vec<String>,
    pub notices: Vec<String>,
    pub psd_repaired: bool,
}

impl EffectsResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    /// Two-sided p-value for a coefficient against zero using a t reference
    /// with G_min - 1 degrees of freedom (the smallest cluster dimension).
    pub fn p_value(&self, name: &str) -> Option<f64> {
        let c = self.coefficient(name)?;
        if !(c.se > 0.0) {
            return None;
        }
        let df = self
            .n_clusters
            .iter()
            .copied()
            .min()
            .unwrap_or(self.n)
            .saturating_sub(1)
            .max(1) as f64;
        let tstat = (c.estimate / c.se).abs();
        let dist = StudentsT::new(0.0, 1.0, df).ok()?;
        Some(2.0 * (1.0 - dist.cdf(tstat)))
    }
}

/// Canonical row order: the regression is invariant to the caller's row
/// order because rows are sorted before any arithmetic.
fn sort_rows(rows: &mut [ExposureRow]) {
    rows.sort_by(|a, b| {
        (
            a.student_id.as_str(),
            a.grade,
            a.school_year,
            a.teacher_id.as_str(),
        )
            .cmp(&(b.student_id.as_str(), b.grade, b.school_year, b.teacher_id.as_str()))
    });
}

/// Estimate the outcome equation on exposure rows.
///
/// `outcome` maps row index (in the caller's order) to the outcome value;
/// rows and outcomes are re-sorted together canonically.
pub fn estimate_effects(
    rows: &[ExposureRow],
    outcome: &[f64],
    outcome_name: &str,
    spec: &EffectsSpec,
) -> Result<EffectsResult> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no exposure rows".into()));
    }
    if rows.len() != outcome.len() {
        return Err(Error::InvalidInput("outcome length mismatch".into()));
    }
    for r in rows {
        if r.covariates.len() != spec.covariate_names.len() {
            return Err(Error::InvalidInput(format!(
                "row for student {} has {} covariates, spec names {}",
                r.student_id,
                r.covariates.len(),
                spec.covariate_names.len()
            )));
        }
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut sortable: Vec<ExposureRow> = rows.to_vec();
    order.sort_by(|&a, &b| {
        let ra = &rows[a];
        let rb = &rows[b];
        (
            ra.student_id.as_str(),
            ra.grade,
            ra.school_year,
            ra.teacher_id.as_str(),
        )
            .cmp(&(
                rb.student_id.as_str(),
                rb.grade,
                rb.school_year,
                rb.teacher_id.as_str(),
            ))
    });
    sort_rows(&mut sortable);
    let y: Vec<f64> = order.iter().map(|&i| outcome[i]).collect();
    let rows = sortable;

    let n = rows.len();
    let (mut ybar_f, mut nf, mut ybar_m, mut nm) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (r, &yy) in rows.iter().zip(&y) {
        if r.female {
            ybar_f += yy;
            nf += 1;
        } else {
            ybar_m += yy;
            nm += 1;
        }
    }
    let ybar_female = if nf > 0 { ybar_f / nf as f64 } else { f64::NAN };
    let ybar_male = if nm > 0 { ybar_m / nm as f64 } else { f64::NAN };

    let female: Vec<f64> = rows.iter().map(|r| f64::from(r.female)).collect();
    let treatment: Vec<f64> = rows.iter().map(|r| r.treatment).collect();
    let interaction: Vec<f64> = rows
        .iter()
        .map(|r| r.treatment * f64::from(r.female))
        .collect();
    let mut columns = vec![
        Column::new("theta_x_female", interaction),
        Column::new("female", female),
        Column::new("theta_star", treatment),
    ];
    for (j, name) in spec.covariate_names.iter().enumerate() {
        columns.push(Column::new(
            name.clone(),
            rows.iter().map(|r| r.covariates[j]).collect::<Vec<f64>>(),
        ));
    }

    // Fixed-effect dimensions; single-level ones are dropped inside the
    // engine with a notice.
    let mut fixed = Vec::new();
    if spec.fe.cohort {
        let codes = regress::dense_codes(&rows.iter().map(|r| r.cohort).collect::<Vec<_>>());
        fixed.push(FixedDim::new("cohort", codes));
    }
    if spec.fe.grade {
        let codes = regress::dense_codes(&rows.iter().map(|r| r.grade).collect::<Vec<_>>());
        fixed.push(FixedDim::new("grade", codes));
    }
    if spec.fe.year {
        let codes =
            regress::dense_codes(&rows.iter().map(|r| r.school_year).collect::<Vec<_>>());
        fixed.push(FixedDim::new("year", codes));
    }
    if spec.fe.school {
        let school_keys: Vec<String> = if spec.school_by_gender {
            rows.iter()
                .map(|r| format!("{}#{}", r.school_id, u8::from(r.female)))
                .collect()
        } else {
            rows.iter().map(|r| r.school_id.clone()).collect()
        };
        let codes = regress::dense_codes(&school_keys);
        fixed.push(FixedDim::new(
            if spec.school_by_gender { "school_x_gender" } else { "school" },
            codes,
        ));
    }
    if fixed.is_empty() {
        // Keep an intercept-equivalent around so slopes stay interpretable.
        fixed.push(FixedDim::new("intercept", vec![0u32; n]));
    }

    let student_codes =
        regress::dense_codes(&rows.iter().map(|r| r.student_id.clone()).collect::<Vec<_>>());
    let school_cluster =
        regress::dense_codes(&rows.iter().map(|r| r.school_id.clone()).collect::<Vec<_>>());
    let cluster = match spec.cluster {
        EffectsCluster::School => ClusterSpec::OneWay(school_cluster),
        EffectsCluster::StudentAndSchool => ClusterSpec::TwoWay(student_codes, school_cluster),
    };

    let fit = regress::fit(&y, &columns, None, &fixed, &cluster, &spec.options)?;
    let fe_names: Vec<String> = fixed.iter().map(|f| f.name.clone()).collect();
    Ok(EffectsResult {
        outcome: outcome_name.to_string(),
        coefficients: fit.coefficients,
        vcov: fit.vcov,
        ybar_female,
        ybar_male,
        n,
        n_clusters: fit.n_clusters,
        fixed_effects: fe_names,
        notices: fit.notices,
        psd_repaired: fit.psd_repaired,
    })
}

/// Empirical quantile of the reference population: q(0) = 0 (everything
/// positive clears it) and q(100) = +inf (nothing does); interior points use
/// the nearest-rank quantile, so thresholds are nondecreasing in p.
pub fn reference_quantile(sorted_reference: &[f64], percentile: f64) -> f64 {
    if percentile <= 0.0 {
        return 0.0;
    }
    if percentile >= 100.0 {
        return f64::INFINITY;
    }
    let n = sorted_reference.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted_reference[rank.clamp(1, n) - 1]
}

/// Threshold regressions over an earnings-percentile grid.
pub fn percentile_effects(
    rows: &[ExposureRow],
    earnings: &[f64],
    reference: &[f64],
    percentiles: &[f64],
    spec: &EffectsSpec,
) -> Result<Vec<(f64, EffectsResult)>> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty reference population".into()));
    }
    if earnings.len() != rows.len() {
        return Err(Error::InvalidInput("earnings length mismatch".into()));
    }
    let mut sorted = reference.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(percentiles.len());
    for &p in percentiles {
        let q = reference_quantile(&sorted, p);
        let outcome: Vec<f64> = earnings.iter().map(|&e| f64::from(e > q)).collect();
        let name = format!("earnings_above_p{p}");
        let result = estimate_effects(rows, &outcome, &name, spec)?;
        out.push((p, result));
    }
    Ok(out)
}

/// Internalization regression: student IAT scores on a teacher-level
/// treatment (teacher IAT or the leave-one-year-out gap), school and grade
/// fixed effects, school-clustered standard errors.
pub fn internalization(
    rows: &[ExposureRow],
    student_iat: &[f64],
    treatment_name: &str,
    spec: &EffectsSpec,
) -> Result<EffectsResult> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("no exposure rows".into()));
    }
    let tvals: Vec<f64> = rows.iter().map(|r| r.treatment).collect();
    let (mean, sd) = crate::panel::moments(&tvals);
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return Err(Error::DegenerateRegressor(treatment_name.to_string()));
    }
    let mut spec = spec.clone();
    spec.cluster = EffectsCluster::School;
    spec.fe = FeSet { cohort: false, grade: true, year: false, school: true };
    let mut result = estimate_effects(rows, student_iat, "student_iat", &spec)?;
    result.outcome = format!("student_iat~{treatment_name}");
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{ScoreObservation, Subject};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(student: &str, teacher: &str, year: i32, t: f64, b: f64) -> ScoreObservation {
        ScoreObservation {
            student_id: student.into(),
            teacher_id: teacher.into(),
            subject: Subject::Math,
            school_year: year,
            teacher_score: t,
            blind_score: b,
            lagged_math: None,
            lagged_language: None,
            lagged_physed: None,
            standardized: false,
        }
    }

    /// Two-year panel; a cohort tied to each year.
    fn two_year_panel(seed: u64) -> (Vec<ScoreObservation>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut female = Vec::new();
        for year in [2015, 2016] {
            for t in 0..6 {
                for s in 0..16 {
                    let f = s % 2 == 0;
                    let e: f64 = rng.gen::<f64>() - 0.5;
                    let e2: f64 = rng.gen::<f64>() - 0.5;
                    let gap = 0.1 * t as f64;
                    rows.push(obs(
                        &format!("i{year}t{t}s{s}"),
                        &format!("t{t}"),
                        year,
                        e + if f { 0.0 } else { gap } + e2,
                        e,
                    ));
                    female.push(f);
                }
            }
        }
        (rows, female)
    }

    fn loo_config(map: &[(i32, &[i32])]) -> LooConfig {
        let cohort_exclusions = map
            .iter()
            .map(|(c, ys)| (*c, ys.iter().copied().collect()))
            .collect();
        LooConfig {
            min_cell: 2,
            covariates: CovariateSpec::default(),
            ..LooConfig::new(cohort_exclusions)
        }
    }

    #[test]
    fn full_exclusion_gives_empty_flagged_treatment() {
        let (rows, female) = two_year_panel(1);
        let single_year: Vec<ScoreObservation> = rows
            .iter()
            .filter(|o| o.school_year == 2015)
            .cloned()
            .collect();
        let single_female: Vec<bool> = rows
            .iter()
            .zip(&female)
            .filter(|(o, _)| o.school_year == 2015)
            .map(|(_, f)| *f)
            .collect();
        let cfg = loo_config(&[(2018, &[2015])]);
        let out = leave_one_year_out(&single_year, &single_female, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].treatment.is_empty());
        assert_eq!(out[0].teachers_missing, 6);
    }

    #[test]
    fn loo_provenance_never_uses_excluded_years() {
        let (rows, female) = two_year_panel(2);
        let cfg = loo_config(&[(2018, &[2015]), (2019, &[2016])]);
        let out = leave_one_year_out(&rows, &female, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for ct in &out {
            assert!(ct.provenance_ok());
            assert!(!ct.treatment.is_empty());
            for years in ct.years_used.values() {
                assert!(years.is_disjoint(&ct.excluded_years));
            }
        }
    }

    #[test]
    fn perturbing_excluded_year_is_bit_invisible() {
        let (rows, female) = two_year_panel(3);
        let cfg = loo_config(&[(2018, &[2015]), (2019, &[2016])]);
        let base = leave_one_year_out(&rows, &female, &cfg).unwrap();
        let mut perturbed_rows = rows.clone();
        for o in perturbed_rows.iter_mut().filter(|o| o.school_year == 2015) {
            o.teacher_score += 17.5;
            o.blind_score -= 3.25;
        }
        let perturbed = leave_one_year_out(&perturbed_rows, &female, &cfg).unwrap();
        // Cohort 2018 excludes 2015: bit-identical treatments.
        let (b, p) = (&base[0], &perturbed[0]);
        assert_eq!(b.cohort, 2018);
        assert_eq!(b.treatment.len(), p.treatment.len());
        for (id, v) in &b.treatment {
            assert_eq!(v.to_bits(), p.treatment[id].to_bits(), "teacher {id}");
        }
        // Cohort 2019 retains 2015: at least one treatment changes.
        let (b, p) = (&base[1], &perturbed[1]);
        assert!(b.treatment.iter().any(|(id, v)| p.treatment[id] != *v));
    }

    #[test]
    fn identical_years_make_loo_redundant() {
        // Duplicate one year's data into a second year: excluding either
        // year reproduces the single-year estimates.
        let (rows, female) = two_year_panel(4);
        let mut cloned: Vec<ScoreObservation> = rows
            .iter()
            .filter(|o| o.school_year == 2015)
            .cloned()
            .collect();
        let n1 = cloned.len();
        let mut cloned_female: Vec<bool> = female[..n1].to_vec();
        for (o, f) in rows.iter().zip(&female).filter(|(o, _)| o.school_year == 2015) {
            let mut o2 = o.clone();
            o2.school_year = 2016;
            o2.student_id = format!("{}b", o.student_id);
            cloned.push(o2);
            cloned_female.push(*f);
        }
        let cfg = loo_config(&[(2018, &[2015])]);
        let loo = leave_one_year_out(&cloned, &cloned_female, &cfg).unwrap();
        let cfg_single = loo_config(&[(2099, &[])]);
        let single = leave_one_year_out(&cloned[..n1].to_vec(), &cloned_female[..n1], &cfg_single)
            .unwrap();
        for (id, v) in &loo[0].treatment {
            let s = single[0].treatment[id];
            assert!((v - s).abs() < 1e-12, "teacher {id}: {v} vs {s}");
        }
    }

    fn simple_rows(n: usize, seed: u64) -> (Vec<ExposureRow>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut outcome = Vec::new();
        for i in 0..n {
            let female = i % 2 == 0;
            let school = format!("s{}", i % 5);
            let treatment = (i % 7) as f64 / 3.0 - 1.0;
            let y = 0.5 + 0.3 * treatment
                + if female { -0.2 * treatment + 0.1 } else { 0.0 }
                + rng.gen::<f64>() * 0.01;
            rows.push(ExposureRow {
                student_id: format!("i{i}"),
                teacher_id: format!("t{}", i % 11),
                school_id: school,
                cohort: 2018 + (i % 2) as i32,
                grade: 8 + (i % 2) as u8,
                school_year: 2015 + (i % 2) as i32,
                female,
                treatment,
                covariates: vec![],
            });
            outcome.push(y);
        }
        (rows, outcome)
    }

    #[test]
    fn constant_outcome_zeroes_all_slopes() {
        let (rows, _) = simple_rows(200, 5);
        let outcome = vec![0.25; 200];
        let fit = estimate_effects(&rows, &outcome, "const", &EffectsSpec::default()).unwrap();
        for c in &fit.coefficients {
            assert!(c.estimate.abs() < 1e-10, "{}={}", c.name, c.estimate);
        }
    }

    #[test]
    fn row_order_is_bitwise_irrelevant() {
        let (rows, outcome) = simple_rows(150, 6);
        let fit1 = estimate_effects(&rows, &outcome, "y", &EffectsSpec::default()).unwrap();
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let rows2: Vec<ExposureRow> = idx.iter().map(|&i| rows[i].clone()).collect();
        let outcome2: Vec<f64> = idx.iter().map(|&i| outcome[i]).collect();
        let fit2 = estimate_effects(&rows2, &outcome2, "y", &EffectsSpec::default()).unwrap();
        for (a, b) in fit1.coefficients.iter().zip(&fit2.coefficients) {
            assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
            assert_eq!(a.se.to_bits(), b.se.to_bits());
        }
    }

    #[test]
    fn group_means_match_hand_sums() {
        let rows = vec![
            ExposureRow {
                student_id: "a".into(),
                teacher_id: "t".into(),
                school_id: "s".into(),
                cohort: 2018,
                grade: 8,
                school_year: 2015,
                female: true,
                treatment: 0.0,
                covariates: vec![],
            },
            ExposureRow {
                student_id: "b".into(),
                teacher_id: "t".into(),
                school_id: "s".into(),
                cohort: 2018,
                grade: 8,
                school_year: 2015,
                female: false,
                treatment: 1.0,
                covariates: vec![],
            },
            ExposureRow {
                student_id: "c".into(),
                teacher_id: "t".into(),
                school_id: "s2".into(),
                cohort: 2019,
                grade: 8,
                school_year: 2015,
                female: true,
                treatment: -1.0,
                covariates: vec![],
            },
        ];
        let outcome = vec![1.0, 0.0, 0.0];
        let fit = estimate_effects(&rows, &outcome, "y", &EffectsSpec {
            cluster: EffectsCluster::School,
            ..EffectsSpec::default()
        })
        .unwrap();
        assert_eq!(fit.ybar_female, 0.5);
        assert_eq!(fit.ybar_male, 0.0);
    }

    #[test]
    fn percentile_grid_is_monotone_and_degenerate_at_ends() {
        let (rows, _) = simple_rows(120, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let earnings: Vec<f64> = (0..120)
            .map(|i| if i % 3 == 0 { 0.0 } else { 50.0 + 400.0 * rng.gen::<f64>() })
            .collect();
        let reference: Vec<f64> = (0..1000).map(|_| 30.0 + 450.0 * rng.gen::<f64>()).collect();
        let spec = EffectsSpec::default();
        let grid = [0.0, 25.0, 50.0, 75.0, 100.0];
        let results = percentile_effects(&rows, &earnings, &reference, &grid, &spec).unwrap();
        // p=0: outcome is exactly the employed-with-positive-earnings flag.
        // p=100: outcome identically zero, so slopes vanish.
        let p100 = &results[4].1;
        for c in &p100.coefficients {
            assert!(c.estimate.abs() < 1e-12);
        }
        // Monotone coding: outcome vectors weakly decrease in p.
        let sorted_ref = {
            let mut r = reference.clone();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r
        };
        for w in grid.windows(2) {
            let q1 = reference_quantile(&sorted_ref, w[0]);
            let q2 = reference_quantile(&sorted_ref, w[1]);
            assert!(q2 >= q1);
            for &e in &earnings {
                assert!(u8::from(e > q2) <= u8::from(e > q1));
            }
        }
    }

    #[test]
    fn empty_reference_is_an_error() {
        let (rows, _) = simple_rows(30, 9);
        let earnings = vec![10.0; 30];
        assert!(percentile_effects(&rows, &earnings, &[], &[50.0], &EffectsSpec::default())
            .is_err());
    }

    #[test]
    fn constant_treatment_is_a_named_degenerate_regressor() {
        let (mut rows, outcome) = simple_rows(60, 10);
        for r in &mut rows {
            r.treatment = 0.7;
        }
        let err = internalization(&rows, &outcome, "teacher_iat", &EffectsSpec::default())
            .unwrap_err();
        match err {
            Error::DegenerateRegressor(name) => assert_eq!(name, "teacher_iat"),
            other => panic!("{other:?}"),
        }
    }
}
