//! Distributional summaries of the gap estimates and predictor regressions.
//!
//! The bias-corrected variance subtracts average squared standard errors
//! from the observed dispersion of the estimates, unweighted
//!
//! ```text
//! var_U = J^-1 sum_j [ (theta_j - mu)^2 - s_j^2 ]
//! ```
//!
//! and student-weighted with w_j = N(j)/N,
//!
//! ```text
//! var_W = sum_j w_j (theta_j - mu)^2 - sum_j w_j s_j^2
//! ```
//!
//! where mu is the unweighted mean in both. Negative corrected variances are
//! floored at zero and flagged.

use std::collections::BTreeMap;

use crate::gaps::TeacherGapEstimate;
use crate::panel::{ExperienceBand, Subject, TeacherRecord};
use crate::regress::{self, ClusterSpec, Coefficient, Column, FitOptions, FixedDim};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct VarianceDecomposition {
    pub subject: Subject,
    pub unadjusted_mean: f64,
    /// Bias-corrected variances after flooring, and their square roots.
    pub var_unweighted: f64,
    pub var_weighted: f64,
    pub sd_unweighted: f64,
    pub sd_weighted: f64,
    pub floored_unweighted: bool,
    pub floored_weighted: bool,
    pub n_teachers: usize,
    pub total_students: usize,
}

pub fn variance_decomposition(gaps: &[TeacherGapEstimate]) -> Result<VarianceDecomposition> {
    let j = gaps.len();
    if j < 2 {
        return Err(Error::InvalidInput(format!(
            "variance decomposition needs at least 2 teachers, have {j}"
        )));
    }
    let subject = gaps[0].subject;
    if gaps.iter().any(|g| g.subject != subject) {
        return Err(Error::InvalidInput(
            "variance decomposition runs one subject at a time".into(),
        ));
    }
    // Fixed summation order: the result is bit-identical for any input
    // ordering.
    let gaps = {
        let mut sorted: Vec<&TeacherGapEstimate> = gaps.iter().collect();
        sorted.sort_by(|a, b| a.teacher_id.cmp(&b.teacher_id));
        sorted
    };
    let gaps = gaps.as_slice();
    let jf = j as f64;
    let mu = gaps.iter().map(|g| g.theta_hat).sum::<f64>() / jf;

    let raw_u = gaps
        .iter()
        .map(|g| (g.theta_hat - mu).powi(2) - g.se * g.se)
        .sum::<f64>()
        / jf;

    let total_students: usize = gaps.iter().map(|g| g.n_students).sum();
    let nf = total_students as f64;
    let mut raw_w = 0.0;
    for g in gaps {
        let w = g.n_students as f64 / nf;
        raw_w += w * ((g.theta_hat - mu).powi(2) - g.se * g.se);
    }

    let floored_unweighted = raw_u < 0.0;
    let floored_weighted = raw_w < 0.0;
    let var_unweighted = raw_u.max(0.0);
    let var_weighted = raw_w.max(0.0);
    Ok(VarianceDecomposition {
        subject,
        unadjusted_mean: mu,
        var_unweighted,
        var_weighted,
        sd_unweighted: var_unweighted.sqrt(),
        sd_weighted: var_weighted.sqrt(),
        floored_unweighted,
        floored_weighted,
        n_teachers: j,
        total_students,
    })
}

/// Teacher-level weighting rule for predictor regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightRule {
    /// Precision weights 1/s_j^2 (default).
    #[default]
    InverseVariance,
    /// 1/s_j.
    InverseSe,
    Unweighted,
}

impl WeightRule {
    fn weight(&self, se: f64) -> f64 {
        match self {
            WeightRule::InverseVariance => 1.0 / (se * se),
            WeightRule::InverseSe => 1.0 / se,
            WeightRule::Unweighted => 1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WeightRule::InverseVariance => "1/s^2",
            WeightRule::InverseSe => "1/s",
            WeightRule::Unweighted => "none",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictorSpec {
    pub weight: WeightRule,
    /// Divisor applied to the outcome, normally the bias-corrected
    /// student-weighted standard deviation of the subject.
    pub scale_sd: f64,
}

#[derive(Debug, Clone)]
pub struct PredictorRegressionResult {
    pub coefficients: Vec<Coefficient>,
    pub fixed_effects: Vec<String>,
    pub weighting: String,
    pub r_squared: f64,
    pub n: usize,
    /// Gap estimates without a matching covariate record.
    pub excluded_unmatched: usize,
    pub notices: Vec<String>,
}

/// Regression of scaled gap estimates on teacher characteristics, school
/// fixed effects absorbed, missing-value dummies added, standard errors
/// clustered at the school.
pub fn characteristics_regression(
    gaps: &[TeacherGapEstimate],
    teachers: &[TeacherRecord],
    spec: &PredictorSpec,
) -> Result<PredictorRegressionResult> {
    if spec.scale_sd <= 0.0 {
        return Err(Error::InvalidInput("scale_sd must be positive".into()));
    }
    let by_id: BTreeMap<(&str, Subject), &TeacherRecord> = teachers
        .iter()
        .map(|t| ((t.teacher_id.as_str(), t.subject), t))
        .collect();

    let mut matched: Vec<(&TeacherGapEstimate, &TeacherRecord)> = Vec::new();
    let mut excluded_unmatched = 0usize;
    for g in gaps {
        match by_id.get(&(g.teacher_id.as_str(), g.subject)) {
            Some(t) => matched.push((g, t)),
            None => excluded_unmatched += 1,
        }
    }
    if matched.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "too few matched teachers: {}",
            matched.len()
        )));
    }

    let n = matched.len();
    let median_age = {
        let mut ages: Vec<i32> = matched.iter().map(|(_, t)| t.age_years).collect();
        ages.sort_unstable();
        ages[n / 2]
    };

    let y: Vec<f64> = matched
        .iter()
        .map(|(g, _)| g.theta_hat / spec.scale_sd)
        .collect();
    let weights: Vec<f64> = matched.iter().map(|(g, _)| spec.weight.weight(g.se)).collect();

    let mut columns: Vec<Column> = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&TeacherRecord) -> f64| {
        columns.push(Column::new(
            name,
            matched.iter().map(|(_, t)| f(t)).collect::<Vec<f64>>(),
        ));
    };
    push("female", &|t| f64::from(t.female));
    push("age_over_median", &|t| f64::from(t.age_years > median_age));
    push("higher_ed_university", &|t| f64::from(t.higher_ed_university));
    for band in [
        ExperienceBand::LessThan2,
        ExperienceBand::TwoToFive,
        ExperienceBand::SixToTen,
        ExperienceBand::MoreThanTen,
    ] {
        let label = band.as_str().replace(['<', '>'], "").replace('-', "_");
        push(&format!("exp_private_{label}"), &|t| {
            f64::from(t.experience_private_band == band)
        });
        push(&format!("exp_public_{label}"), &|t| {
            f64::from(t.experience_public_band == band)
        });
    }
    push("eval_zscore", &|t| t.eval_zscore.unwrap_or(0.0));
    push("eval_zscore_missing", &|t| f64::from(t.eval_zscore.is_none()));
    push("eval_passed", &|t| f64::from(t.eval_passed.unwrap_or(false)));
    push("eval_passed_missing", &|t| f64::from(t.eval_passed.is_none()));

    let school_keys: Vec<&str> = matched.iter().map(|(_, t)| t.school_id.as_str()).collect();
    let school_codes = regress::dense_codes(&school_keys);
    let fixed = vec![FixedDim::new("school", school_codes.clone())];

    let fit = regress::fit(
        &y,
        &columns,
        Some(&weights),
        &fixed,
        &ClusterSpec::OneWay(school_codes),
        &FitOptions::default(),
    )?;

    Ok(PredictorRegressionResult {
        coefficients: fit.coefficients,
        fixed_effects: vec!["school".into()],
        weighting: spec.weight.as_str().into(),
        r_squared: fit.r2_within,
        n,
        excluded_unmatched,
        notices: fit.notices,
    })
}

/// Regression of scaled gap estimates on a standardized IAT score with
/// school-location fixed effects and optional extra covariates; standard
/// errors clustered by school location.
pub fn iat_relation_regression(
    gaps: &[TeacherGapEstimate],
    iat: &BTreeMap<String, f64>,
    locations: &BTreeMap<String, String>,
    extra: &[(String, BTreeMap<String, f64>)],
    spec: &PredictorSpec,
) -> Result<PredictorRegressionResult> {
    if spec.scale_sd <= 0.0 {
        return Err(Error::InvalidInput("scale_sd must be positive".into()));
    }
    let mut rows: Vec<(&TeacherGapEstimate, f64, &str)> = Vec::new();
    let mut excluded_unmatched = 0usize;
    for g in gaps {
        match (iat.get(&g.teacher_id), locations.get(&g.teacher_id)) {
            (Some(&score), Some(loc)) => rows.push((g, score, loc.as_str())),
            _ => excluded_unmatched += 1,
        }
    }
    if rows.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "too few teachers with IAT scores: {}",
            rows.len()
        )));
    }
    let scores: Vec<f64> = rows.iter().map(|(_, s, _)| *s).collect();
    let (_, sd) = crate::panel::moments(&scores);
    if sd == 0.0 {
        return Err(Error::DegenerateRegressor("iat_score".into()));
    }

    let y: Vec<f64> = rows.iter().map(|(g, _, _)| g.theta_hat / spec.scale_sd).collect();
    let weights: Vec<f64> = rows.iter().map(|(g, _, _)| spec.weight.weight(g.se)).collect();

    let mut columns = vec![Column::new("iat_score", scores)];
    for (name, map) in extra {
        let values: Vec<f64> = rows
            .iter()
            .map(|(g, _, _)| map.get(&g.teacher_id).copied().unwrap_or(0.0))
            .collect();
        columns.push(Column::new(name.clone(), values));
    }

    let loc_keys: Vec<&str> = rows.iter().map(|(_, _, l)| *l).collect();
    let loc_codes = regress::dense_codes(&loc_keys);
    let fixed = vec![FixedDim::new("school_location", loc_codes.clone())];

    let fit = regress::fit(
        &y,
        &columns,
        Some(&weights),
        &fixed,
        &ClusterSpec::OneWay(loc_codes),
        &FitOptions::default(),
    )?;

    Ok(PredictorRegressionResult {
        coefficients: fit.coefficients,
        fixed_effects: vec!["school_location".into()],
        weighting: spec.weight.as_str().into(),
        r_squared: fit.r2_within,
        n: rows.len(),
        excluded_unmatched,
        notices: fit.notices,
    })
}

/// Pairwise relation of gap estimates across subjects for teachers observed
/// in both: OLS slope and plain correlation.
#[derive(Debug, Clone)]
pub struct CrossSubjectCell {
    pub subject_a: Subject,
    pub subject_b: Subject,
    pub slope: f64,
    pub correlation: f64,
    pub n_teachers: usize,
}

pub fn cross_subject_report(gaps: &[TeacherGapEstimate]) -> Vec<CrossSubjectCell> {
    let mut by_subject: BTreeMap<Subject, BTreeMap<&str, f64>> = BTreeMap::new();
    for g in gaps {
        by_subject
            .entry(g.subject)
            .or_default()
            .insert(g.teacher_id.as_str(), g.theta_hat);
    }
    let subjects: Vec<Subject> = by_subject.keys().copied().collect();
    let mut out = Vec::new();
    for (i, &sa) in subjects.iter().enumerate() {
        for &sb in subjects.iter().skip(i + 1) {
            let a = &by_subject[&sa];
            let b = &by_subject[&sb];
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (id, &va) in a {
                if let Some(&vb) = b.get(id) {
                    xs.push(va);
                    ys.push(vb);
                }
            }
            if xs.len() < 3 {
                continue;
            }
            let (mx, sx) = crate::panel::moments(&xs);
            let (my, sy) = crate::panel::moments(&ys);
            if sx == 0.0 || sy == 0.0 {
                continue;
            }
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / xs.len() as f64;
            out.push(CrossSubjectCell {
                subject_a: sa,
                subject_b: sb,
                slope: cov / (sx * sx),
                correlation: cov / (sx * sy),
                n_teachers: xs.len(),
            });
        }
    }
    out
}
