//! Data model, ingestion, standardization, and outcome construction.

pub mod load;
pub mod outcomes;
pub mod schema;
pub mod standardize;
pub mod types;

use std::path::Path;

pub use load::{load_panel, LoadedPanel, Panel, Reject};
pub use outcomes::{
    assemble_outcomes, assign_projected_graduation, build_labor_outcomes,
    dominant_annual_employer, grad_flags, projected_graduation_year, read_education_outcomes,
    write_education_outcomes, EducationOutcomes, LaborOptions,
};
pub use schema::{PanelFiles, PanelSchema, RecordKind};
pub use standardize::{moments, standardize_scores};
pub use types::*;

use crate::table::{flush, fmt_f64, write_record, writer};
use crate::Result;

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f64(v: &Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_students(path: &Path, rows: &[StudentRecord]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(
        &mut w,
        path,
        [
            "student_id",
            "female",
            "age_months",
            "birthplace_code",
            "language_code",
            "mother_education",
            "cct_flag",
            "school_id",
            "classroom_id",
            "grade",
            "school_year",
        ],
    )?;
    for r in rows {
        let fields = [
            r.student_id.clone(),
            r.female.to_string(),
            r.age_months.to_string(),
            r.birthplace_code.clone(),
            r.language_code.clone(),
            opt_str(&r.mother_education),
            opt_str(&r.cct_flag),
            r.school_id.clone(),
            r.classroom_id.clone(),
            r.grade.to_string(),
            r.school_year.to_string(),
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

pub fn write_scores(path: &Path, rows: &[ScoreObservation]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(
        &mut w,
        path,
        [
            "student_id",
            "teacher_id",
            "subject",
            "school_year",
            "teacher_score",
            "blind_score",
            "lagged_math",
            "lagged_language",
            "lagged_physed",
            "standardized",
        ],
    )?;
    for r in rows {
        let fields = [
            r.student_id.clone(),
            r.teacher_id.clone(),
            r.subject.to_string(),
            r.school_year.to_string(),
            fmt_f64(r.teacher_score),
            fmt_f64(r.blind_score),
            opt_f64(&r.lagged_math),
            opt_f64(&r.lagged_language),
            opt_f64(&r.lagged_physed),
            r.standardized.to_string(),
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

pub fn write_teachers(path: &Path, rows: &[TeacherRecord]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(
        &mut w,
        path,
        [
            "teacher_id",
            "subject",
            "female",
            "age_years",
            "contract_type",
            "experience_public_band",
            "experience_private_band",
            "higher_ed_university",
            "eval_zscore",
            "eval_passed",
            "school_id",
        ],
    )?;
    for r in rows {
        let fields = [
            r.teacher_id.clone(),
            r.subject.to_string(),
            r.female.to_string(),
            r.age_years.to_string(),
            r.contract_type.as_str().to_string(),
            r.experience_public_band.as_str().to_string(),
            r.experience_private_band.as_str().to_string(),
            r.higher_ed_university.to_string(),
            opt_f64(&r.eval_zscore),
            opt_str(&r.eval_passed),
            r.school_id.clone(),
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

pub fn write_employment(path: &Path, rows: &[EmploymentMonth]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(
        &mut w,
        path,
        [
            "worker_id",
            "employer_id",
            "year",
            "month",
            "earnings_usd2010",
            "paid_hours",
            "formal_contract",
        ],
    )?;
    for r in rows {
        let fields = [
            r.worker_id.clone(),
            r.employer_id.clone(),
            r.year.to_string(),
            r.month.to_string(),
            fmt_f64(r.earnings_usd2010),
            fmt_f64(r.paid_hours),
            r.formal_contract.to_string(),
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

/// Standard-normal draw for test fixtures.
#[cfg(test)]
pub(crate) fn tests_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(&mut w, path, ["file", "line", "reason"])?;
    for r in rejects {
        let fields = [r.file.clone(), r.line.to_string(), r.reason.clone()];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}
