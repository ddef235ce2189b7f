//! Education and labor outcome construction.
//!
//! Labor outcomes follow the dominant-annual-employer convention: within each
//! quarter the employer paying the largest earnings share wins; the annual
//! dominant employer is the one winning the most quarters, with ties broken
//! by total annual earnings and then by smallest employer id. Formal-sector
//! employment in an age bin means at least `spell_window` consecutive months
//! of positive earnings under a formal contract with that year's dominant
//! employer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::types::{AgeBin, EmploymentMonth, LaborCell, OutcomeRecord, StudentRecord};
use crate::{Error, Result};

/// Projected graduation year from enrollment history: the earliest observed
/// (year, grade) pair extrapolated to grade-11 completion.
pub fn projected_graduation_year(history: &[(i32, u8)]) -> Result<i32> {
    let earliest = history.iter().min_by_key(|(year, _)| *year);
    match earliest {
        Some((year, grade)) => Ok(year + (11 - i32::from(*grade))),
        None => Err(Error::MissingHistory("<empty enrollment history>".into())),
    }
}

/// Fill `cohort_projected_grad` on every enrollment row from each student's
/// earliest observed row.
pub fn assign_projected_graduation(students: &mut [StudentRecord]) -> Result<()> {
    let mut history: BTreeMap<&str, (i32, u8)> = BTreeMap::new();
    for s in students.iter() {
        history
            .entry(s.student_id.as_str())
            .and_modify(|e| {
                if s.school_year < e.0 {
                    *e = (s.school_year, s.grade);
                }
            })
            .or_insert((s.school_year, s.grade));
    }
    let projected: BTreeMap<String, i32> = history
        .into_iter()
        .map(|(id, (year, grade))| (id.to_string(), year + (11 - i32::from(grade))))
        .collect();
    for s in students.iter_mut() {
        s.cohort_projected_grad = projected[s.student_id.as_str()];
    }
    Ok(())
}

/// The employer dominating `worker`'s earnings in `year`, or `None` when the
/// worker has no employment rows that year. Not an error: downstream outcome
/// construction codes "no employer" as unemployment.
pub fn dominant_annual_employer(
    months: &[EmploymentMonth],
    worker: &str,
    year: i32,
) -> Option<String> {
    // Quarterly earnings per employer.
    let mut by_quarter: BTreeMap<u8, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut annual: BTreeMap<&str, f64> = BTreeMap::new();
    for m in months {
        if m.worker_id != worker || m.year != year {
            continue;
        }
        *by_quarter
            .entry(m.quarter())
            .or_default()
            .entry(m.employer_id.as_str())
            .or_insert(0.0) += m.earnings_usd2010;
        *annual.entry(m.employer_id.as_str()).or_insert(0.0) += m.earnings_usd2010;
    }
    if annual.is_empty() {
        return None;
    }

    // Quarter winners: largest earnings share, ties to the smallest id.
    let mut quarters_won: BTreeMap<&str, u32> = BTreeMap::new();
    for earners in by_quarter.values() {
        let winner = earners
            .iter()
            .max_by(|(ida, ea), (idb, eb)| {
                ea.partial_cmp(eb)
                    .unwrap()
                    .then_with(|| idb.cmp(ida)) // smaller id wins ties
            })
            .map(|(id, _)| *id)
            .unwrap();
        *quarters_won.entry(winner).or_insert(0) += 1;
    }

    // Annual winner: most quarters, then total annual earnings, then id.
    quarters_won
        .iter()
        .max_by(|(ida, qa), (idb, qb)| {
            qa.cmp(qb)
                .then_with(|| annual[*ida].partial_cmp(&annual[*idb]).unwrap())
                .then_with(|| idb.cmp(ida))
        })
        .map(|(id, _)| id.to_string())
}

/// Options for labor outcome construction.
#[derive(Debug, Clone)]
pub struct LaborOptions {
    /// Minimum run of consecutive qualifying months for formal employment.
    pub spell_window: usize,
}

impl Default for LaborOptions {
    fn default() -> Self {
        LaborOptions { spell_window: 1 }
    }
}

/// Build the per-age-bin labor cells for one worker given their projected
/// graduation year.
pub fn build_labor_outcomes(
    months: &[EmploymentMonth],
    worker: &str,
    projected_grad: i32,
    opts: &LaborOptions,
) -> [LaborCell; 3] {
    let mut cells = [LaborCell::default(); 3];
    for (slot, bin) in AgeBin::ALL.iter().enumerate() {
        let (off0, off1) = bin.year_offsets();
        let years: Vec<i32> = (projected_grad + off0..=projected_grad + off1).collect();

        let mut earnings = Vec::new();
        let mut hours = Vec::new();
        let mut formal_qualifying: BTreeSet<(i32, u8)> = BTreeSet::new();
        for &year in &years {
            let Some(dominant) = dominant_annual_employer(months, worker, year) else {
                continue;
            };
            for m in months {
                if m.worker_id != worker || m.year != year || m.employer_id != dominant {
                    continue;
                }
                earnings.push(m.earnings_usd2010);
                hours.push(m.paid_hours);
                if m.formal_contract && m.earnings_usd2010 > 0.0 {
                    formal_qualifying.insert((m.year, m.month));
                }
            }
        }

        let employed_formal = has_spell(&formal_qualifying, opts.spell_window);
        let cell = &mut cells[slot];
        cell.employed_formal = employed_formal;
        if !earnings.is_empty() {
            let n = earnings.len() as f64;
            let e = earnings.iter().sum::<f64>() / n;
            let h = hours.iter().sum::<f64>() / n;
            cell.earnings_cond = Some(e);
            cell.hours_cond = Some(h);
            cell.earnings_uncond = e;
            cell.hours_uncond = h;
        }
    }
    cells
}

/// True when the month set contains a run of at least `window` consecutive
/// calendar months.
fn has_spell(months: &BTreeSet<(i32, u8)>, window: usize) -> bool {
    if window <= 1 {
        return !months.is_empty();
    }
    let index: Vec<i64> = months
        .iter()
        .map(|(y, m)| i64::from(*y) * 12 + i64::from(*m))
        .collect();
    let mut run = 1usize;
    for w in index.windows(2) {
        if w[1] == w[0] + 1 {
            run += 1;
            if run >= window {
                return true;
            }
        } else {
            run = 1;
        }
    }
    false
}

/// The education half of an outcome record, as read from an outcomes file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EducationOutcomes {
    pub student_id: String,
    pub grad_on_time: bool,
    pub grad_ever: bool,
    pub college_applied_on_time: bool,
    pub college_applied_ever: bool,
    pub college_admitted_on_time: bool,
    pub college_admitted_ever: bool,
    pub college_enrolled_on_time: bool,
    pub college_enrolled_ever: bool,
}

/// Codes graduation flags from an observed graduation year. The horizon,
/// in calendar years after projected graduation, varies by cohort and comes
/// from configuration.
pub fn grad_flags(grad_year: Option<i32>, projected: i32, horizon_years: i32) -> (bool, bool) {
    match grad_year {
        Some(y) => (y == projected, y <= projected + horizon_years),
        None => (false, false),
    }
}

/// Merge education outcomes with labor cells into validated records.
pub fn assemble_outcomes(
    education: &[EducationOutcomes],
    labor: &BTreeMap<String, [LaborCell; 3]>,
) -> Result<Vec<OutcomeRecord>> {
    let mut out = Vec::with_capacity(education.len());
    for e in education {
        let rec = OutcomeRecord {
            student_id: e.student_id.clone(),
            grad_on_time: e.grad_on_time,
            grad_ever: e.grad_ever,
            college_applied_on_time: e.college_applied_on_time,
            college_applied_ever: e.college_applied_ever,
            college_admitted_on_time: e.college_admitted_on_time,
            college_admitted_ever: e.college_admitted_ever,
            college_enrolled_on_time: e.college_enrolled_on_time,
            college_enrolled_ever: e.college_enrolled_ever,
            labor: labor
                .get(&e.student_id)
                .copied()
                .unwrap_or([LaborCell::default(); 3]),
        };
        rec.validate()
            .map_err(|m| Error::InvalidInput(format!("student {}: {m}", e.student_id)))?;
        out.push(rec);
    }
    Ok(out)
}

const EDUCATION_HEADER: [&str; 9] = [
    "student_id",
    "grad_on_time",
    "grad_ever",
    "college_applied_on_time",
    "college_applied_ever",
    "college_admitted_on_time",
    "college_admitted_ever",
    "college_enrolled_on_time",
    "college_enrolled_ever",
];

pub fn write_education_outcomes(path: &Path, rows: &[EducationOutcomes]) -> Result<()> {
    let mut w = crate::table::writer(path)?;
    crate::table::write_record(&mut w, path, EDUCATION_HEADER.iter().copied())?;
    for r in rows {
        let fields = [
            r.student_id.clone(),
            r.grad_on_time.to_string(),
            r.grad_ever.to_string(),
            r.college_applied_on_time.to_string(),
            r.college_applied_ever.to_string(),
            r.college_admitted_on_time.to_string(),
            r.college_admitted_ever.to_string(),
            r.college_enrolled_on_time.to_string(),
            r.college_enrolled_ever.to_string(),
        ];
        crate::table::write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    crate::table::flush(w, path)
}

pub fn read_education_outcomes(path: &Path) -> Result<Vec<EducationOutcomes>> {
    let mut reader = crate::table::reader(path)?;
    let mut out = Vec::new();
    let parse_bool = |v: &str| v.trim() == "true" || v.trim() == "1";
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: (idx + 2) as u64,
            message: e.to_string(),
        })?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        out.push(EducationOutcomes {
            student_id: get(0),
            grad_on_time: parse_bool(&get(1)),
            grad_ever: parse_bool(&get(2)),
            college_applied_on_time: parse_bool(&get(3)),
            college_applied_ever: parse_bool(&get(4)),
            college_admitted_on_time: parse_bool(&get(5)),
            college_admitted_ever: parse_bool(&get(6)),
            college_enrolled_on_time: parse_bool(&get(7)),
            college_enrolled_ever: parse_bool(&get(8)),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_year_from_grade_seven() {
        // Enrollment in grade 7 during 2015 projects graduation in 2019.
        assert_eq!(projected_graduation_year(&[(2015, 7)]).unwrap(), 2019);
    }

    #[test]
    fn projected_year_zero_extrapolation() {
        assert_eq!(projected_graduation_year(&[(2019, 11)]).unwrap(), 2019);
    }

    #[test]
    fn projected_year_uses_earliest_row() {
        assert_eq!(
            projected_graduation_year(&[(2016, 8), (2018, 10)]).unwrap(),
            2019
        );
        // Permutation-invariant.
        assert_eq!(
            projected_graduation_year(&[(2018, 10), (2016, 8)]).unwrap(),
            2019
        );
    }

    #[test]
    fn projected_year_missing_history() {
        assert!(projected_graduation_year(&[]).is_err());
    }

    fn month(
        worker: &str,
        employer: &str,
        year: i32,
        month_no: u8,
        earnings: f64,
        formal: bool,
    ) -> EmploymentMonth {
        EmploymentMonth {
            worker_id: worker.into(),
            employer_id: employer.into(),
            year,
            month: month_no,
            earnings_usd2010: earnings,
            paid_hours: 100.0,
            formal_contract: formal,
        }
    }

    #[test]
    fn single_employer_dominates() {
        let months = vec![month("w", "acme", 2020, 1, 100.0, true)];
        assert_eq!(
            dominant_annual_employer(&months, "w", 2020),
            Some("acme".into())
        );
        assert_eq!(dominant_annual_employer(&months, "w", 2021), None);
    }

    #[test]
    fn quarter_majority_beats_single_big_quarter() {
        // A earns 100 in each of Q1-Q3; B earns 500 in Q4.
        let months = vec![
            month("w", "a", 2020, 1, 100.0, true),
            month("w", "a", 2020, 4, 100.0, true),
            month("w", "a", 2020, 7, 100.0, true),
            month("w", "b", 2020, 10, 500.0, true),
        ];
        assert_eq!(dominant_annual_employer(&months, "w", 2020), Some("a".into()));
    }

    #[test]
    fn quarter_ties_break_on_earnings_then_id() {
        // Each employer wins two quarters; b out-earns a annually.
        let months = vec![
            month("w", "a", 2020, 1, 100.0, true),
            month("w", "a", 2020, 4, 100.0, true),
            month("w", "b", 2020, 7, 150.0, true),
            month("w", "b", 2020, 10, 150.0, true),
        ];
        assert_eq!(dominant_annual_employer(&months, "w", 2020), Some("b".into()));
        // Fully symmetric earnings: lexicographically smallest id wins.
        let months = vec![
            month("w", "b", 2020, 1, 100.0, true),
            month("w", "b", 2020, 4, 100.0, true),
            month("w", "a", 2020, 7, 100.0, true),
            month("w", "a", 2020, 10, 100.0, true),
        ];
        assert_eq!(dominant_annual_employer(&months, "w", 2020), Some("a".into()));
    }

    #[test]
    fn dominant_employer_scale_invariant() {
        let base = vec![
            month("w", "a", 2020, 1, 120.0, true),
            month("w", "b", 2020, 2, 80.0, true),
            month("w", "b", 2020, 5, 300.0, true),
        ];
        let scaled: Vec<EmploymentMonth> = base
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.earnings_usd2010 *= 7.5;
                m
            })
            .collect();
        assert_eq!(
            dominant_annual_employer(&base, "w", 2020),
            dominant_annual_employer(&scaled, "w", 2020)
        );
    }

    #[test]
    fn labor_outcomes_empty_and_single_month() {
        let opts = LaborOptions::default();
        let cells = build_labor_outcomes(&[], "w", 2019, &opts);
        assert!(!cells[0].employed_formal);
        assert_eq!(cells[0].earnings_uncond, 0.0);
        assert_eq!(cells[0].earnings_cond, None);

        // One formal month at 200 USD / 100 hours inside ages 18-19.
        let months = vec![month("w", "a", 2020, 3, 200.0, true)];
        let cells = build_labor_outcomes(&months, "w", 2019, &opts);
        assert!(cells[0].employed_formal);
        assert_eq!(cells[0].earnings_cond, Some(200.0));
        assert_eq!(cells[0].hours_cond, Some(100.0));
    }

    #[test]
    fn conditional_mean_over_dominant_months() {
        let opts = LaborOptions::default();
        let mut months = Vec::new();
        for m in 1..=12u8 {
            let pay = if m % 2 == 0 { 100.0 } else { 300.0 };
            months.push(month("w", "a", 2020, m, pay, true));
        }
        let cells = build_labor_outcomes(&months, "w", 2019, &opts);
        assert_eq!(cells[0].earnings_cond, Some(200.0));
        assert!(cells[0].employed_formal);
    }

    #[test]
    fn informal_or_zero_earnings_do_not_count_as_formal() {
        let opts = LaborOptions::default();
        let months = vec![month("w", "a", 2020, 3, 200.0, false)];
        let cells = build_labor_outcomes(&months, "w", 2019, &opts);
        assert!(!cells[0].employed_formal);
        // Earnings still measured with the dominant employer.
        assert_eq!(cells[0].earnings_cond, Some(200.0));
    }

    #[test]
    fn spell_window_needs_consecutive_months() {
        let mut opts = LaborOptions::default();
        opts.spell_window = 2;
        let gap = vec![
            month("w", "a", 2020, 1, 50.0, true),
            month("w", "a", 2020, 3, 50.0, true),
        ];
        assert!(!build_labor_outcomes(&gap, "w", 2019, &opts)[0].employed_formal);
        let run = vec![
            month("w", "a", 2020, 1, 50.0, true),
            month("w", "a", 2020, 2, 50.0, true),
        ];
        assert!(build_labor_outcomes(&run, "w", 2019, &opts)[0].employed_formal);
    }

    #[test]
    fn grad_flags_follow_horizon() {
        assert_eq!(grad_flags(Some(2019), 2019, 2), (true, true));
        assert_eq!(grad_flags(Some(2021), 2019, 2), (false, true));
        assert_eq!(grad_flags(Some(2022), 2019, 2), (false, false));
        assert_eq!(grad_flags(None, 2019, 2), (false, false));
    }

    #[test]
    fn outcome_ladder_is_validated() {
        let edu = EducationOutcomes {
            student_id: "s".into(),
            grad_on_time: true,
            grad_ever: false,
            college_applied_on_time: false,
            college_applied_ever: false,
            college_admitted_on_time: false,
            college_admitted_ever: false,
            college_enrolled_on_time: false,
            college_enrolled_ever: false,
        };
        let labor = BTreeMap::new();
        assert!(assemble_outcomes(&[edu], &labor).is_err());
    }
}
