use std::fmt;

use serde::{Deserialize, Serialize};

/// Course subject of a score observation or a teacher appointment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Math,
    LanguageArts,
    Science,
}

impl Subject {
    pub const ALL: [Subject; 3] = [Subject::Math, Subject::LanguageArts, Subject::Science];

    pub fn parse(s: &str) -> Option<Subject> {
        match s.trim().to_ascii_lowercase().as_str() {
            "math" | "mathematics" => Some(Subject::Math),
            "language_arts" | "language" | "language arts" => Some(Subject::LanguageArts),
            "science" => Some(Subject::Science),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Subject::Math => "math",
            Subject::LanguageArts => "language_arts",
            Subject::Science => "science",
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One enrollment row: a student observed in a grade during a school year.
///
/// `cohort_projected_grad` is derived from the student's earliest enrollment
/// row, not read from the file; it is zero until
/// [`assign_projected_graduation`](super::outcomes::assign_projected_graduation)
/// runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_id: String,
    pub female: bool,
    pub age_months: i32,
    pub birthplace_code: String,
    pub language_code: String,
    pub mother_education: Option<String>,
    pub cct_flag: Option<bool>,
    pub school_id: String,
    pub classroom_id: String,
    /// Grade in 7..=11.
    pub grade: u8,
    pub school_year: i32,
    pub cohort_projected_grad: i32,
}

/// One student x teacher x subject x year score pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreObservation {
    pub student_id: String,
    pub teacher_id: String,
    pub subject: Subject,
    pub school_year: i32,
    /// Teacher-assigned examination score.
    pub teacher_score: f64,
    /// Blindly graded standardized score.
    pub blind_score: f64,
    pub lagged_math: Option<f64>,
    pub lagged_language: Option<f64>,
    /// Lagged physical-education score, a behavior proxy.
    pub lagged_physed: Option<f64>,
    pub standardized: bool,
}

impl ScoreObservation {
    /// Uniqueness key for the row.
    pub fn key(&self) -> (String, String, Subject, i32) {
        (
            self.student_id.clone(),
            self.teacher_id.clone(),
            self.subject,
            self.school_year,
        )
    }
}

/// Contract category of a teacher appointment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractType {
    Tenured,
    FixedTerm,
    Other,
}

impl ContractType {
    pub fn parse(s: &str) -> Option<ContractType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tenured" => Some(ContractType::Tenured),
            "fixed_term" | "fixed-term" => Some(ContractType::FixedTerm),
            "other" => Some(ContractType::Other),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ContractType::Tenured => "tenured",
            ContractType::FixedTerm => "fixed_term",
            ContractType::Other => "other",
        }
    }
}

/// Years-of-experience band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperienceBand {
    None,
    LessThan2,
    TwoToFive,
    SixToTen,
    MoreThanTen,
}

impl ExperienceBand {
    pub const ALL: [ExperienceBand; 5] = [
        ExperienceBand::None,
        ExperienceBand::LessThan2,
        ExperienceBand::TwoToFive,
        ExperienceBand::SixToTen,
        ExperienceBand::MoreThanTen,
    ];

    pub fn parse(s: &str) -> Option<ExperienceBand> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "no_experience" => Some(ExperienceBand::None),
            "<2" | "less_than_2" => Some(ExperienceBand::LessThan2),
            "2-5" | "2_5" => Some(ExperienceBand::TwoToFive),
            "6-10" | "6_10" => Some(ExperienceBand::SixToTen),
            ">10" | "more_than_10" => Some(ExperienceBand::MoreThanTen),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperienceBand::None => "none",
            ExperienceBand::LessThan2 => "<2",
            ExperienceBand::TwoToFive => "2-5",
            ExperienceBand::SixToTen => "6-10",
            ExperienceBand::MoreThanTen => ">10",
        }
    }
}

/// One teacher's administrative record for a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub teacher_id: String,
    pub subject: Subject,
    pub female: bool,
    pub age_years: i32,
    pub contract_type: ContractType,
    pub experience_public_band: ExperienceBand,
    pub experience_private_band: ExperienceBand,
    pub higher_ed_university: bool,
    pub eval_zscore: Option<f64>,
    pub eval_passed: Option<bool>,
    pub school_id: String,
}

/// One month of a worker-employer relation from employment records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmploymentMonth {
    /// Equals the former student's id.
    pub worker_id: String,
    pub employer_id: String,
    pub year: i32,
    /// Calendar month in 1..=12.
    pub month: u8,
    pub earnings_usd2010: f64,
    pub paid_hours: f64,
    pub formal_contract: bool,
}

impl EmploymentMonth {
    /// Key by (worker, employer, month): one row per relation per month.
    pub fn key(&self) -> (String, String, i32, u8) {
        (
            self.worker_id.clone(),
            self.employer_id.clone(),
            self.year,
            self.month,
        )
    }

    pub fn quarter(&self) -> u8 {
        (self.month - 1) / 3 + 1
    }
}

/// Post-schooling age window over which labor outcomes are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBin {
    Age18To19,
    Age20To21,
    Age22To23,
}

impl AgeBin {
    pub const ALL: [AgeBin; 3] = [AgeBin::Age18To19, AgeBin::Age20To21, AgeBin::Age22To23];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgeBin::Age18To19 => "18-19",
            AgeBin::Age20To21 => "20-21",
            AgeBin::Age22To23 => "22-23",
        }
    }

    /// Offsets in calendar years after the projected graduation year that
    /// the bin spans, inclusive. Modal graduates turn 18 the year after
    /// their projected graduation.
    pub fn year_offsets(&self) -> (i32, i32) {
        match self {
            AgeBin::Age18To19 => (1, 2),
            AgeBin::Age20To21 => (3, 4),
            AgeBin::Age22To23 => (5, 6),
        }
    }
}

impl fmt::Display for AgeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labor-market summary for one worker over one age bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LaborCell {
    /// Formal contract with the dominant annual employer, positive earnings,
    /// at least one month in the bin.
    pub employed_formal: bool,
    /// Mean monthly earnings over months with the dominant employer; 0 when
    /// never employed in the bin.
    pub earnings_uncond: f64,
    /// Same mean, but only defined when employed.
    pub earnings_cond: Option<f64>,
    pub hours_uncond: f64,
    pub hours_cond: Option<f64>,
}

/// Education and labor outcomes for one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub student_id: String,
    pub grad_on_time: bool,
    pub grad_ever: bool,
    pub college_applied_on_time: bool,
    pub college_applied_ever: bool,
    pub college_admitted_on_time: bool,
    pub college_admitted_ever: bool,
    pub college_enrolled_on_time: bool,
    pub college_enrolled_ever: bool,
    /// Indexed in `AgeBin::ALL` order.
    pub labor: [LaborCell; 3],
}

impl OutcomeRecord {
    pub fn labor_cell(&self, bin: AgeBin) -> &LaborCell {
        let idx = AgeBin::ALL.iter().position(|b| *b == bin).unwrap();
        &self.labor[idx]
    }

    /// Logical consistency of the on-time/ever ladders.
    pub fn validate(&self) -> Result<(), String> {
        if self.grad_on_time && !self.grad_ever {
            return Err("grad_on_time implies grad_ever".into());
        }
        for (applied, admitted, enrolled, tag) in [
            (
                self.college_applied_on_time,
                self.college_admitted_on_time,
                self.college_enrolled_on_time,
                "on_time",
            ),
            (
                self.college_applied_ever,
                self.college_admitted_ever,
                self.college_enrolled_ever,
                "ever",
            ),
        ] {
            if admitted && !applied {
                return Err(format!("admitted implies applied ({tag})"));
            }
            if enrolled && !admitted {
                return Err(format!("enrolled implies admitted ({tag})"));
            }
        }
        Ok(())
    }
}
