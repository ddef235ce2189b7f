//! Delimited-file ingestion with per-row validation and a rejects report.

use std::collections::BTreeSet;
use std::path::Path;

use csv::StringRecord;

use super::schema::{PanelSchema, RecordKind};
use super::types::*;
use crate::{Error, Result};

/// All record collections of one panel directory.
#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub students: Vec<StudentRecord>,
    pub scores: Vec<ScoreObservation>,
    pub teachers: Vec<TeacherRecord>,
    pub employment: Vec<EmploymentMonth>,
}

/// One row that failed domain validation. Rejected rows are reported, never
/// silently dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedPanel {
    pub panel: Panel,
    pub rejects: Vec<Reject>,
}

/// Load every record kind from `dir` according to `schema`.
///
/// Students, scores, and teachers files are required; the employment file is
/// optional (panels without labor records are legal). Rows violating field
/// domains land in the rejects report; duplicate key tuples abort the load.
pub fn load_panel(dir: &Path, schema: &PanelSchema) -> Result<LoadedPanel> {
    let mut out = LoadedPanel::default();

    let students_path = dir.join(&schema.files.students);
    let scores_path = dir.join(&schema.files.scores);
    let teachers_path = dir.join(&schema.files.teachers);
    let employment_path = dir.join(&schema.files.employment);

    read_rows(&students_path, schema, RecordKind::Students, &mut out.rejects, |row| {
        out.panel.students.push(row);
    })?;
    read_rows(&scores_path, schema, RecordKind::Scores, &mut out.rejects, |row| {
        out.panel.scores.push(row);
    })?;
    read_rows(&teachers_path, schema, RecordKind::Teachers, &mut out.rejects, |row| {
        out.panel.teachers.push(row);
    })?;
    if employment_path.exists() {
        read_rows(&employment_path, schema, RecordKind::Employment, &mut out.rejects, |row| {
            out.panel.employment.push(row);
        })?;
    }

    check_duplicates(&out.panel)?;
    Ok(out)
}

fn check_duplicates(panel: &Panel) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for s in &panel.scores {
        if !seen.insert(s.key()) {
            dups.push(format!(
                "(student={}, teacher={}, subject={}, year={})",
                s.student_id, s.teacher_id, s.subject, s.school_year
            ));
        }
    }
    let mut seen_emp = BTreeSet::new();
    for e in &panel.employment {
        if !seen_emp.insert(e.key()) {
            dups.push(format!(
                "(worker={}, employer={}, month={}-{:02})",
                e.worker_id, e.employer_id, e.year, e.month
            ));
        }
    }
    if dups.is_empty() {
        Ok(())
    } else {
        Err(Error::DuplicateKey(dups.join("; ")))
    }
}

/// Resolves logical fields to column indices for one file's header.
struct Columns<'a> {
    schema: &'a PanelSchema,
    kind: RecordKind,
    header: StringRecord,
}

impl<'a> Columns<'a> {
    fn new(
        schema: &'a PanelSchema,
        kind: RecordKind,
        header: StringRecord,
        required: &[&str],
        path: &Path,
    ) -> Result<Self> {
        let cols = Columns { schema, kind, header };
        let missing: Vec<&str> = required
            .iter()
            .copied()
            .filter(|f| cols.find(f).is_none())
            .collect();
        if missing.is_empty() {
            Ok(cols)
        } else {
            Err(Error::Schema(format!(
                "{}: missing required column(s): {}",
                path.display(),
                missing
                    .iter()
                    .map(|f| format!("{f} (column {:?})", schema.column(kind, f)))
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }

    fn find(&self, field: &str) -> Option<usize> {
        let name = self.schema.column(self.kind, field);
        self.header.iter().position(|h| h == name)
    }

    fn get<'r>(&self, rec: &'r StringRecord, field: &str) -> Option<&'r str> {
        self.find(field).and_then(|i| rec.get(i))
    }

    fn req<'r>(&self, rec: &'r StringRecord, field: &str) -> std::result::Result<&'r str, String> {
        self.get(rec, field)
            .ok_or_else(|| format!("row is short of column for field {field}"))
    }

    fn opt_str(&self, rec: &StringRecord, field: &str) -> Option<String> {
        self.get(rec, field)
            .filter(|v| !self.schema.is_missing(v))
            .map(|v| v.trim().to_string())
    }
}

fn parse_bool(raw: &str, field: &str) -> std::result::Result<bool, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("{field}: not a boolean: {other:?}")),
    }
}

fn parse_f64(raw: &str, field: &str) -> std::result::Result<f64, String> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| format!("{field}: not a number: {raw:?}"))
}

fn parse_i32(raw: &str, field: &str) -> std::result::Result<i32, String> {
    raw.trim()
        .parse::<i32>()
        .map_err(|_| format!("{field}: not an integer: {raw:?}"))
}

trait RowParse: Sized {
    const KIND: RecordKind;
    const REQUIRED: &'static [&'static str];
    fn parse(cols: &Columns, rec: &StringRecord) -> std::result::Result<Self, String>;
}

fn read_rows<T: RowParse>(
    path: &Path,
    schema: &PanelSchema,
    kind: RecordKind,
    rejects: &mut Vec<Reject>,
    mut push: impl FnMut(T),
) -> Result<()> {
    debug_assert_eq!(kind, T::KIND);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let cols = Columns::new(schema, kind, header, T::REQUIRED, path)?;

    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    for (idx, rec) in reader.records().enumerate() {
        let line = (idx + 2) as u64; // 1-based, after the header row
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        match T::parse(&cols, &rec) {
            Ok(row) => push(row),
            Err(reason) => rejects.push(Reject {
                file: file_name.clone(),
                line,
                reason,
            }),
        }
    }
    Ok(())
}

impl RowParse for StudentRecord {
    const KIND: RecordKind = RecordKind::Students;
    const REQUIRED: &'static [&'static str] = &[
        "student_id",
        "female",
        "age_months",
        "birthplace_code",
        "language_code",
        "school_id",
        "classroom_id",
        "grade",
        "school_year",
    ];

    fn parse(cols: &Columns, rec: &StringRecord) -> std::result::Result<Self, String> {
        let grade = parse_i32(cols.req(rec, "grade")?, "grade")?;
        if !(7..=11).contains(&grade) {
            return Err(format!("grade out of range: {grade} not in 7..=11"));
        }
        let cct_flag = match cols.opt_str(rec, "cct_flag") {
            Some(v) => Some(parse_bool(&v, "cct_flag")?),
            None => None,
        };
        Ok(StudentRecord {
            student_id: cols.req(rec, "student_id")?.trim().to_string(),
            female: parse_bool(cols.req(rec, "female")?, "female")?,
            age_months: parse_i32(cols.req(rec, "age_months")?, "age_months")?,
            birthplace_code: cols.req(rec, "birthplace_code")?.trim().to_string(),
            language_code: cols.req(rec, "language_code")?.trim().to_string(),
            mother_education: cols.opt_str(rec, "mother_education"),
            cct_flag,
            school_id: cols.req(rec, "school_id")?.trim().to_string(),
            classroom_id: cols.req(rec, "classroom_id")?.trim().to_string(),
            grade: grade as u8,
            school_year: parse_i32(cols.req(rec, "school_year")?, "school_year")?,
            cohort_projected_grad: 0,
        })
    }
}

impl RowParse for ScoreObservation {
    const KIND: RecordKind = RecordKind::Scores;
    const REQUIRED: &'static [&'static str] = &[
        "student_id",
        "teacher_id",
        "subject",
        "school_year",
        "teacher_score",
        "blind_score",
    ];

    fn parse(cols: &Columns, rec: &StringRecord) -> std::result::Result<Self, String> {
        let subject_raw = cols.req(rec, "subject")?;
        let subject = Subject::parse(subject_raw)
            .ok_or_else(|| format!("subject: unknown value {subject_raw:?}"))?;
        let lag = |field: &str| -> std::result::Result<Option<f64>, String> {
            match cols.opt_str(rec, field) {
                Some(v) => Ok(Some(parse_f64(&v, field)?)),
                None => Ok(None),
            }
        };
        let standardized = match cols.opt_str(rec, "standardized") {
            Some(v) => parse_bool(&v, "standardized")?,
            None => false,
        };
        Ok(ScoreObservation {
            student_id: cols.req(rec, "student_id")?.trim().to_string(),
            teacher_id: cols.req(rec, "teacher_id")?.trim().to_string(),
            subject,
            school_year: parse_i32(cols.req(rec, "school_year")?, "school_year")?,
            teacher_score: parse_f64(cols.req(rec, "teacher_score")?, "teacher_score")?,
            blind_score: parse_f64(cols.req(rec, "blind_score")?, "blind_score")?,
            lagged_math: lag("lagged_math")?,
            lagged_language: lag("lagged_language")?,
            lagged_physed: lag("lagged_physed")?,
            standardized,
        })
    }
}

impl RowParse for TeacherRecord {
    const KIND: RecordKind = RecordKind::Teachers;
    const REQUIRED: &'static [&'static str] = &[
        "teacher_id",
        "subject",
        "female",
        "age_years",
        "contract_type",
        "experience_public_band",
        "experience_private_band",
        "higher_ed_university",
        "school_id",
    ];

    fn parse(cols: &Columns, rec: &StringRecord) -> std::result::Result<Self, String> {
        let subject_raw = cols.req(rec, "subject")?;
        let subject = Subject::parse(subject_raw)
            .ok_or_else(|| format!("subject: unknown value {subject_raw:?}"))?;
        let band = |field: &str| -> std::result::Result<ExperienceBand, String> {
            let raw = cols.req(rec, field)?;
            ExperienceBand::parse(raw).ok_or_else(|| format!("{field}: unknown band {raw:?}"))
        };
        let contract_raw = cols.req(rec, "contract_type")?;
        let contract_type = ContractType::parse(contract_raw)
            .ok_or_else(|| format!("contract_type: unknown value {contract_raw:?}"))?;
        let eval_zscore = match cols.opt_str(rec, "eval_zscore") {
            Some(v) => Some(parse_f64(&v, "eval_zscore")?),
            None => None,
        };
        let eval_passed = match cols.opt_str(rec, "eval_passed") {
            Some(v) => Some(parse_bool(&v, "eval_passed")?),
            None => None,
        };
        Ok(TeacherRecord {
            teacher_id: cols.req(rec, "teacher_id")?.trim().to_string(),
            subject,
            female: parse_bool(cols.req(rec, "female")?, "female")?,
            age_years: parse_i32(cols.req(rec, "age_years")?, "age_years")?,
            contract_type,
            experience_public_band: band("experience_public_band")?,
            experience_private_band: band("experience_private_band")?,
            higher_ed_university: parse_bool(cols.req(rec, "higher_ed_university")?, "higher_ed_university")?,
            eval_zscore,
            eval_passed,
            school_id: cols.req(rec, "school_id")?.trim().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::schema::PanelSchema;
    use crate::Error;

    fn write(dir: &std::path::Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    const TEACHERS: &str = "teacher_id,subject,female,age_years,contract_type,\
experience_public_band,experience_private_band,higher_ed_university,eval_zscore,eval_passed,school_id\n\
t1,math,true,40,tenured,2-5,none,true,,,s1\n";

    fn scores_header() -> &'static str {
        "student_id,teacher_id,subject,school_year,teacher_score,blind_score,\
lagged_math,lagged_language,lagged_physed,standardized"
    }

    #[test]
    fn well_formed_rows_load_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "students.csv",
            "student_id,female,age_months,birthplace_code,language_code,mother_education,\
cct_flag,school_id,classroom_id,grade,school_year\n\
a,true,170,b1,es,,,s1,c1,8,2015\n\
b,false,172,b1,es,m2,true,s1,c1,8,2015\n\
c,true,168,b2,qu,,false,s1,c1,9,2016\n",
        );
        write(
            dir.path(),
            "scores.csv",
            &format!(
                "{}\na,t1,math,2015,10,11,1,2,3,false\nb,t1,math,2015,12,9,,,,false\n",
                scores_header()
            ),
        );
        write(dir.path(), "teachers.csv", TEACHERS);
        let loaded = load_panel(dir.path(), &PanelSchema::default()).unwrap();
        assert_eq!(loaded.panel.students.len(), 3);
        assert_eq!(loaded.panel.scores.len(), 2);
        assert_eq!(loaded.panel.teachers.len(), 1);
        assert!(loaded.rejects.is_empty());
        assert_eq!(loaded.panel.scores[1].lagged_math, None);
    }

    #[test]
    fn out_of_range_grade_is_rejected_not_dropped_silently() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "students.csv",
            "student_id,female,age_months,birthplace_code,language_code,mother_education,\
cct_flag,school_id,classroom_id,grade,school_year\n\
a,true,170,b1,es,,,s1,c1,8,2015\n\
bad,true,170,b1,es,,,s1,c1,13,2015\n\
b,false,172,b1,es,,,s1,c1,9,2015\n",
        );
        write(dir.path(), "scores.csv", &format!("{}\n", scores_header()));
        write(dir.path(), "teachers.csv", TEACHERS);
        let loaded = load_panel(dir.path(), &PanelSchema::default()).unwrap();
        assert_eq!(loaded.panel.students.len(), 2);
        assert_eq!(loaded.rejects.len(), 1);
        assert!(loaded.rejects[0].reason.contains("grade out of range"));
        assert_eq!(loaded.rejects[0].line, 3);
    }

    #[test]
    fn duplicate_score_key_is_an_error_naming_the_tuple() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "students.csv",
            "student_id,female,age_months,birthplace_code,language_code,mother_education,\
cct_flag,school_id,classroom_id,grade,school_year\n\
a,true,170,b1,es,,,s1,c1,8,2015\n",
        );
        write(
            dir.path(),
            "scores.csv",
            &format!(
                "{}\na,t1,math,2015,10,11,,,,false\na,t1,math,2015,12,9,,,,false\n",
                scores_header()
            ),
        );
        write(dir.path(), "teachers.csv", TEACHERS);
        let err = load_panel(dir.path(), &PanelSchema::default()).unwrap_err();
        match err {
            Error::DuplicateKey(msg) => {
                assert!(msg.contains("student=a"), "{msg}");
                assert!(msg.contains("teacher=t1"), "{msg}");
                assert!(msg.contains("year=2015"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_required_column_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "students.csv", "student_id,female\n");
        write(dir.path(), "scores.csv", &format!("{}\n", scores_header()));
        write(dir.path(), "teachers.csv", TEACHERS);
        let err = load_panel(dir.path(), &PanelSchema::default()).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("age_months"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn schema_renames_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut schema = PanelSchema::default();
        schema
            .students
            .insert("student_id".into(), "SID".into());
        write(
            dir.path(),
            "students.csv",
            "SID,female,age_months,birthplace_code,language_code,mother_education,\
cct_flag,school_id,classroom_id,grade,school_year\n\
a,true,170,b1,es,,,s1,c1,8,2015\n",
        );
        write(dir.path(), "scores.csv", &format!("{}\n", scores_header()));
        write(dir.path(), "teachers.csv", TEACHERS);
        let loaded = load_panel(dir.path(), &schema).unwrap();
        assert_eq!(loaded.panel.students[0].student_id, "a");
    }
}

impl RowParse for EmploymentMonth {
    const KIND: RecordKind = RecordKind::Employment;
    const REQUIRED: &'static [&'static str] = &[
        "worker_id",
        "employer_id",
        "year",
        "month",
        "earnings_usd2010",
        "paid_hours",
        "formal_contract",
    ];

    fn parse(cols: &Columns, rec: &StringRecord) -> std::result::Result<Self, String> {
        let month = parse_i32(cols.req(rec, "month")?, "month")?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range: {month} not in 1..=12"));
        }
        let earnings = parse_f64(cols.req(rec, "earnings_usd2010")?, "earnings_usd2010")?;
        if earnings < 0.0 {
            return Err(format!("earnings_usd2010 negative: {earnings}"));
        }
        let hours = parse_f64(cols.req(rec, "paid_hours")?, "paid_hours")?;
        if hours < 0.0 {
            return Err(format!("paid_hours negative: {hours}"));
        }
        Ok(EmploymentMonth {
            worker_id: cols.req(rec, "worker_id")?.trim().to_string(),
            employer_id: cols.req(rec, "employer_id")?.trim().to_string(),
            year: parse_i32(cols.req(rec, "year")?, "year")?,
            month: month as u8,
            earnings_usd2010: earnings,
            paid_hours: hours,
            formal_contract: parse_bool(cols.req(rec, "formal_contract")?, "formal_contract")?,
        })
    }
}
