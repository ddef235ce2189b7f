//! Pipeline driver: simulate -> gaps -> hetero -> eb -> iat-score ->
//! effects -> report.
//!
//! Every subcommand is a pure function of (inputs, config, seed): reruns
//! reproduce byte-identical artifacts except for the manifest timestamp.
//! Exit codes: 0 success, 1 validation error (with a JSON error report on
//! stderr), 2 internal error.

mod effects_config;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradegap_core::effects::{
    build_exposure_rows, estimate_effects, exposure_covariates, internalization,
    leave_one_year_out, percentile_effects, EbMethod, EffectsCluster, EffectsResult, EffectsSpec,
    ExposureRow, LooConfig,
};
use gradegap_core::gaps::{
    estimate_system, join_gender, read_gaps, sure_fit, teacher_gaps, write_gaps, CovariateSpec,
    TeacherGapEstimate,
};
use gradegap_core::hetero::{
    characteristics_regression, cross_subject_report, variance_decomposition, PredictorSpec,
    WeightRule,
};
use gradegap_core::iat::{read_trials, score_all, write_scores, ScoringOptions};
use gradegap_core::panel::{
    assign_projected_graduation, build_labor_outcomes, load_panel, read_education_outcomes,
    write_rejects, AgeBin, LaborOptions, PanelSchema, Subject,
};
use gradegap_core::synth::{generate, write_all, DgpConfig};
use gradegap_core::table::fmt_f64;
use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(name = "gradegap", version, about = "Grading-gap estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel with known ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Estimate per-teacher gaps from a panel directory.
    Gaps {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        /// Joint estimation with cross-equation covariances.
        #[arg(long)]
        sure: bool,
        #[arg(long, default_value_t = 2)]
        min_cell: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Variance decomposition and predictor regressions.
    Hetero {
        #[arg(long)]
        gaps: PathBuf,
        /// Panel directory with teacher records.
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Empirical Bayes posterior means.
    Eb {
        #[arg(long)]
        gaps: PathBuf,
        #[arg(long, default_value = "gaussian")]
        method: String,
        /// Scan the penalty to match the bias-corrected moments.
        #[arg(long)]
        calibrate: bool,
        /// Fixed penalty when not calibrating.
        #[arg(long, default_value_t = 1.0)]
        penalty: f64,
        /// "lo,hi,points", or "auto" for the observed range padded by 5%.
        #[arg(long, default_value = "-2,1,241")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        basis: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score implicit-association trial logs.
    IatScore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Leave-one-year-out treatments and outcome regressions.
    Effects {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Render coefficient tables from an effects output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            let report = serde_json::json!({
                "error": err.to_string(),
                "kind": "validation",
            });
            eprintln!("{report}");
            ExitCode::from(1)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            let report = serde_json::json!({
                "error": msg,
                "kind": "internal",
            });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}

#[derive(Debug)]
enum CliError {
    Core(gradegap_core::Error),
    Config(String),
    Io(String, std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Io(path, e) => write!(f, "i/o error on {path}: {e}"),
        }
    }
}

impl From<gradegap_core::Error> for CliError {
    fn from(e: gradegap_core::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<(), CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.display().to_string(), e)
}

fn parse_subject(s: &Option<String>) -> Result<Option<Subject>, CliError> {
    match s {
        None => Ok(None),
        Some(raw) => Subject::parse(raw)
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("unknown subject {raw:?}"))),
    }
}

fn load_schema(path: &Option<PathBuf>) -> Result<PanelSchema, CliError> {
    match path {
        Some(p) => Ok(PanelSchema::from_path(p)?),
        None => Ok(PanelSchema::default()),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Simulate { config, out, seed, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("simulate");
            manifest.input(&config).map_err(io_err(&config))?;
            let mut dgp = DgpConfig::from_path(&config)?;
            if let Some(s) = seed {
                dgp.seed = s;
            }
            manifest.arg("seed", dgp.seed).opt_arg("threads", &threads);
            let data = generate(&dgp)?;
            write_all(&out, &data)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
        Command::Gaps { input, out, schema, subject, sure, min_cell, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("gaps");
            manifest
                .arg("sure", sure)
                .arg("min_cell", min_cell)
                .opt_arg("subject", &subject)
                .opt_arg("threads", &threads);
            manifest.input_dir(&input).map_err(io_err(&input))?;
            let schema = load_schema(&schema)?;
            let loaded = load_panel(&input, &schema)?;
            let subject_filter = parse_subject(&subject)?;

            let mut all_gaps: Vec<TeacherGapEstimate> = Vec::new();
            for subj in Subject::ALL {
                if subject_filter.is_some() && subject_filter != Some(subj) {
                    continue;
                }
                let obs: Vec<_> = loaded
                    .panel
                    .scores
                    .iter()
                    .filter(|o| o.subject == subj)
                    .cloned()
                    .collect();
                if obs.is_empty() {
                    continue;
                }
                let standardized = gradegap_core::panel::standardize_scores(&obs)?;
                let female = join_gender(&standardized, &loaded.panel.students)?;
                let spec = CovariateSpec::with_lags();
                let fit = if sure {
                    sure_fit(&standardized, &female, &spec)?
                } else {
                    estimate_system(&standardized, &female, &spec)?
                };
                for w in &fit.warnings {
                    eprintln!("warning ({subj}): {w}");
                }
                let set = teacher_gaps(&fit, min_cell)?;
                all_gaps.extend(set.gaps);
            }
            if all_gaps.is_empty() {
                return Err(CliError::Config("no teacher gaps were estimable".into()));
            }
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            write_gaps(&out.join("gaps.csv"), &all_gaps)?;
            write_rejects(&out.join("rejects.csv"), &loaded.rejects)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
        Command::Hetero { gaps, panel, schema, out, subject, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("hetero");
            manifest.opt_arg("subject", &subject).opt_arg("threads", &threads);
            manifest.input(&gaps).map_err(io_err(&gaps))?;
            manifest.input_dir(&panel).map_err(io_err(&panel))?;
            let schema = load_schema(&schema)?;
            let loaded = load_panel(&panel, &schema)?;
            let all_gaps = read_gaps(&gaps)?;
            let subject_filter = parse_subject(&subject)?;

            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let decomp_path = out.join("decomposition.csv");
            let mut w = gradegap_core::table::writer(&decomp_path)?;
            gradegap_core::table::write_record(
                &mut w,
                &decomp_path,
                [
                    "subject",
                    "unadjusted_mean",
                    "sd_unweighted",
                    "sd_weighted",
                    "floored",
                    "n_teachers",
                    "total_students",
                ],
            )?;
            let mut predictor_rows: Vec<(Subject, gradegap_core::hetero::PredictorRegressionResult)> =
                Vec::new();
            for subj in Subject::ALL {
                if subject_filter.is_some() && subject_filter != Some(subj) {
                    continue;
                }
                let subj_gaps: Vec<_> =
                    all_gaps.iter().filter(|g| g.subject == subj).cloned().collect();
                if subj_gaps.len() < 2 {
                    continue;
                }
                let d = variance_decomposition(&subj_gaps)?;
                let fields = [
                    subj.to_string(),
                    fmt_f64(d.unadjusted_mean),
                    fmt_f64(d.sd_unweighted),
                    fmt_f64(d.sd_weighted),
                    (d.floored_unweighted || d.floored_weighted).to_string(),
                    d.n_teachers.to_string(),
                    d.total_students.to_string(),
                ];
                gradegap_core::table::write_record(
                    &mut w,
                    &decomp_path,
                    fields.iter().map(String::as_str),
                )?;
                if d.sd_weighted > 0.0 {
                    let spec = PredictorSpec {
                        weight: WeightRule::InverseVariance,
                        scale_sd: d.sd_weighted,
                    };
                    match characteristics_regression(&subj_gaps, &loaded.panel.teachers, &spec) {
                        Ok(result) => predictor_rows.push((subj, result)),
                        Err(e) => eprintln!("warning ({subj}): characteristics regression: {e}"),
                    }
                }
            }
            gradegap_core::table::flush(w, &decomp_path)?;

            let pred_path = out.join("predictors.csv");
            let mut w = gradegap_core::table::writer(&pred_path)?;
            gradegap_core::table::write_record(
                &mut w,
                &pred_path,
                ["subject", "term", "estimate", "clustered_se", "n", "r_squared", "weighting"],
            )?;
            for (subj, result) in &predictor_rows {
                for c in &result.coefficients {
                    let fields = [
                        subj.to_string(),
                        c.name.clone(),
                        fmt_f64(c.estimate),
                        fmt_f64(c.se),
                        result.n.to_string(),
                        fmt_f64(result.r_squared),
                        result.weighting.clone(),
                    ];
                    gradegap_core::table::write_record(
                        &mut w,
                        &pred_path,
                        fields.iter().map(String::as_str),
                    )?;
                }
            }
            gradegap_core::table::flush(w, &pred_path)?;

            let cross = cross_subject_report(&all_gaps);
            let cross_path = out.join("cross_subject.csv");
            let mut w = gradegap_core::table::writer(&cross_path)?;
            gradegap_core::table::write_record(
                &mut w,
                &cross_path,
                ["subject_a", "subject_b", "slope", "correlation", "n_teachers"],
            )?;
            for c in &cross {
                let fields = [
                    c.subject_a.to_string(),
                    c.subject_b.to_string(),
                    fmt_f64(c.slope),
                    fmt_f64(c.correlation),
                    c.n_teachers.to_string(),
                ];
                gradegap_core::table::write_record(
                    &mut w,
                    &cross_path,
                    fields.iter().map(String::as_str),
                )?;
            }
            gradegap_core::table::flush(w, &cross_path)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
        Command::Eb { gaps, method, calibrate, penalty, grid, basis, out, subject, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("eb");
            manifest
                .arg("method", &method)
                .arg("calibrate", calibrate)
                .arg("penalty", penalty)
                .arg("grid", &grid)
                .arg("basis", basis)
                .opt_arg("subject", &subject)
                .opt_arg("threads", &threads);
            manifest.input(&gaps).map_err(io_err(&gaps))?;
            let all_gaps = read_gaps(&gaps)?;
            let subject_filter = parse_subject(&subject)?;
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;

            let mut posteriors = Vec::new();
            for subj in Subject::ALL {
                if subject_filter.is_some() && subject_filter != Some(subj) {
                    continue;
                }
                let subj_gaps: Vec<_> =
                    all_gaps.iter().filter(|g| g.subject == subj).cloned().collect();
                if subj_gaps.len() < 2 {
                    continue;
                }
                let decomposition = variance_decomposition(&subj_gaps)?;
                match method.as_str() {
                    "gaussian" => {
                        let prior = gradegap_core::eb::fit_gaussian_prior(&decomposition);
                        posteriors.extend(gradegap_core::eb::shrink(&subj_gaps, &prior)?);
                    }
                    "deconvolve" => {
                        let grid_spec = parse_grid(&grid, &subj_gaps)?;
                        let basis_spec = gradegap_core::eb::BasisSpec { columns: basis };
                        let opts = gradegap_core::eb::DeconvOptions::default();
                        let prior = if calibrate {
                            let (_, prior, trace) = gradegap_core::eb::calibrate_penalty(
                                &subj_gaps,
                                &decomposition,
                                &grid_spec,
                                &basis_spec,
                                &opts,
                            )?;
                            gradegap_core::eb::deconv::write_calibration(
                                &out.join(format!("calibration_{subj}.csv")),
                                &trace,
                            )?;
                            prior
                        } else {
                            gradegap_core::eb::deconvolve(
                                &subj_gaps,
                                &grid_spec,
                                &basis_spec,
                                penalty,
                                &opts,
                            )?
                        };
                        gradegap_core::eb::deconv::write_density(
                            &out.join(format!("density_{subj}.csv")),
                            &prior,
                        )?;
                        posteriors.extend(gradegap_core::eb::posterior_mean_deconv(
                            &subj_gaps, &prior,
                        )?);
                    }
                    other => {
                        return Err(CliError::Config(format!(
                            "unknown method {other:?}; use gaussian or deconvolve"
                        )))
                    }
                }
            }
            if posteriors.is_empty() {
                return Err(CliError::Config(
                    "no subject had at least 2 gap estimates".into(),
                ));
            }
            gradegap_core::eb::write_posteriors(&out.join("posteriors.csv"), &posteriors)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
        Command::IatScore { input, out, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("iat-score");
            manifest.opt_arg("threads", &threads);
            manifest.input(&input).map_err(io_err(&input))?;
            let trials = read_trials(&input)?;
            let results = score_all(&trials, &ScoringOptions::default())?;
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            write_scores(&out.join("iat_scores.csv"), &out.join("iat_discards.csv"), &results)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
        Command::Effects { panel, schema, config, out, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("effects");
            manifest.opt_arg("threads", &threads);
            manifest.input(&config).map_err(io_err(&config))?;
            manifest.input_dir(&panel).map_err(io_err(&panel))?;
            let cfg = effects_config::EffectsConfig::from_path(&config)
                .map_err(CliError::Config)?;
            run_effects(&panel, &schema, &cfg, &out)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
        Command::Report { input, out, threads } => {
            let n_threads = gradegap_core::par::set_threads(threads);
            let mut manifest = ManifestBuilder::new("report");
            manifest.opt_arg("threads", &threads);
            manifest.input_dir(&input).map_err(io_err(&input))?;
            render_reports(&input, &out)?;
            manifest.write(&out, n_threads).map_err(io_err(&out))?;
            Ok(())
        }
    }
}

fn parse_grid(
    raw: &str,
    gaps: &[TeacherGapEstimate],
) -> Result<gradegap_core::eb::GridSpec, CliError> {
    if raw == "auto" {
        let (lo, hi) = gaps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, g| {
            (a.0.min(g.theta_hat), a.1.max(g.theta_hat))
        });
        let pad = 0.05 * (hi - lo).max(0.1);
        let lo = lo - pad;
        let hi = hi + pad;
        let points = (((hi - lo) / 0.0125).ceil() as usize + 1).clamp(41, 241);
        return Ok(gradegap_core::eb::GridSpec { lo, hi, points });
    }
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Config(format!(
            "grid must be \"lo,hi,points\" or \"auto\", got {raw:?}"
        )));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| {
        CliError::Config(format!("grid lo is not a number: {:?}", parts[0]))
    })?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| {
        CliError::Config(format!("grid hi is not a number: {:?}", parts[1]))
    })?;
    let points: usize = parts[2].trim().parse().map_err(|_| {
        CliError::Config(format!("grid points is not an integer: {:?}", parts[2]))
    })?;
    Ok(gradegap_core::eb::GridSpec { lo, hi, points })
}

fn age_bin_from_label(label: &str) -> Result<AgeBin, CliError> {
    AgeBin::ALL
        .into_iter()
        .find(|b| b.as_str() == label)
        .ok_or_else(|| CliError::Config(format!("unknown age bin {label:?}")))
}

fn run_effects(
    panel_dir: &Path,
    schema: &Option<PathBuf>,
    cfg: &effects_config::EffectsConfig,
    out: &Path,
) -> CliResult {
    let schema = load_schema(schema)?;
    let mut loaded = load_panel(panel_dir, &schema)?;
    assign_projected_graduation(&mut loaded.panel.students)?;
    let subject = Subject::parse(&cfg.subject)
        .ok_or_else(|| CliError::Config(format!("unknown subject {:?}", cfg.subject)))?;

    let obs: Vec<_> = loaded
        .panel
        .scores
        .iter()
        .filter(|o| o.subject == subject)
        .cloned()
        .collect();
    if obs.is_empty() {
        return Err(CliError::Config(format!("no {subject} score observations")));
    }
    let standardized = gradegap_core::panel::standardize_scores(&obs)?;
    let female = join_gender(&standardized, &loaded.panel.students)?;

    let cohorts: BTreeSet<i32> = loaded
        .panel
        .students
        .iter()
        .map(|s| s.cohort_projected_grad)
        .collect();
    let exclusions = cfg.exclusion_map(&cohorts);
    let mut loo_cfg = LooConfig::new(exclusions);
    loo_cfg.min_cell = cfg.min_cell;
    loo_cfg.method = match cfg.method.as_str() {
        "gaussian" => EbMethod::Gaussian,
        "deconvolve" => EbMethod::Deconvolve,
        other => {
            return Err(CliError::Config(format!(
                "unknown method {other:?}; use gaussian or deconvolve"
            )))
        }
    };
    let treatments = leave_one_year_out(&standardized, &female, &loo_cfg)?;

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let tpath = out.join("treatments.csv");
    let mut w = gradegap_core::table::writer(&tpath)?;
    gradegap_core::table::write_record(
        &mut w,
        &tpath,
        ["cohort", "teacher_id", "treatment", "excluded_years", "years_used"],
    )?;
    for ct in &treatments {
        let excluded = ct
            .excluded_years
            .iter()
            .map(i32::to_string)
            .collect::<Vec<_>>()
            .join(";");
        for (teacher, value) in &ct.treatment {
            let years = ct
                .years_used
                .get(teacher)
                .map(|ys| ys.iter().map(i32::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            let fields = [
                ct.cohort.to_string(),
                teacher.clone(),
                fmt_f64(*value),
                excluded.clone(),
                years,
            ];
            gradegap_core::table::write_record(&mut w, &tpath, fields.iter().map(String::as_str))?;
        }
    }
    gradegap_core::table::flush(w, &tpath)?;

    let (cov_names, cov_values) = exposure_covariates(&standardized);
    let (rows, dropped) = build_exposure_rows(
        &standardized,
        &loaded.panel.students,
        &treatments,
        &cov_names,
        &cov_values,
    )?;
    if rows.is_empty() {
        return Err(CliError::Config(
            "no exposure rows: every teacher lacks a leave-one-year-out estimate".into(),
        ));
    }
    if dropped > 0 {
        eprintln!("note: {dropped} rows dropped for missing leave-one-year-out estimates");
    }

    let spec = EffectsSpec {
        cluster: match cfg.cluster.as_str() {
            "school" => EffectsCluster::School,
            "student_school" => EffectsCluster::StudentAndSchool,
            other => {
                return Err(CliError::Config(format!(
                    "unknown cluster spec {other:?}; use school or student_school"
                )))
            }
        },
        school_by_gender: cfg.school_by_gender,
        covariate_names: cov_names.clone(),
        ..EffectsSpec::default()
    };

    // Outcome resolution tables.
    let education = {
        let path = panel_dir.join("outcomes.csv");
        if path.exists() {
            read_education_outcomes(&path)?
        } else {
            Vec::new()
        }
    };
    let edu_by_student: BTreeMap<&str, &gradegap_core::panel::EducationOutcomes> =
        education.iter().map(|e| (e.student_id.as_str(), e)).collect();
    let projected: BTreeMap<&str, i32> = loaded
        .panel
        .students
        .iter()
        .map(|s| (s.student_id.as_str(), s.cohort_projected_grad))
        .collect();
    let continuous: BTreeMap<String, f64> = {
        let path = panel_dir.join("outcome_continuous.csv");
        if path.exists() {
            let mut reader = gradegap_core::table::reader(&path)?;
            let mut map = BTreeMap::new();
            for (idx, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let id = rec.get(0).unwrap_or("").to_string();
                let v = gradegap_core::table::parse_f64(
                    rec.get(1).unwrap_or(""),
                    &path,
                    (idx + 2) as u64,
                )?;
                map.insert(id, v);
            }
            map
        } else {
            BTreeMap::new()
        }
    };

    // Labor cells for every student that appears in the regression rows.
    let needs_labor = cfg
        .outcomes
        .iter()
        .any(|o| o.starts_with("employed_formal") || o.starts_with("earnings") || o.starts_with("hours"))
        || cfg.percentiles.is_some();
    let labor_by_student: BTreeMap<String, [gradegap_core::panel::LaborCell; 3]> = if needs_labor {
        let students_in_rows: BTreeSet<&str> =
            rows.iter().map(|r| r.student_id.as_str()).collect();
        students_in_rows
            .into_iter()
            .map(|student| {
                let grad = projected.get(student).copied().unwrap_or(0);
                let cells = build_labor_outcomes(
                    &loaded.panel.employment,
                    student,
                    grad,
                    &LaborOptions::default(),
                );
                (student.to_string(), cells)
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    let labor_for = |student: &str| -> [gradegap_core::panel::LaborCell; 3] {
        labor_by_student.get(student).copied().unwrap_or_default()
    };

    let resolve = |name: &str, rows: &[ExposureRow]| -> Result<Vec<f64>, CliError> {
        let edu_flag = |f: fn(&gradegap_core::panel::EducationOutcomes) -> bool| {
            rows.iter()
                .map(|r| {
                    edu_by_student
                        .get(r.student_id.as_str())
                        .map(|e| f64::from(f(e)))
                        .ok_or_else(|| {
                            CliError::Config(format!(
                                "student {} has no education outcome row",
                                r.student_id
                            ))
                        })
                })
                .collect::<Result<Vec<f64>, CliError>>()
        };
        let labor_value = |bin: AgeBin, pick: fn(&gradegap_core::panel::LaborCell) -> f64| {
            let idx = AgeBin::ALL.iter().position(|b| *b == bin).unwrap();
            rows.iter()
                .map(|r| pick(&labor_for(&r.student_id)[idx]))
                .collect::<Vec<f64>>()
        };
        match name {
            "grad_on_time" => edu_flag(|e| e.grad_on_time),
            "grad_ever" => edu_flag(|e| e.grad_ever),
            "college_applied_on_time" => edu_flag(|e| e.college_applied_on_time),
            "college_applied_ever" => edu_flag(|e| e.college_applied_ever),
            "college_admitted_on_time" => edu_flag(|e| e.college_admitted_on_time),
            "college_admitted_ever" => edu_flag(|e| e.college_admitted_ever),
            "college_enrolled_on_time" => edu_flag(|e| e.college_enrolled_on_time),
            "college_enrolled_ever" => edu_flag(|e| e.college_enrolled_ever),
            "continuous" => rows
                .iter()
                .map(|r| {
                    continuous.get(&r.student_id).copied().ok_or_else(|| {
                        CliError::Config(format!(
                            "student {} has no continuous outcome",
                            r.student_id
                        ))
                    })
                })
                .collect(),
            other => {
                let (kind, bin_label) = other
                    .rsplit_once('_')
                    .map(|(k, b)| (k, b.replace('_', "-")))
                    .ok_or_else(|| CliError::Config(format!("unknown outcome {other:?}")))?;
                // Names look like employed_formal_18_19: re-split on the
                // last two segments.
                let _ = (kind, bin_label);
                let parts: Vec<&str> = other.split('_').collect();
                if parts.len() < 3 {
                    return Err(CliError::Config(format!("unknown outcome {other:?}")));
                }
                let bin = age_bin_from_label(&format!(
                    "{}-{}",
                    parts[parts.len() - 2],
                    parts[parts.len() - 1]
                ))?;
                let base = parts[..parts.len() - 2].join("_");
                match base.as_str() {
                    "employed_formal" => {
                        Ok(labor_value(bin, |c| f64::from(c.employed_formal)))
                    }
                    "earnings" => Ok(labor_value(bin, |c| c.earnings_uncond)),
                    "hours" => Ok(labor_value(bin, |c| c.hours_uncond)),
                    _ => Err(CliError::Config(format!("unknown outcome {other:?}"))),
                }
            }
        }
    };

    for outcome_name in &cfg.outcomes {
        let y = resolve(outcome_name, &rows)?;
        let result = estimate_effects(&rows, &y, outcome_name, &spec)?;
        write_effects_result(out, outcome_name, &result)?;
    }

    if let Some(pc) = &cfg.percentiles {
        let bin = age_bin_from_label(&pc.age_bin)?;
        let idx = AgeBin::ALL.iter().position(|b| *b == bin).unwrap();
        let earnings: Vec<f64> = rows
            .iter()
            .map(|r| labor_for(&r.student_id)[idx].earnings_uncond)
            .collect();
        let reference: Vec<f64> = match &pc.reference_file {
            Some(file) => {
                let path = panel_dir.join(file);
                let mut reader = gradegap_core::table::reader(&path)?;
                let mut values = Vec::new();
                for (i, rec) in reader.records().enumerate() {
                    let rec =
                        rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                    values.push(gradegap_core::table::parse_f64(
                        rec.get(0).unwrap_or(""),
                        &path,
                        (i + 2) as u64,
                    )?);
                }
                values
            }
            None => earnings.iter().copied().filter(|&e| e > 0.0).collect(),
        };
        let series = percentile_effects(&rows, &earnings, &reference, &pc.grid, &spec)?;
        let path = out.join("percentile_series.csv");
        let mut w = gradegap_core::table::writer(&path)?;
        gradegap_core::table::write_record(
            &mut w,
            &path,
            ["percentile", "term", "estimate", "clustered_se"],
        )?;
        for (p, result) in &series {
            for c in &result.coefficients {
                let fields = [
                    fmt_f64(*p),
                    c.name.clone(),
                    fmt_f64(c.estimate),
                    fmt_f64(c.se),
                ];
                gradegap_core::table::write_record(&mut w, &path, fields.iter().map(String::as_str))?;
            }
        }
        gradegap_core::table::flush(w, &path)?;
    }

    if let Some(iat_file) = &cfg.student_iat_file {
        let path = panel_dir.join(iat_file);
        let mut reader = gradegap_core::table::reader(&path)?;
        let mut map: BTreeMap<String, f64> = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            map.insert(
                rec.get(0).unwrap_or("").to_string(),
                gradegap_core::table::parse_f64(rec.get(1).unwrap_or(""), &path, (i + 2) as u64)?,
            );
        }
        let y: Vec<f64> = rows
            .iter()
            .map(|r| map.get(&r.student_id).copied().unwrap_or(0.0))
            .collect();
        let result = internalization(&rows, &y, "theta_star_loo", &spec)?;
        write_effects_result(out, "internalization", &result)?;
    }

    Ok(())
}

fn write_effects_result(out: &Path, name: &str, result: &EffectsResult) -> CliResult {
    let path = out.join(format!("effects_{name}.csv"));
    let mut w = gradegap_core::table::writer(&path)?;
    gradegap_core::table::write_record(&mut w, &path, ["term", "estimate", "clustered_se"])?;
    for c in &result.coefficients {
        let fields = [c.name.clone(), fmt_f64(c.estimate), fmt_f64(c.se)];
        gradegap_core::table::write_record(&mut w, &path, fields.iter().map(String::as_str))?;
    }
    gradegap_core::table::flush(w, &path)?;

    let meta = serde_json::json!({
        "outcome": result.outcome,
        "ybar_female": result.ybar_female,
        "ybar_male": result.ybar_male,
        "n": result.n,
        "n_clusters": result.n_clusters,
        "fixed_effects": result.fixed_effects,
        "psd_repaired": result.psd_repaired,
        "notices": result.notices,
    });
    let meta_path = out.join(format!("effects_{name}_meta.json"));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(io_err(&meta_path))?;
    Ok(())
}

/// Render one text table per effects output, coefficients with clustered
/// standard errors in parentheses and the group-mean rows underneath.
fn render_reports(input: &Path, out: &Path) -> CliResult {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("effects_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(CliError::Config(format!(
            "no effects_*.csv files under {}",
            input.display()
        )));
    }
    for csv_path in entries {
        let stem = csv_path.file_stem().unwrap().to_string_lossy().to_string();
        let name = stem.trim_start_matches("effects_").to_string();
        let meta_path = input.join(format!("{stem}_meta.json"));
        let meta: serde_json::Value = if meta_path.exists() {
            serde_json::from_str(
                &std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?,
            )
            .map_err(|e| CliError::Config(format!("{}: {e}", meta_path.display())))?
        } else {
            serde_json::json!({})
        };

        let mut reader = gradegap_core::table::reader(&csv_path)?;
        let mut lines = Vec::new();
        lines.push(format!("outcome: {name}"));
        lines.push("=".repeat(58));
        lines.push(format!("{:<28} {:>12}  {:>14}", "term", "estimate", "(se)"));
        lines.push("-".repeat(58));
        for rec in reader.records() {
            let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", csv_path.display())))?;
            let term = rec.get(0).unwrap_or("");
            let est: f64 = rec.get(1).unwrap_or("0").parse().unwrap_or(f64::NAN);
            let se: f64 = rec.get(2).unwrap_or("0").parse().unwrap_or(f64::NAN);
            lines.push(format!("{term:<28} {est:>12.4}  ({se:.4})"));
        }
        lines.push("-".repeat(58));
        if let Some(v) = meta.get("ybar_female").and_then(|v| v.as_f64()) {
            lines.push(format!("{:<28} {v:>12.4}", "Ybar female"));
        }
        if let Some(v) = meta.get("ybar_male").and_then(|v| v.as_f64()) {
            lines.push(format!("{:<28} {v:>12.4}", "Ybar male"));
        }
        if let Some(v) = meta.get("n").and_then(|v| v.as_u64()) {
            lines.push(format!("{:<28} {v:>12}", "observations"));
        }
        if let Some(fe) = meta.get("fixed_effects").and_then(|v| v.as_array()) {
            let names: Vec<String> = fe
                .iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect();
            lines.push(format!("{:<28} {}", "fixed effects", names.join(", ")));
        }
        if let Some(nc) = meta.get("n_clusters").and_then(|v| v.as_array()) {
            let counts: Vec<String> = nc.iter().filter_map(|v| v.as_u64()).map(|v| v.to_string()).collect();
            lines.push(format!("{:<28} {}", "clusters", counts.join(" x ")));
        }
        lines.push(String::new());
        let report_path = out.join(format!("report_{name}.txt"));
        std::fs::write(&report_path, lines.join("\n")).map_err(io_err(&report_path))?;
    }
    Ok(())
}
