//! Seeded synthetic data generator with known ground truth.
//!
//! Every estimator in the crate is validated against panels produced here.
//! Scores follow the structural form
//!
//! ```text
//! blind   = va_f + va_gap * M + male_shift * M + lag loadings + ability + e
//! teacher = same structural part + theta_j * M + e'
//! ```
//!
//! so the planted per-teacher difference in gender gaps equals `theta_j`
//! exactly in expectation. Long-run outcomes follow a linear model in the
//! standardized true gap; binary outcomes are thresholded uniforms so the
//! planted coefficients remain the estimands.
//!
//! Randomness comes from one counter-based generator (ChaCha8) with an
//! explicit stream per entity, so enlarging the teacher roster does not
//! perturb existing students' draws.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::iat::{IatBlock, IatTrial};
use crate::panel::{
    ContractType, EducationOutcomes, EmploymentMonth, ExperienceBand, ScoreObservation,
    StudentRecord, Subject, TeacherRecord,
};
use crate::{Error, Result};

/// Identity string recorded in generated metadata.
pub const RNG_ALGORITHM: &str = "chacha8-stream-split";

/// Prior over the true per-teacher gaps.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Gaussian { mu: f64, sd: f64 },
    Mixture { weights: Vec<f64>, mus: Vec<f64>, sds: Vec<f64> },
    PointMass { value: f64 },
}

impl PriorSpec {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            PriorSpec::Gaussian { mu, sd } => normal(rng, *mu, *sd),
            PriorSpec::Mixture { weights, mus, sds } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for ((w, m), s) in weights.iter().zip(mus).zip(sds) {
                    if u < *w {
                        return normal(rng, *m, *s);
                    }
                    u -= w;
                }
                normal(rng, mus[mus.len() - 1], sds[sds.len() - 1])
            }
            PriorSpec::PointMass { value } => *value,
        }
    }

    /// Exact mean and variance of the prior.
    pub fn moments(&self) -> (f64, f64) {
        match self {
            PriorSpec::Gaussian { mu, sd } => (*mu, sd * sd),
            PriorSpec::Mixture { weights, mus, sds } => {
                let total: f64 = weights.iter().sum();
                let mean: f64 = weights
                    .iter()
                    .zip(mus)
                    .map(|(w, m)| w / total * m)
                    .sum();
                let second: f64 = weights
                    .iter()
                    .zip(mus.iter().zip(sds))
                    .map(|(w, (m, s))| w / total * (s * s + m * m))
                    .sum();
                (mean, second - mean * mean)
            }
            PriorSpec::PointMass { value } => (*value, 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Gaussian { sd, .. } if *sd < 0.0 => {
                Err(Error::InvalidConfig("prior sd must be nonnegative".into()))
            }
            PriorSpec::Mixture { weights, mus, sds } => {
                if weights.is_empty() || weights.len() != mus.len() || mus.len() != sds.len() {
                    return Err(Error::InvalidConfig(
                        "mixture weights, mus, sds must have equal nonzero length".into(),
                    ));
                }
                if weights.iter().any(|w| *w < 0.0) || sds.iter().any(|s| *s < 0.0) {
                    return Err(Error::InvalidConfig(
                        "mixture weights and sds must be nonnegative".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Planted outcome equation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OutcomeSpec {
    pub delta0: f64,
    /// Interaction: standardized gap x female.
    pub delta1: f64,
    /// Female level shift.
    pub delta2: f64,
    /// Standardized gap main effect.
    pub delta3: f64,
    /// Loading on the generated student covariate.
    pub delta4: f64,
    pub noise_sd: f64,
    /// Threshold a uniform draw to a binary outcome (linear probability
    /// model) instead of emitting the continuous index plus noise.
    pub binary: bool,
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        OutcomeSpec {
            delta0: 0.8,
            delta1: -0.0151,
            delta2: -0.0089,
            delta3: 0.0051,
            delta4: 0.02,
            noise_sd: 0.1,
            binary: true,
        }
    }
}

/// Correlated teacher value-added block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VaSpec {
    pub sd_va_female: f64,
    pub sd_va_gap: f64,
    /// Target correlation between the gap parameter and VA toward females.
    pub corr_theta_va_female: f64,
}

impl Default for VaSpec {
    fn default() -> Self {
        VaSpec {
            sd_va_female: 0.3,
            sd_va_gap: 0.1,
            corr_theta_va_female: 0.0,
        }
    }
}

/// Teacher IAT linkage: standardized true gap maps to a target D.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TeacherIatSpec {
    /// d_target = intercept + slope * standardized theta + noise.
    pub intercept: f64,
    pub slope: f64,
    pub noise_sd: f64,
    pub trials_per_block: usize,
}

impl Default for TeacherIatSpec {
    fn default() -> Self {
        TeacherIatSpec {
            intercept: 0.301,
            slope: 0.15,
            noise_sd: 0.1,
            trials_per_block: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DgpConfig {
    pub seed: u64,
    pub subject: Subject,
    pub teachers: usize,
    /// Students per teacher per school year.
    pub students_per_teacher: usize,
    /// Exam years; one cohort per year (grade 8, projected graduation
    /// year + 3).
    pub years: Vec<i32>,
    pub schools: usize,
    pub prior: PriorSpec,
    pub ability_sd: f64,
    pub noise_blind_sd: f64,
    pub noise_teacher_sd: f64,
    /// Correlation of the two score disturbances within a student-row.
    pub cross_eq_correlation: f64,
    /// Direct effect of being male on both scores.
    pub male_shift: f64,
    /// Loadings of the three lagged scores in both equations.
    pub lag_loadings: [f64; 3],
    pub lag_missing_rate: f64,
    pub outcome: OutcomeSpec,
    pub va: Option<VaSpec>,
    pub teacher_iat: Option<TeacherIatSpec>,
    /// Generate employment months consistent with an earnings model.
    pub employment: bool,
    /// Sort students into classrooms by ability correlated with the
    /// teacher's gap (violates selection-on-observables on purpose).
    pub confounded: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            seed: 1,
            subject: Subject::Math,
            teachers: 100,
            students_per_teacher: 40,
            years: vec![2015],
            schools: 20,
            prior: PriorSpec::Gaussian { mu: -0.2978, sd: 0.0973 },
            ability_sd: 1.0,
            noise_blind_sd: 0.5,
            noise_teacher_sd: 0.5,
            cross_eq_correlation: 0.0,
            male_shift: -0.05,
            lag_loadings: [0.3, 0.2, 0.1],
            lag_missing_rate: 0.0,
            outcome: OutcomeSpec::default(),
            va: None,
            teacher_iat: None,
            employment: false,
            confounded: false,
        }
    }
}

impl DgpConfig {
    pub fn from_path(path: &Path) -> Result<DgpConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.teachers == 0 || self.students_per_teacher == 0 || self.years.is_empty() {
            return Err(Error::InvalidConfig(
                "teachers, students_per_teacher, and years must be nonempty".into(),
            ));
        }
        if self.schools == 0 {
            return Err(Error::InvalidConfig("schools must be positive".into()));
        }
        for (name, v) in [
            ("ability_sd", self.ability_sd),
            ("noise_blind_sd", self.noise_blind_sd),
            ("noise_teacher_sd", self.noise_teacher_sd),
            ("outcome.noise_sd", self.outcome.noise_sd),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.lag_missing_rate) {
            return Err(Error::InvalidConfig("lag_missing_rate must lie in [0,1]".into()));
        }
        if self.cross_eq_correlation.abs() > 1.0 {
            return Err(Error::InvalidConfig(
                "cross_eq_correlation must lie in [-1,1]".into(),
            ));
        }
        Ok(())
    }
}

/// True parameters emitted alongside every generated panel; estimators never
/// see this outside of tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub rng_algorithm: String,
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub theta: BTreeMap<String, f64>,
    pub va_female: BTreeMap<String, f64>,
    pub deltas: [f64; 5],
    pub teacher_iat_d: BTreeMap<String, f64>,
}

/// In-memory result of one generation run.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub students: Vec<StudentRecord>,
    pub scores: Vec<ScoreObservation>,
    pub teachers: Vec<TeacherRecord>,
    pub employment: Vec<EmploymentMonth>,
    pub education: Vec<EducationOutcomes>,
    /// Continuous outcome per student (populated when `outcome.binary` is
    /// false); the binary path writes `education` instead.
    pub outcome_continuous: BTreeMap<String, f64>,
    pub teacher_iat_trials: Vec<IatTrial>,
    pub truth: GroundTruth,
}

fn normal(rng: &mut ChaCha8Rng, mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mu;
    }
    Normal::new(mu, sd).unwrap().sample(rng)
}

/// Entity kinds with disjoint stream spaces.
#[derive(Clone, Copy)]
enum StreamKind {
    Teacher = 1,
    Student = 2,
    Outcome = 3,
    Employment = 4,
    IatRespondent = 5,
}

fn stream_rng(seed: u64, kind: StreamKind, entity: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 56) ^ entity);
    rng
}

/// Stable per-student entity id: year slot, teacher index, seat.
fn student_entity(year_idx: usize, teacher: usize, seat: usize) -> u64 {
    ((year_idx as u64) << 40) | ((teacher as u64) << 16) | seat as u64
}

pub fn generate(config: &DgpConfig) -> Result<SyntheticData> {
    config.validate()?;
    let seed = config.seed;
    let (prior_mean, prior_var) = config.prior.moments();
    let prior_sd_for_std = prior_var.sqrt().max(1e-12);

    // Teachers: gap draw, optional correlated value-added block, traits.
    let n_teachers = config.teachers;
    let mut theta = vec![0.0f64; n_teachers];
    let mut va_f = vec![0.0f64; n_teachers];
    let mut va_gap = vec![0.0f64; n_teachers];
    let mut teacher_records = Vec::with_capacity(n_teachers);
    let mut truth_theta = BTreeMap::new();
    let mut truth_va = BTreeMap::new();
    for t in 0..n_teachers {
        let mut rng = stream_rng(seed, StreamKind::Teacher, t as u64);
        let th = config.prior.draw(&mut rng);
        theta[t] = th;
        if let Some(va) = &config.va {
            // va_f = rho * sd_f/sd_theta * (theta - mean) + sqrt(1-rho^2) * e
            let rho = va.corr_theta_va_female.clamp(-1.0, 1.0);
            let scale = if prior_var > 0.0 {
                va.sd_va_female / prior_var.sqrt()
            } else {
                0.0
            };
            let e = normal(&mut rng, 0.0, va.sd_va_female);
            va_f[t] = rho * scale * (th - prior_mean) + (1.0 - rho * rho).sqrt() * e;
            va_gap[t] = normal(&mut rng, 0.0, va.sd_va_gap);
        } else {
            // Burn the same number of draws so the stream layout is stable
            // whether or not the block is enabled.
            let _ = rng.gen::<f64>();
            let _ = rng.gen::<f64>();
        }
        let teacher_id = format!("t{t:06}");
        truth_theta.insert(teacher_id.clone(), th);
        truth_va.insert(teacher_id.clone(), va_f[t]);
        let school_id = format!("s{:04}", t % config.schools);
        let exp_band = ExperienceBand::ALL[rng.gen_range(0..5)];
        teacher_records.push(TeacherRecord {
            teacher_id,
            subject: config.subject,
            female: rng.gen::<f64>() < 0.5,
            age_years: rng.gen_range(25..60),
            contract_type: if rng.gen::<f64>() < 0.4 {
                ContractType::Tenured
            } else {
                ContractType::FixedTerm
            },
            experience_public_band: exp_band,
            experience_private_band: ExperienceBand::ALL[rng.gen_range(0..5)],
            higher_ed_university: rng.gen::<f64>() < 0.5,
            eval_zscore: if rng.gen::<f64>() < 0.3 {
                Some(normal(&mut rng, 0.0, 1.0))
            } else {
                None
            },
            eval_passed: None,
            school_id,
        });
    }

    let mut students = Vec::new();
    let mut scores = Vec::new();
    let mut education = Vec::new();
    let mut employment = Vec::new();
    let mut outcome_continuous = BTreeMap::new();

    for (year_idx, &year) in config.years.iter().enumerate() {
        for t in 0..n_teachers {
            let teacher = &teacher_records[t];
            let classroom_id = format!("c{t:06}y{year}");
            for seat in 0..config.students_per_teacher {
                let entity = student_entity(year_idx, t, seat);
                let mut rng = stream_rng(seed, StreamKind::Student, entity);
                let student_id = format!("i{year}t{t:06}n{seat:04}");
                let female = seat % 2 == 0;
                let male = f64::from(!female);

                let ability = if config.confounded {
                    // Ability tilted by the teacher's gap parameter.
                    normal(&mut rng, 0.6 * (theta[t] - prior_mean), config.ability_sd)
                } else {
                    normal(&mut rng, 0.0, config.ability_sd)
                };
                let lag_math = normal(&mut rng, 0.0, 1.0);
                let lag_lang = normal(&mut rng, 0.0, 1.0);
                let lag_phys = normal(&mut rng, 0.0, 1.0);
                let structural = va_f[t]
                    + va_gap[t] * male
                    + config.male_shift * male
                    + config.lag_loadings[0] * lag_math
                    + config.lag_loadings[1] * lag_lang
                    + config.lag_loadings[2] * lag_phys
                    + ability;
                let e_blind = normal(&mut rng, 0.0, 1.0);
                let e_extra = normal(&mut rng, 0.0, 1.0);
                let rho = config.cross_eq_correlation;
                let blind = structural + config.noise_blind_sd * e_blind;
                let teacher_score = structural
                    + theta[t] * male
                    + config.noise_teacher_sd * (rho * e_blind + (1.0 - rho * rho).sqrt() * e_extra);

                let miss = |rng: &mut ChaCha8Rng, v: f64| {
                    if config.lag_missing_rate > 0.0 && rng.gen::<f64>() < config.lag_missing_rate {
                        None
                    } else {
                        Some(v)
                    }
                };
                let lagged_math = miss(&mut rng, lag_math);
                let lagged_language = miss(&mut rng, lag_lang);
                let lagged_physed = miss(&mut rng, lag_phys);

                students.push(StudentRecord {
                    student_id: student_id.clone(),
                    female,
                    age_months: 13 * 12 + (rng.gen_range(0..24) as i32),
                    birthplace_code: format!("b{:02}", rng.gen_range(0..10)),
                    language_code: if rng.gen::<f64>() < 0.85 { "es".into() } else { "qu".into() },
                    mother_education: if rng.gen::<f64>() < 0.2 {
                        None
                    } else {
                        Some(format!("m{}", rng.gen_range(0..4)))
                    },
                    cct_flag: Some(rng.gen::<f64>() < 0.25),
                    school_id: teacher.school_id.clone(),
                    classroom_id: classroom_id.clone(),
                    grade: 8,
                    school_year: year,
                    cohort_projected_grad: year + 3,
                });
                scores.push(ScoreObservation {
                    student_id: student_id.clone(),
                    teacher_id: teacher.teacher_id.clone(),
                    subject: config.subject,
                    school_year: year,
                    teacher_score,
                    blind_score: blind,
                    lagged_math,
                    lagged_language,
                    lagged_physed,
                    standardized: false,
                });

                // Outcome: linear index in the standardized true gap.
                let mut orng = stream_rng(seed, StreamKind::Outcome, entity);
                let theta_std = (theta[t] - prior_mean) / prior_sd_for_std;
                let covariate = normal(&mut orng, 0.0, 1.0);
                let fem = f64::from(female);
                let index = config.outcome.delta0
                    + config.outcome.delta1 * theta_std * fem
                    + config.outcome.delta2 * fem
                    + config.outcome.delta3 * theta_std
                    + config.outcome.delta4 * covariate;
                if config.outcome.binary {
                    let grad_ever = orng.gen::<f64>() < index.clamp(0.0, 1.0);
                    let grad_on_time = grad_ever && orng.gen::<f64>() < 0.9;
                    let applied = grad_ever && orng.gen::<f64>() < 0.35;
                    let admitted = applied && orng.gen::<f64>() < 0.7;
                    let enrolled = admitted && orng.gen::<f64>() < 0.85;
                    education.push(EducationOutcomes {
                        student_id: student_id.clone(),
                        grad_on_time,
                        grad_ever,
                        college_applied_on_time: applied,
                        college_applied_ever: applied,
                        college_admitted_on_time: admitted,
                        college_admitted_ever: admitted,
                        college_enrolled_on_time: enrolled,
                        college_enrolled_ever: enrolled,
                    });
                } else {
                    let y = index + normal(&mut orng, 0.0, config.outcome.noise_sd);
                    outcome_continuous.insert(student_id.clone(), y);
                }

                if config.employment {
                    let mut erng = stream_rng(seed, StreamKind::Employment, entity);
                    let grad_year = year + 3;
                    // A single dominant employer, monthly rows over the two
                    // years after projected graduation.
                    if erng.gen::<f64>() < (0.1 + 0.05 * fem).clamp(0.0, 1.0) {
                        let employer = format!("e{:05}", erng.gen_range(0..500));
                        let base = 180.0 + 40.0 * normal(&mut erng, 0.0, 1.0).abs();
                        for offset in 1..=2i32 {
                            for month in 1..=12u8 {
                                if erng.gen::<f64>() < 0.6 {
                                    employment.push(EmploymentMonth {
                                        worker_id: student_id.clone(),
                                        employer_id: employer.clone(),
                                        year: grad_year + offset,
                                        month,
                                        earnings_usd2010: base
                                            * (1.0 + 0.1 * normal(&mut erng, 0.0, 1.0)).max(0.1),
                                        paid_hours: 100.0 + 10.0 * normal(&mut erng, 0.0, 1.0),
                                        formal_contract: true,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Teacher IAT logs tied to the standardized gap.
    let mut teacher_iat_trials = Vec::new();
    let mut truth_iat = BTreeMap::new();
    if let Some(iat) = &config.teacher_iat {
        for t in 0..n_teachers {
            let mut rng = stream_rng(seed, StreamKind::IatRespondent, t as u64);
            let theta_std = (theta[t] - prior_mean) / prior_sd_for_std;
            let d_target =
                (iat.intercept + iat.slope * theta_std + normal(&mut rng, 0.0, iat.noise_sd))
                    .clamp(-1.9, 1.9);
            let trials = iat_trials_for_target(
                &mut rng,
                &teacher_records[t].teacher_id,
                d_target,
                iat.trials_per_block,
            )?;
            truth_iat.insert(teacher_records[t].teacher_id.clone(), d_target);
            teacher_iat_trials.extend(trials);
        }
    }

    let truth = GroundTruth {
        seed,
        rng_algorithm: RNG_ALGORITHM.into(),
        prior_mean,
        prior_variance: prior_var,
        theta: truth_theta,
        va_female: truth_va,
        deltas: [
            config.outcome.delta0,
            config.outcome.delta1,
            config.outcome.delta2,
            config.outcome.delta3,
            config.outcome.delta4,
        ],
        teacher_iat_d: truth_iat,
    };

    Ok(SyntheticData {
        students,
        scores,
        teachers: teacher_records,
        employment,
        education,
        outcome_continuous,
        teacher_iat_trials,
        truth,
    })
}

/// Latency-model parameters shared by the IAT oracle.
const IAT_SHIFT_MS: f64 = 500.0;
const IAT_LOG_MU: f64 = 5.521_460_917_862_246; // ln(250)
const IAT_LOG_SIGMA: f64 = 0.4;

/// Shifted log-normal trial logs whose block-mean offset implies the target
/// D under the population pooled-SD convention.
pub fn iat_trials_for_target(
    rng: &mut ChaCha8Rng,
    respondent_id: &str,
    d_target: f64,
    trials_per_block: usize,
) -> Result<Vec<IatTrial>> {
    if d_target.abs() >= 2.0 {
        return Err(Error::InvalidConfig(format!(
            "target D {d_target} is infeasible under the latency model (|D| < 2)"
        )));
    }
    // Var of the log-normal component.
    let s2 = IAT_LOG_SIGMA * IAT_LOG_SIGMA;
    let var_e = (s2.exp() - 1.0) * (2.0 * IAT_LOG_MU + s2).exp();
    let sd_e = var_e.sqrt();
    // Offset delta between block means so that
    // D = delta / sqrt(var_e + delta^2/4).
    let delta = d_target * sd_e / (1.0 - d_target * d_target / 4.0).sqrt();

    let mut out = Vec::with_capacity(trials_per_block * 4);
    let lognorm = rand_distr::LogNormal::new(IAT_LOG_MU, IAT_LOG_SIGMA).unwrap();
    for block in [
        IatBlock::PracticeCompatible,
        IatBlock::PracticeIncompatible,
        IatBlock::TestCompatible,
        IatBlock::TestIncompatible,
    ] {
        let offset = match block {
            IatBlock::PracticeCompatible | IatBlock::TestCompatible => -delta / 2.0,
            _ => delta / 2.0,
        };
        for i in 0..trials_per_block {
            let latency = (IAT_SHIFT_MS + lognorm.sample(rng) + offset).max(320.0);
            out.push(IatTrial {
                respondent_id: respondent_id.to_string(),
                block,
                trial_index: i as u32,
                latency_ms: latency,
                correct: true,
            });
        }
    }
    Ok(out)
}

/// Write the generated panel in the exact formats the loader reads, plus the
/// ground-truth document.
pub fn write_all(dir: &Path, data: &SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    crate::panel::write_students(&dir.join("students.csv"), &data.students)?;
    crate::panel::write_scores(&dir.join("scores.csv"), &data.scores)?;
    crate::panel::write_teachers(&dir.join("teachers.csv"), &data.teachers)?;
    crate::panel::write_employment(&dir.join("employment.csv"), &data.employment)?;
    crate::panel::write_education_outcomes(&dir.join("outcomes.csv"), &data.education)?;
    if !data.teacher_iat_trials.is_empty() {
        crate::iat::write_trials(&dir.join("iat_trials.csv"), &data.teacher_iat_trials)?;
    }
    if !data.outcome_continuous.is_empty() {
        let path = dir.join("outcome_continuous.csv");
        let mut w = crate::table::writer(&path)?;
        crate::table::write_record(&mut w, &path, ["student_id", "value"])?;
        for (id, v) in &data.outcome_continuous {
            let fields = [id.clone(), crate::table::fmt_f64(*v)];
            crate::table::write_record(&mut w, &path, fields.iter().map(String::as_str))?;
        }
        crate::table::flush(w, &path)?;
    }
    let truth_path = dir.join("truth.json");
    let json = serde_json::to_string_pretty(&data.truth)
        .map_err(|e| Error::InvalidInput(format!("ground truth serialization: {e}")))?;
    std::fs::write(&truth_path, json).map_err(|source| Error::Io {
        path: truth_path.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaps::{estimate_system, join_gender, teacher_gaps, CovariateSpec};
    use crate::iat::{score_iat, ScoreResult, ScoringOptions};
    use crate::panel::{load_panel, PanelSchema};

    fn small_config(seed: u64) -> DgpConfig {
        DgpConfig {
            seed,
            teachers: 12,
            students_per_teacher: 10,
            schools: 4,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = small_config(9);
        write_all(dir_a.path(), &generate(&config).unwrap()).unwrap();
        write_all(dir_b.path(), &generate(&config).unwrap()).unwrap();
        for name in ["students.csv", "scores.csv", "teachers.csv", "outcomes.csv", "truth.json"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across identical runs");
        }
    }

    #[test]
    fn generated_panel_loads_with_zero_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(11);
        config.employment = true;
        config.lag_missing_rate = 0.1;
        let data = generate(&config).unwrap();
        write_all(dir.path(), &data).unwrap();
        let loaded = load_panel(dir.path(), &PanelSchema::default()).unwrap();
        assert!(loaded.rejects.is_empty());
        assert_eq!(loaded.panel.students.len(), data.students.len());
        assert_eq!(loaded.panel.scores.len(), data.scores.len());
        assert_eq!(loaded.panel.employment.len(), data.employment.len());
        // Outcome ladders hold on every generated record.
        for e in &data.education {
            assert!(!e.grad_on_time || e.grad_ever);
            assert!(!e.college_admitted_ever || e.college_applied_ever);
            assert!(!e.college_enrolled_ever || e.college_admitted_ever);
        }
    }

    #[test]
    fn zero_noise_null_effect_recovers_exact_zero_gaps() {
        let config = DgpConfig {
            seed: 3,
            teachers: 6,
            students_per_teacher: 8,
            schools: 2,
            prior: PriorSpec::PointMass { value: 0.0 },
            noise_blind_sd: 0.0,
            noise_teacher_sd: 0.0,
            ..DgpConfig::default()
        };
        let data = generate(&config).unwrap();
        let female = join_gender(&data.scores, &data.students).unwrap();
        // Raw scale (no standardization): gaps vanish identically.
        let fit = estimate_system(&data.scores, &female, &CovariateSpec::with_lags()).unwrap();
        let gaps = teacher_gaps(&fit, 2).unwrap();
        assert_eq!(gaps.gaps.len(), 6);
        for g in &gaps.gaps {
            assert!(g.theta_hat.abs() < 1e-10, "{}", g.theta_hat);
        }
    }

    #[test]
    fn adding_teachers_leaves_existing_draws_alone() {
        let base = generate(&small_config(21)).unwrap();
        let mut bigger_config = small_config(21);
        bigger_config.teachers += 5;
        let bigger = generate(&bigger_config).unwrap();
        // Scores of the original teachers' students are bit-identical.
        let key = |o: &crate::panel::ScoreObservation| {
            (o.student_id.clone(), o.teacher_id.clone(), o.school_year)
        };
        let base_scores: std::collections::BTreeMap<_, (f64, f64)> = base
            .scores
            .iter()
            .map(|o| (key(o), (o.teacher_score, o.blind_score)))
            .collect();
        let mut matched = 0;
        for o in &bigger.scores {
            if let Some(&(t, b)) = base_scores.get(&key(o)) {
                assert_eq!(o.teacher_score.to_bits(), t.to_bits());
                assert_eq!(o.blind_score.to_bits(), b.to_bits());
                matched += 1;
            }
        }
        assert_eq!(matched, base.scores.len());
    }

    #[test]
    fn cross_equation_correlation_is_planted() {
        let mut config = small_config(4);
        config.teachers = 30;
        config.students_per_teacher = 60;
        config.cross_eq_correlation = 1.0;
        config.noise_blind_sd = 0.5;
        config.noise_teacher_sd = 0.5;
        config.prior = PriorSpec::PointMass { value: 0.0 };
        let data = generate(&config).unwrap();
        let female = join_gender(&data.scores, &data.students).unwrap();
        let fit = crate::gaps::sure_fit(&data.scores, &female, &CovariateSpec::with_lags()).unwrap();
        assert!(
            (fit.residual_correlation() - 1.0).abs() < 1e-6,
            "rho {}",
            fit.residual_correlation()
        );
    }

    #[test]
    fn iat_target_zero_recovers_near_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut sum = 0.0;
        let n = 100;
        for r in 0..n {
            let trials =
                iat_trials_for_target(&mut rng, &format!("r{r}"), 0.0, 30).unwrap();
            match score_iat(&trials, &ScoringOptions::default()).unwrap() {
                ScoreResult::Scored(s) => sum += s.d_score,
                other => panic!("{other:?}"),
            }
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 0.05, "mean recovered D {mean}");
    }

    #[test]
    fn iat_doubling_latencies_is_invisible_to_the_scorer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let trials = iat_trials_for_target(&mut rng, "r", 0.5, 30).unwrap();
        let doubled: Vec<crate::iat::IatTrial> = trials
            .iter()
            .map(|t| crate::iat::IatTrial { latency_ms: 2.0 * t.latency_ms, ..t.clone() })
            .collect();
        let d0 = match score_iat(&trials, &ScoringOptions::default()).unwrap() {
            ScoreResult::Scored(s) => s.d_score,
            other => panic!("{other:?}"),
        };
        let d1 = match score_iat(&doubled, &ScoringOptions::default()).unwrap() {
            ScoreResult::Scored(s) => s.d_score,
            other => panic!("{other:?}"),
        };
        assert!((d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn infeasible_iat_target_errors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(iat_trials_for_target(&mut rng, "r", 2.3, 30).is_err());
        assert!(iat_trials_for_target(&mut rng, "r", -2.0, 30).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config(1);
        c.noise_blind_sd = -0.1;
        assert!(generate(&c).is_err());
        let mut c = small_config(1);
        c.cross_eq_correlation = 1.5;
        assert!(generate(&c).is_err());
        let mut c = small_config(1);
        c.prior = PriorSpec::Mixture { weights: vec![0.5], mus: vec![0.0, 1.0], sds: vec![0.1, 0.1] };
        assert!(generate(&c).is_err());
    }
}
