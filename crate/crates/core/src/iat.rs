//! Implicit-association-test latency scoring.
//!
//! The scorer follows the improved D-score procedure: overly slow trials are
//! dropped, respondents with too many overly fast trials are discarded,
//! error-trial latencies are replaced by the block mean of correct trials
//! plus a fixed penalty, and each block pair contributes
//! `(mean incompatible - mean compatible) / pooled SD of the pair's trials`.
//! The reported D is the mean over the available pairs, clamped to [-2, 2].

use std::collections::BTreeMap;
use std::path::Path;

use crate::panel::moments;
use crate::table::{flush, fmt_f64, write_record, writer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IatBlock {
    PracticeCompatible,
    TestCompatible,
    PracticeIncompatible,
    TestIncompatible,
}

impl IatBlock {
    pub fn parse(s: &str) -> Option<IatBlock> {
        match s.trim().to_ascii_lowercase().as_str() {
            "practice_compatible" => Some(IatBlock::PracticeCompatible),
            "test_compatible" => Some(IatBlock::TestCompatible),
            "practice_incompatible" => Some(IatBlock::PracticeIncompatible),
            "test_incompatible" => Some(IatBlock::TestIncompatible),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            IatBlock::PracticeCompatible => "practice_compatible",
            IatBlock::TestCompatible => "test_compatible",
            IatBlock::PracticeIncompatible => "practice_incompatible",
            IatBlock::TestIncompatible => "test_incompatible",
        }
    }
}

/// One latency trial.
#[derive(Debug, Clone, PartialEq)]
pub struct IatTrial {
    pub respondent_id: String,
    pub block: IatBlock,
    pub trial_index: u32,
    pub latency_ms: f64,
    pub correct: bool,
}

/// Severity categories in increasing order of implicit preference for boys
/// in science.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum IatCategory {
    PreferenceForGirls,
    LittleToNone,
    Slight,
    ModerateToSevere,
    Strong,
}

impl IatCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            IatCategory::PreferenceForGirls => "preference_for_girls",
            IatCategory::LittleToNone => "little_to_none",
            IatCategory::Slight => "slight",
            IatCategory::ModerateToSevere => "moderate_to_severe",
            IatCategory::Strong => "strong",
        }
    }
}

/// Break points -0.15, 0.15, 0.35, 0.65; intervals closed on the left.
pub fn classify(d: f64) -> IatCategory {
    if d < -0.15 {
        IatCategory::PreferenceForGirls
    } else if d < 0.15 {
        IatCategory::LittleToNone
    } else if d < 0.35 {
        IatCategory::Slight
    } else if d < 0.65 {
        IatCategory::ModerateToSevere
    } else {
        IatCategory::Strong
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdConvention {
    /// 1/N denominator (default; matches score standardization elsewhere).
    Population,
    /// 1/(N-1) denominator.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRule {
    /// Use the practice pair (when complete) and the test pair.
    PracticeAndTest,
    TestOnly,
}

#[derive(Debug, Clone)]
pub struct ScoringOptions {
    pub min_trials: usize,
    pub slow_cutoff_ms: f64,
    pub fast_cutoff_ms: f64,
    /// Discard the respondent when more than this share of trials is fast.
    pub fast_share_limit: f64,
    pub error_penalty_ms: f64,
    pub sd: SdConvention,
    pub pairs: PairRule,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            min_trials: 10,
            slow_cutoff_ms: 10_000.0,
            fast_cutoff_ms: 300.0,
            fast_share_limit: 0.10,
            error_penalty_ms: 600.0,
            sd: SdConvention::Population,
            pairs: PairRule::PracticeAndTest,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IatScore {
    pub respondent_id: String,
    pub d_score: f64,
    pub category: IatCategory,
    pub n_trials_used: usize,
    /// Raw D fell outside [-2, 2] and was clamped.
    pub clamped: bool,
    /// Which pairs entered the mean ("practice+test" or "test").
    pub pairs_used: &'static str,
}

/// Scoring outcome: a discarded respondent is an explicit result, never a
/// silent omission.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreResult {
    Scored(IatScore),
    Discarded { respondent_id: String, reason: String },
}

fn pooled_sd(values: &[f64], convention: SdConvention) -> f64 {
    let (mean, _) = moments(values);
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match convention {
        SdConvention::Population => values.len() as f64,
        SdConvention::Sample => (values.len() - 1).max(1) as f64,
    };
    (ss / denom).sqrt()
}

/// Score one respondent's trial log.
pub fn score_iat(trials: &[IatTrial], opts: &ScoringOptions) -> Result<ScoreResult> {
    if trials.is_empty() {
        return Err(Error::Unscorable {
            respondent: "<none>".into(),
            reason: "empty trial log".into(),
        });
    }
    let respondent = trials[0].respondent_id.clone();
    if trials.iter().any(|t| t.respondent_id != respondent) {
        return Err(Error::InvalidInput(
            "score_iat takes one respondent's trials at a time".into(),
        ));
    }
    if trials.iter().any(|t| !(t.latency_ms > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "respondent {respondent}: latencies must be positive"
        )));
    }

    // Step 1: drop overly slow trials.
    let kept: Vec<&IatTrial> = trials
        .iter()
        .filter(|t| t.latency_ms <= opts.slow_cutoff_ms)
        .collect();
    if kept.is_empty() {
        return Err(Error::Unscorable {
            respondent,
            reason: "no trials under the slow cutoff".into(),
        });
    }

    // Step 2: fast-responder discard.
    let fast = kept
        .iter()
        .filter(|t| t.latency_ms < opts.fast_cutoff_ms)
        .count();
    if (fast as f64) > opts.fast_share_limit * kept.len() as f64 {
        return Ok(ScoreResult::Discarded {
            respondent_id: respondent,
            reason: "fast-responder".into(),
        });
    }

    // Step 3: penalized latencies per block.
    let mut blocks: BTreeMap<IatBlock, Vec<f64>> = BTreeMap::new();
    for block in [
        IatBlock::PracticeCompatible,
        IatBlock::TestCompatible,
        IatBlock::PracticeIncompatible,
        IatBlock::TestIncompatible,
    ] {
        let members: Vec<&&IatTrial> = kept.iter().filter(|t| t.block == block).collect();
        if members.is_empty() {
            continue;
        }
        let mut correct: Vec<f64> = members
            .iter()
            .filter(|t| t.correct)
            .map(|t| t.latency_ms)
            .collect();
        correct.sort_by(f64::total_cmp);
        if correct.is_empty() {
            return Err(Error::Unscorable {
                respondent: respondent.clone(),
                reason: format!("block {} has no correct trials", block.as_str()),
            });
        }
        let correct_mean = correct.iter().sum::<f64>() / correct.len() as f64;
        let mut penalized: Vec<f64> = members
            .iter()
            .map(|t| {
                if t.correct {
                    t.latency_ms
                } else {
                    correct_mean + opts.error_penalty_ms
                }
            })
            .collect();
        // Canonical summation order: scoring is bit-identical under any
        // permutation of trials within blocks.
        penalized.sort_by(f64::total_cmp);
        blocks.insert(block, penalized);
    }

    let big_enough = |b: IatBlock| blocks.get(&b).map_or(false, |v| v.len() >= opts.min_trials);
    if !big_enough(IatBlock::TestCompatible) || !big_enough(IatBlock::TestIncompatible) {
        return Err(Error::Unscorable {
            respondent,
            reason: format!(
                "test blocks need at least {} trials after filtering",
                opts.min_trials
            ),
        });
    }

    let mut pair_list: Vec<(IatBlock, IatBlock)> =
        vec![(IatBlock::TestCompatible, IatBlock::TestIncompatible)];
    let mut pairs_used = "test";
    if opts.pairs == PairRule::PracticeAndTest
        && big_enough(IatBlock::PracticeCompatible)
        && big_enough(IatBlock::PracticeIncompatible)
    {
        pair_list.insert(
            0,
            (IatBlock::PracticeCompatible, IatBlock::PracticeIncompatible),
        );
        pairs_used = "practice+test";
    }

    // Step 4: per-pair D and the mean over pairs.
    let mut d_sum = 0.0;
    let mut n_used = 0usize;
    for (comp, incomp) in &pair_list {
        let c = &blocks[comp];
        let i = &blocks[incomp];
        let mean_c = c.iter().sum::<f64>() / c.len() as f64;
        let mean_i = i.iter().sum::<f64>() / i.len() as f64;
        let mut all: Vec<f64> = Vec::with_capacity(c.len() + i.len());
        all.extend_from_slice(c);
        all.extend_from_slice(i);
        let sd = pooled_sd(&all, opts.sd);
        let num = mean_i - mean_c;
        let d_pair = if sd > 0.0 {
            num / sd
        } else if num == 0.0 {
            0.0
        } else {
            return Err(Error::Unscorable {
                respondent: respondent.clone(),
                reason: "zero latency variance within a block pair".into(),
            });
        };
        d_sum += d_pair;
        n_used += c.len() + i.len();
    }
    let d_raw = d_sum / pair_list.len() as f64;
    let clamped = !(-2.0..=2.0).contains(&d_raw);
    let d_score = d_raw.clamp(-2.0, 2.0);

    Ok(ScoreResult::Scored(IatScore {
        respondent_id: respondent,
        d_score,
        category: classify(d_score),
        n_trials_used: n_used,
        clamped,
        pairs_used,
    }))
}

/// Group a trial stream by respondent (order of first appearance) and score
/// each one.
pub fn score_all(trials: &[IatTrial], opts: &ScoringOptions) -> Result<Vec<ScoreResult>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_resp: BTreeMap<&str, Vec<IatTrial>> = BTreeMap::new();
    for t in trials {
        if !by_resp.contains_key(t.respondent_id.as_str()) {
            order.push(t.respondent_id.as_str());
        }
        by_resp
            .entry(t.respondent_id.as_str())
            .or_default()
            .push(t.clone());
    }
    order
        .iter()
        .map(|id| score_iat(&by_resp[id], opts))
        .collect()
}

/// Z-score the non-discarded scores (population SD). Discarded respondents
/// are excluded from the moment computation.
pub fn standardize_iat(results: &[ScoreResult]) -> Result<BTreeMap<String, f64>> {
    let scored: Vec<&IatScore> = results
        .iter()
        .filter_map(|r| match r {
            ScoreResult::Scored(s) => Some(s),
            ScoreResult::Discarded { .. } => None,
        })
        .collect();
    if scored.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "standardization needs at least 2 scored respondents, have {}",
            scored.len()
        )));
    }
    let values: Vec<f64> = scored.iter().map(|s| s.d_score).collect();
    let (mean, sd) = moments(&values);
    if sd == 0.0 {
        return Err(Error::DegenerateRegressor("iat d_score has zero variance".into()));
    }
    Ok(scored
        .iter()
        .map(|s| (s.respondent_id.clone(), (s.d_score - mean) / sd))
        .collect())
}

const TRIAL_HEADER: [&str; 5] = ["respondent_id", "block", "trial_index", "latency_ms", "correct"];

pub fn write_trials(path: &Path, trials: &[IatTrial]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(&mut w, path, TRIAL_HEADER.iter().copied())?;
    for t in trials {
        let fields = [
            t.respondent_id.clone(),
            t.block.as_str().to_string(),
            t.trial_index.to_string(),
            fmt_f64(t.latency_ms),
            t.correct.to_string(),
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

pub fn read_trials(path: &Path) -> Result<Vec<IatTrial>> {
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
        let block = IatBlock::parse(get(1)).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("unknown block {:?}", get(1)),
        })?;
        out.push(IatTrial {
            respondent_id: get(0).to_string(),
            block,
            trial_index: get(2).parse().unwrap_or(0),
            latency_ms: crate::table::parse_f64(get(3), path, line)?,
            correct: get(4).trim() == "true" || get(4).trim() == "1",
        });
    }
    Ok(out)
}

/// Scores plus an explicit discard report.
pub fn write_scores(path: &Path, discard_path: &Path, results: &[ScoreResult]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(
        &mut w,
        path,
        ["respondent_id", "d_score", "category", "n_trials_used", "clamped", "pairs"],
    )?;
    let mut d = writer(discard_path)?;
    write_record(&mut d, discard_path, ["respondent_id", "reason"])?;
    for r in results {
        match r {
            ScoreResult::Scored(s) => {
                let fields = [
                    s.respondent_id.clone(),
                    fmt_f64(s.d_score),
                    s.category.as_str().to_string(),
                    s.n_trials_used.to_string(),
                    s.clamped.to_string(),
                    s.pairs_used.to_string(),
                ];
                write_record(&mut w, path, fields.iter().map(String::as_str))?;
            }
            ScoreResult::Discarded { respondent_id, reason } => {
                let fields = [respondent_id.clone(), reason.clone()];
                write_record(&mut d, discard_path, fields.iter().map(String::as_str))?;
            }
        }
    }
    flush(w, path)?;
    flush(d, discard_path)
}
