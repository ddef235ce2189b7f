//! Configuration schema for the `effects` subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct EffectsConfig {
    pub subject: String,
    pub min_cell: usize,
    /// "gaussian" or "deconvolve".
    pub method: String,
    /// "school" or "student_school".
    pub cluster: String,
    pub school_by_gender: bool,
    /// Outcome names: education booleans (grad_on_time, grad_ever,
    /// college_applied_on_time, ...), labor outcomes
    /// (employed_formal_18_19, earnings_18_19, hours_18_19, and the 20_21 /
    /// 22_23 bins), or "continuous".
    pub outcomes: Vec<String>,
    /// Cohort (projected graduation year) -> exam years excluded from that
    /// cohort's treatment estimate. Empty means one exclusion per observed
    /// cohort: its own grade-8 exam year (cohort - 3).
    pub cohort_exclusions: BTreeMap<String, Vec<i32>>,
    /// Optional percentile-threshold series over an earnings outcome.
    pub percentiles: Option<PercentileConfig>,
    /// Optional internalization run: student IAT outcome file plus the
    /// treatment already attached to the rows.
    pub student_iat_file: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PercentileConfig {
    pub grid: Vec<f64>,
    /// Age bin label: "18-19", "20-21", or "22-23".
    pub age_bin: String,
    /// Optional CSV with one earnings column for the reference population;
    /// when absent the sample's own positive earnings are the reference.
    pub reference_file: Option<String>,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        EffectsConfig {
            subject: "math".into(),
            min_cell: 2,
            method: "gaussian".into(),
            cluster: "student_school".into(),
            school_by_gender: false,
            outcomes: vec!["grad_ever".into()],
            cohort_exclusions: BTreeMap::new(),
            percentiles: None,
            student_iat_file: None,
        }
    }
}

impl EffectsConfig {
    pub fn from_path(path: &Path) -> Result<EffectsConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn exclusion_map(
        &self,
        observed_cohorts: &BTreeSet<i32>,
    ) -> BTreeMap<i32, BTreeSet<i32>> {
        if self.cohort_exclusions.is_empty() {
            // Default: each cohort excludes its own grade-8 exam year.
            observed_cohorts
                .iter()
                .map(|&c| (c, BTreeSet::from([c - 3])))
                .collect()
        } else {
            self.cohort_exclusions
                .iter()
                .filter_map(|(k, v)| {
                    k.parse::<i32>()
                        .ok()
                        .map(|c| (c, v.iter().copied().collect()))
                })
                .collect()
        }
    }
}
