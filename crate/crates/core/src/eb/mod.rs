//! Empirical Bayes posterior means for the gap estimates.
//!
//! Two routes: a Gaussian prior fitted from the bias-corrected variance
//! decomposition (linear shrinkage), and a nonparametric discretized
//! exponential-family prior recovered by penalized maximum likelihood
//! ([`deconv`]).

pub mod deconv;
pub mod spline;

pub use deconv::{
    calibrate_penalty, deconvolve, deconvolve_with_basis, gradient_fd_relative_error,
    posterior_mean_deconv, BasisSpec, CalibrationTrace, DeconvOptions, DiscretePrior, GridSpec,
};

use std::path::Path;

use crate::gaps::TeacherGapEstimate;
use crate::hetero::VarianceDecomposition;
use crate::table::{flush, fmt_f64, write_record, writer};
use crate::{Error, Result};

/// Floor applied to a non-positive prior variance.
pub const PHI2_FLOOR: f64 = 1e-8;

/// Gaussian prior over the true per-teacher gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    pub mu: f64,
    pub phi2: f64,
}

/// Hyperparameters from the variance decomposition: the unadjusted mean and
/// the student-weighted bias-corrected variance (floored when zero).
pub fn fit_gaussian_prior(decomposition: &VarianceDecomposition) -> GaussianPrior {
    GaussianPrior {
        mu: decomposition.unadjusted_mean,
        phi2: decomposition.var_weighted.max(PHI2_FLOOR),
    }
}

/// Which prior produced a posterior estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorTag {
    Gaussian,
    Deconvolved,
}

impl PriorTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorTag::Gaussian => "gaussian",
            PriorTag::Deconvolved => "deconvolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub teacher_id: String,
    pub theta_star: f64,
    pub posterior_variance: f64,
    pub prior_used: PriorTag,
}

/// Precision-weighted posterior means under the Gaussian prior:
///
/// ```text
/// theta*_j = (theta_j / s_j^2 + mu / phi^2) / (1 / s_j^2 + 1 / phi^2)
/// Sigma_j  = (1 / s_j^2 + 1 / phi^2)^-1
/// ```
pub fn shrink(
    gaps: &[TeacherGapEstimate],
    prior: &GaussianPrior,
) -> Result<Vec<PosteriorEstimate>> {
    if prior.phi2 <= 0.0 {
        return Err(Error::InvalidInput("prior variance must be positive".into()));
    }
    gaps.iter()
        .map(|g| {
            if !(g.se > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "teacher {}: standard error must be positive, got {}",
                    g.teacher_id, g.se
                )));
            }
            let prec_data = 1.0 / (g.se * g.se);
            let prec_prior = 1.0 / prior.phi2;
            let total = prec_data + prec_prior;
            Ok(PosteriorEstimate {
                teacher_id: g.teacher_id.clone(),
                theta_star: (g.theta_hat * prec_data + prior.mu * prec_prior) / total,
                posterior_variance: 1.0 / total,
                prior_used: PriorTag::Gaussian,
            })
        })
        .collect()
}

pub fn write_posteriors(path: &Path, rows: &[PosteriorEstimate]) -> Result<()> {
    let mut w = writer(path)?;
    write_record(
        &mut w,
        path,
        ["teacher_id", "theta_star", "posterior_variance", "prior"],
    )?;
    for r in rows {
        let fields = [
            r.teacher_id.clone(),
            fmt_f64(r.theta_star),
            fmt_f64(r.posterior_variance),
            r.prior_used.as_str().to_string(),
        ];
        write_record(&mut w, path, fields.iter().map(String::as_str))?;
    }
    flush(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaps::TeacherGapEstimate;
    use crate::panel::Subject;
    use std::collections::BTreeSet;

    pub(crate) fn gap(id: &str, theta: f64, se: f64) -> TeacherGapEstimate {
        TeacherGapEstimate {
            teacher_id: id.into(),
            subject: Subject::Math,
            theta_hat: theta,
            se,
            n_female: 10,
            n_male: 10,
            n_students: 20,
            years_used: BTreeSet::from([2015]),
        }
    }

    #[test]
    fn shrink_hand_value() {
        // theta=0.5, mu=0, phi^2=0.01, s^2=0.04:
        // theta* = (0.5/0.04) / (1/0.04 + 1/0.01) = 12.5/125 = 0.1.
        let prior = GaussianPrior { mu: 0.0, phi2: 0.01 };
        let out = shrink(&[gap("t", 0.5, 0.2)], &prior).unwrap();
        assert!((out[0].theta_star - 0.1).abs() < 1e-15);
        assert!((out[0].posterior_variance - 1.0 / 125.0).abs() < 1e-15);
    }

    #[test]
    fn shrink_limits() {
        let prior = GaussianPrior { mu: 0.0, phi2: 0.01 };
        // Vanishing sampling noise: no shrinkage.
        let out = shrink(&[gap("t", 0.5, 1e-6)], &prior).unwrap();
        assert!((out[0].theta_star - 0.5).abs() < 1e-6);
        // Vanishing prior variance: full shrinkage to mu.
        let tight = GaussianPrior { mu: -0.3, phi2: 1e-12 };
        let out = shrink(&[gap("t", 0.5, 0.2)], &tight).unwrap();
        assert!((out[0].theta_star - (-0.3)).abs() < 1e-6);
    }

    #[test]
    fn shrink_rejects_nonpositive_se() {
        let prior = GaussianPrior { mu: 0.0, phi2: 0.01 };
        assert!(shrink(&[gap("t", 0.5, 0.0)], &prior).is_err());
        assert!(shrink(&[gap("t", 0.5, -1.0)], &prior).is_err());
    }

    #[test]
    fn shrinkage_contracts_and_preserves_ranking() {
        let prior = GaussianPrior { mu: -0.2, phi2: 0.02 };
        let gaps: Vec<TeacherGapEstimate> = (0..50)
            .map(|i| gap(&format!("t{i}"), -0.8 + 0.03 * i as f64, 0.15))
            .collect();
        let out = shrink(&gaps, &prior).unwrap();
        for (g, p) in gaps.iter().zip(&out) {
            assert!((p.theta_star - prior.mu).abs() <= (g.theta_hat - prior.mu).abs() + 1e-15);
        }
        // Same se everywhere: order preserved.
        for w in out.windows(2) {
            assert!(w[0].theta_star <= w[1].theta_star + 1e-15);
        }
    }

    #[test]
    fn prior_from_decomposition_floors_zero_variance() {
        let gaps = vec![gap("a", 0.1, 0.1), gap("b", -0.1, 0.1)];
        let d = crate::hetero::variance_decomposition(&gaps).unwrap();
        // Hand evaluation: mu=0, corrected variance (0.01-0.01)=0.
        assert_eq!(d.unadjusted_mean, 0.0);
        assert_eq!(d.var_unweighted, 0.0);
        let prior = fit_gaussian_prior(&d);
        assert_eq!(prior.phi2, PHI2_FLOOR);
        // All posteriors collapse onto mu.
        let out = shrink(&gaps, &prior).unwrap();
        for p in &out {
            assert!((p.theta_star - prior.mu).abs() < 1e-3);
        }
    }
}
