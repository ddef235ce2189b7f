//! Score standardization by (school year, subject) cell.

use std::collections::BTreeMap;

use super::types::{ScoreObservation, Subject};
use crate::{Error, Result};

/// Mean and population standard deviation of a slice.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn zscore_group(
    values: &mut [(usize, f64)],
    cell: &str,
) -> Result<BTreeMap<usize, f64>> {
    let raw: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    let (mean, sd) = moments(&raw);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::DegenerateCell {
            cell: cell.to_string(),
            message: format!("zero variance across {} value(s)", raw.len()),
        });
    }
    Ok(values
        .iter()
        .map(|(idx, v)| (*idx, (v - mean) / sd))
        .collect())
}

/// Z-score teacher and blind scores within each (year, subject) cell, and
/// each lagged score within its (year, lag) cell, using the population
/// (1/N) standard deviation. The transformation is idempotent up to
/// floating-point roundoff.
pub fn standardize_scores(obs: &[ScoreObservation]) -> Result<Vec<ScoreObservation>> {
    let mut out = obs.to_vec();

    // (year, subject) cells for the two contemporaneous scores.
    let mut cells: BTreeMap<(i32, Subject), Vec<usize>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        cells.entry((o.school_year, o.subject)).or_default().push(i);
    }
    for ((year, subject), rows) in &cells {
        let cell = format!("year={year}/subject={subject}");
        let mut teacher: Vec<(usize, f64)> =
            rows.iter().map(|&i| (i, obs[i].teacher_score)).collect();
        let mut blind: Vec<(usize, f64)> =
            rows.iter().map(|&i| (i, obs[i].blind_score)).collect();
        for (i, z) in zscore_group(&mut teacher, &cell)? {
            out[i].teacher_score = z;
        }
        for (i, z) in zscore_group(&mut blind, &cell)? {
            out[i].blind_score = z;
        }
    }

    // (year, lag) cells: each lag pools across row subjects since the lag
    // itself identifies the subject it was scored in.
    for (lag_name, get, set) in LAG_ACCESSORS {
        let mut lag_cells: BTreeMap<i32, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, o) in obs.iter().enumerate() {
            if let Some(v) = get(o) {
                lag_cells.entry(o.school_year).or_default().push((i, v));
            }
        }
        for (year, mut values) in lag_cells {
            let cell = format!("year={year}/lag={lag_name}");
            for (i, z) in zscore_group(&mut values, &cell)? {
                set(&mut out[i], z);
            }
        }
    }

    for o in &mut out {
        o.standardized = true;
    }
    Ok(out)
}

type LagGet = fn(&ScoreObservation) -> Option<f64>;
type LagSet = fn(&mut ScoreObservation, f64);

const LAG_ACCESSORS: [(&str, LagGet, LagSet); 3] = [
    ("math", |o| o.lagged_math, |o, v| o.lagged_math = Some(v)),
    ("language", |o| o.lagged_language, |o, v| o.lagged_language = Some(v)),
    ("physed", |o| o.lagged_physed, |o, v| o.lagged_physed = Some(v)),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};

    fn obs(student: &str, year: i32, teacher_score: f64, blind_score: f64) -> ScoreObservation {
        ScoreObservation {
            student_id: student.into(),
            teacher_id: "t0".into(),
            subject: Subject::Math,
            school_year: year,
            teacher_score,
            blind_score,
            lagged_math: None,
            lagged_language: None,
            lagged_physed: None,
            standardized: false,
        }
    }

    #[test]
    fn two_point_cell_maps_to_plus_minus_one() {
        let rows = vec![obs("a", 2015, 10.0, 10.0), obs("b", 2015, 20.0, 20.0)];
        let out = standardize_scores(&rows).unwrap();
        assert_eq!(out[0].teacher_score, -1.0);
        assert_eq!(out[1].teacher_score, 1.0);
        assert_eq!(out[0].blind_score, -1.0);
        assert_eq!(out[1].blind_score, 1.0);
        assert!(out.iter().all(|o| o.standardized));
    }

    #[test]
    fn degenerate_cell_is_named() {
        let rows = vec![obs("a", 2015, 7.0, 1.0), obs("b", 2015, 7.0, 2.0)];
        let err = standardize_scores(&rows).unwrap_err();
        match err {
            Error::DegenerateCell { cell, .. } => {
                assert_eq!(cell, "year=2015/subject=math");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn generated_cell_has_unit_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<ScoreObservation> = (0..5000)
            .map(|i| {
                let v = 5.0 + 2.0 * crate::panel::tests_normal(&mut rng);
                let w = -1.0 + 0.5 * crate::panel::tests_normal(&mut rng);
                obs(&format!("s{i}"), 2016, v, w)
            })
            .collect();
        let out = standardize_scores(&rows).unwrap();
        let t: Vec<f64> = out.iter().map(|o| o.teacher_score).collect();
        let (mean, sd) = moments(&t);
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((sd * sd - 1.0).abs() < 1e-10, "var {}", sd * sd);
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn idempotent_to_machine_precision() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        for i in 0..200 {
            let year = 2015 + (i % 2) as i32;
            let mut o = obs(
                &format!("s{i}"),
                year,
                crate::panel::tests_normal(&mut rng) * 3.0 + 10.0,
                crate::panel::tests_normal(&mut rng) * 2.0,
            );
            o.lagged_math = Some(crate::panel::tests_normal(&mut rng));
            rows.push(o);
        }
        let once = standardize_scores(&rows).unwrap();
        let twice = standardize_scores(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a.teacher_score - b.teacher_score).abs() < 1e-12);
            assert!((a.blind_score - b.blind_score).abs() < 1e-12);
            let (la, lb) = (a.lagged_math.unwrap(), b.lagged_math.unwrap());
            assert!((la - lb).abs() < 1e-12);
        }
    }

    #[test]
    fn lags_standardize_within_year_across_subjects() {
        let mut rows = vec![
            obs("a", 2015, 1.0, 2.0),
            obs("b", 2015, 2.0, 1.0),
            obs("c", 2015, 3.0, 4.0),
        ];
        rows[1].subject = Subject::Science; // lag pools across subjects
        rows[0].lagged_math = Some(10.0);
        rows[1].lagged_math = Some(20.0);
        rows[2].lagged_math = None;
        // The science cell has one row; give it a partner so contemporaneous
        // standardization is defined.
        let mut extra = obs("d", 2015, 9.0, 9.0);
        extra.subject = Subject::Science;
        rows.push(extra);
        let out = standardize_scores(&rows).unwrap();
        assert_eq!(out[0].lagged_math, Some(-1.0));
        assert_eq!(out[1].lagged_math, Some(1.0));
        assert_eq!(out[2].lagged_math, None);
    }
}
