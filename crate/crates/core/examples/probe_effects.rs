use gradegap_core::effects::{estimate_effects, EffectsCluster, EffectsSpec, ExposureRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

fn main() {
    // Size probe: crossed student/school partitions.
    for (schools, students, label) in [(30usize, 600usize, "30x600"), (40, 800, "40x800")] {
        let reps = 400;
        let mut rej_t = 0usize;
        let mut rej_z = 0usize;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(90_000 + rep as u64);
            let mut treatment = BTreeMap::new();
            for s in 0..schools {
                for g in 0..2u8 {
                    treatment.insert((s, g), normal(&mut rng));
                }
            }
            let school_eff: Vec<f64> = (0..schools).map(|_| 0.3 * normal(&mut rng)).collect();
            let mut rows = Vec::new();
            let mut y = Vec::new();
            for i in 0..students {
                let female = i % 2 == 0;
                let stud = 0.5 * normal(&mut rng);
                for g in 0..2u8 {
                    let school = rng.gen_range(0..schools);
                    rows.push(ExposureRow {
                        student_id: format!("i{i:04}"),
                        teacher_id: format!("t{school:02}g{g}"),
                        school_id: format!("s{school:02}"),
                        cohort: 2018,
                        grade: 8 + g,
                        school_year: 2015 + i32::from(g),
                        female,
                        treatment: treatment[&(school, g)],
                        covariates: vec![],
                    });
                    y.push(stud + school_eff[school] + 0.5 * normal(&mut rng));
                }
            }
            let fit = estimate_effects(&rows, &y, "null", &EffectsSpec {
                cluster: EffectsCluster::StudentAndSchool,
                ..EffectsSpec::default()
            })
            .unwrap();
            let c = fit.coefficient("theta_x_female").unwrap();
            let t = (c.estimate / c.se).abs();
            let df = (fit.n_clusters.iter().copied().min().unwrap() - 1) as f64;
            let tcrit = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
            if t > tcrit { rej_t += 1; }
            if t > 1.959963984540054 { rej_z += 1; }
        }
        println!(
            "size {label}: t-crit rate {:.3}  z-crit rate {:.3}",
            rej_t as f64 / reps as f64,
            rej_z as f64 / reps as f64
        );
    }
}
