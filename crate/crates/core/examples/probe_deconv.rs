use gradegap_core::eb::{deconvolve, BasisSpec, DeconvOptions, GridSpec};
use gradegap_core::gaps::TeacherGapEstimate;
use gradegap_core::panel::Subject;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use std::collections::BTreeSet;

fn gap(id: &str, theta: f64, se: f64) -> TeacherGapEstimate {
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

fn modes(grid: &[f64], g: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 1..g.len() - 1 {
        if g[i] > g[i - 1] && g[i] >= g[i + 1] && g[i] > 1e-4 {
            out.push((grid[i], g[i]));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    out
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let norm = rand_distr::StandardNormal;
    let j = 2000;
    let s = 0.05;
    let gaps: Vec<TeacherGapEstimate> = (0..j)
        .map(|i| {
            let mu = if rng.gen::<f64>() < 0.5 { -0.4 } else { -0.1 };
            let theta = mu + 0.05 * <f64 as From<_>>::from(Distribution::<f64>::sample(&norm, &mut rng));
            let obs = theta + s * Distribution::<f64>::sample(&norm, &mut rng);
            gap(&format!("t{i}"), obs, s)
        })
        .collect();
    let (lo, hi) = gaps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, g| {
        (a.0.min(g.theta_hat), a.1.max(g.theta_hat))
    });
    println!("observed range [{lo:.4}, {hi:.4}]  (true modes -0.4, -0.1; prior var 0.025)");
    let grid = GridSpec { lo: lo - 0.05, hi: hi + 0.05, points: 81 };
    for (p, c0) in [
        (12usize, 0.5f64),
        (12, 1.0),
        (12, 2.0),
        (16, 1.0),
        (16, 2.0),
        (20, 1.0),
        (8, 1.0),
    ] {
        let t0 = std::time::Instant::now();
        let prior = deconvolve(
            &gaps,
            &grid,
            &BasisSpec { columns: p },
            c0,
            &DeconvOptions { max_iterations: 500, ..DeconvOptions::default() },
        )
        .unwrap();
        let m = modes(&prior.grid, &prior.g);
        let top: Vec<String> = m.iter().take(4).map(|(t, g)| format!("({t:.4},{g:.4})")).collect();
        println!(
            "p={p} c0={c0} iters={} conv={} mean={:.4} var={:.5} modes={} {:?} elapsed={:?}",
            prior.iterations,
            prior.converged,
            prior.mean(),
            prior.variance(),
            m.len(),
            top,
            t0.elapsed()
        );
    }
}
