//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::DVector;
use pmelm::data::{PanelDataset, SubjectRecord};
use pmelm::influence::{self, decompose, local_curvature, one_step_deletion, refit_deletion};
use pmelm::model::{self, score_and_hessian, subject_loglik, total_loglik, QuadratureRule, Theta};
use pmelm::report::{needle_plot, scatter_plot, trajectory_plot, PlotSelection, SelectionMode};
use pmelm::simulate::{contaminate, generate, ContaminationSpec, GenSpec, SIGMA1_GRID};
use pmelm::study::{run_study, StudyConfig};
use pmelm::Stat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> (pmelm::DesignMatrices, usize, Theta) {
    let sigma1 = SIGMA1_GRID[rng.random_range(0..3)];
    let data = common::panel(sigma1, rng.random());
    let design = common::design(&data);
    let beta = vec![
        rng.random_range(0.5..2.0),
        rng.random_range(-0.5..1.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.5..0.5),
    ];
    let theta = Theta::new(beta, rng.random_range(0.02..1.0)).unwrap();
    let i = rng.random_range(0..design.n_subjects());
    (design, i, theta)
}

fn quadrature() -> Outcome {
    let rule = QuadratureRule::new(25);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (design, i, theta) = random_case(&mut rng);
        let l = subject_loglik(&design, i, &theta, &rule).unwrap();
        let (oracle, _, _) = common::trapezoid_oracle(&design, i, &theta, 20001);
        worst = worst.max((l - oracle).abs() / oracle.abs());
    }
    outcome(worst <= 1e-8, format!("max relative error {worst:.2e} over 50 cases"))
}

fn score() -> Outcome {
    let rule = QuadratureRule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (design, i, theta) = random_case(&mut rng);
        let delta = score_and_hessian(&design, &theta, &rule).unwrap().delta;
        let v = theta.to_vector();
        for k in 0..v.len() {
            let at = |x: f64| {
                let mut w = v.clone();
                w[k] = x;
                subject_loglik(&design, i, &Theta::from_vector(&w), &rule).unwrap()
            };
            let h = 1e-5;
            let fd = (at(v[k] + h) - at(v[k] - h)) / (2.0 * h);
            worst = worst.max((delta[(k, i)] - fd).abs() / fd.abs());
        }
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over 50 cases, 6 components each"))
}

fn recovery() -> Outcome {
    let spec = common::no_baseline_spec();
    let truth = DVector::from_vec(vec![1.0, -0.3, 0.4, 0.25]);
    let mut good = 0;
    for seed in 0..20 {
        let gen = GenSpec {
            m1: 500,
            sigma1: 0.5,
            beta: truth.rows(0, 3).iter().copied().collect(),
            seed,
            ..GenSpec::default()
        };
        let data = generate(&gen, &spec).unwrap().panel;
        let fit = model::fit_ml(&data, &spec, &QuadratureRule::default(), None).unwrap();
        let cov = (-&fit.hessian).try_inverse().unwrap();
        let est = fit.theta_hat.to_vector();
        if (0..4).all(|k| (est[k] - truth[k]).abs() <= 3.0 * cov[(k, k)].sqrt()) {
            good += 1;
        }
    }
    outcome(good >= 18, format!("{good}/20 seeds within 3 SE on every parameter"))
}

fn identities() -> Outcome {
    let mut panels = Vec::new();
    for &sigma1 in &SIGMA1_GRID {
        for seed in 0..3 {
            let clean = common::panel(sigma1, seed);
            panels.push(contaminate(&clean, &ContaminationSpec::new(4)).unwrap());
            panels.push(clean);
        }
    }
    let (mut negative, mut additivity, mut omega, mut ld_bad) = (0, 0.0_f64, 0, 0);
    let (mut ld_checked, mut boundary, mut worst_ld) = (0, 0, 0.0_f64);
    for data in &panels {
        let fit = common::fit(data);
        let ones = vec![1.0; fit.n_subjects()];
        let l0 = total_loglik(&fit.design, &fit.theta_hat, &ones, &fit.rule).unwrap();
        if l0 != fit.loglik {
            omega += 1;
        }
        for i in 0..fit.n_subjects() {
            let ci = local_curvature(&fit, i).unwrap().ci;
            if ci < 0.0 {
                negative += 1;
            }
            let parts = decompose(&fit, i).unwrap();
            let sum = parts.c1 + parts.c2;
            additivity = additivity.max((sum - parts.block_diagonal).abs() / sum);
        }
        if fit.at_boundary {
            boundary += 1;
        }
        for i in 0..fit.n_subjects() {
            let ci = local_curvature(&fit, i).unwrap().ci;
            // Grow t for weakly influential subjects until the displacement
            // clears the quadrature noise floor of l (about 1e-10).
            let t = (2e-6 / ci).sqrt().clamp(1e-3, 0.25);
            let mut up = fit.weights.clone();
            up[i] += t;
            let mut down = fit.weights.clone();
            down[i] -= t;
            let ld = influence::likelihood_displacement(&fit, &up).unwrap()
                + influence::likelihood_displacement(&fit, &down).unwrap();
            let rel = (ld / (t * t) - ci).abs() / ci;
            worst_ld = worst_ld.max(rel);
            ld_checked += 1;
            if rel > 0.05 {
                ld_bad += 1;
            }
        }
    }
    let pass = negative == 0 && additivity <= 1e-8 && omega == 0 && ld_bad == 0;
    outcome(
        pass,
        format!(
            "{} panels: {negative} negative C_i, block additivity {additivity:.1e}, {omega} ω₀ mismatches; \
             displacement curvature within {:.2}% on {ld_checked} subjects ({boundary} fits at the variance bound)",
            panels.len(),
            100.0 * worst_ld
        ),
    )
}

fn deletion() -> Outcome {
    let mut rhos = Vec::new();
    for seed in 0..10u64 {
        let data = common::panel(SIGMA1_GRID[seed as usize % 3], 100 + seed);
        let fit = common::fit(&data);
        let m = fit.n_subjects();
        let one: Vec<f64> = (0..m).map(|i| one_step_deletion(&fit, i).unwrap().cook).collect();
        let full: Vec<f64> = (0..m).map(|i| refit_deletion(&fit, i).unwrap()).collect();
        rhos.push(common::spearman(&one, &full));
    }
    let min = rhos.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(min >= 0.8, format!("min Spearman {min:.3} over 10 panels"))
}

fn detection() -> Outcome {
    let config = StudyConfig::default();
    let study = match run_study(&config) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("study failed: {e}")),
    };
    let rate = |sigma1: f64, method: u8, stat: Stat, k: usize| {
        let cells: Vec<_> = study
            .cells
            .iter()
            .filter(|c| c.coord.sigma1 == sigma1 && c.coord.method == method)
            .collect();
        cells.iter().filter(|c| c.rank(stat) <= k).count() as f64 / cells.len() as f64
    };
    let mut lines = Vec::new();
    let mut pass = true;
    for &s in &SIGMA1_GRID {
        let a = rate(s, 4, Stat::Rri, 1);
        let b1 = rate(s, 1, Stat::Rri, 3);
        let b3 = rate(s, 3, Stat::Rri, 3);
        pass &= a >= 0.8 && b1 >= 0.7 && b3 >= 0.7;
        lines.push(format!("σ₁={s}: m4 top1 {a:.2}, m1 top3 {b1:.2}, m3 top3 {b3:.2}"));
    }
    let rr1 = |method: u8, sigma_index: usize, replicate: usize| {
        study
            .cells
            .iter()
            .find(|c| c.coord.method == method && c.coord.sigma_index == sigma_index && c.coord.replicate == replicate)
            .map(|c| c.target().rri)
            .unwrap()
    };
    let mut monotone = 0;
    let mut pairs = 0;
    for si in 0..3 {
        for r in 0..config.grid.replicates {
            pairs += 1;
            if rr1(3, si, r) > rr1(1, si, r) {
                monotone += 1;
            }
        }
    }
    pass &= monotone == pairs;
    let ranks: Vec<usize> = study
        .cells
        .iter()
        .flat_map(|c| c.ranks.iter().map(|(_, r)| *r))
        .collect();
    let overall = ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64;
    pass &= overall > 0.0 && overall < 1.0;
    outcome(
        pass,
        format!(
            "{}; rr₁(m3) > rr₁(m1) in {monotone}/{pairs}; overall top1 {overall:.3}",
            lines.join("; ")
        ),
    )
}

fn plots() -> Outcome {
    let data = contaminate(&common::panel(0.5, 1), &ContaminationSpec::new(4)).unwrap();
    let records = influence::diagnose(&common::fit(&data)).unwrap();
    let sel = PlotSelection {
        mode: SelectionMode::Balanced20,
        seed: 1,
        highlight: vec![1],
    };
    let svg = needle_plot(&records, Stat::Rri, &sel).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let per_arm: Vec<usize> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("facet"))
        .map(|f| f.descendants().filter(|n| n.attribute("class") == Some("needle")).count())
        .collect();
    let total = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("needle"))
        .count();
    let stable = svg == needle_plot(&records, Stat::Rri, &sel).unwrap()
        && scatter_plot(&records, &sel).unwrap() == scatter_plot(&records, &sel).unwrap()
        && trajectory_plot(&data, 1, 5, 1).unwrap() == trajectory_plot(&data, 1, 5, 1).unwrap();
    outcome(
        total == 20 && per_arm == [10, 10] && stable,
        format!("{total} needles, per arm {per_arm:?}, byte-stable {stable}"),
    )
}

fn table_one() -> Outcome {
    let mut subjects: Vec<SubjectRecord> = common::panel(0.5, 0).subjects().to_vec();
    subjects[0].y = [3, 5, 3, 3];
    let data = PanelDataset::new(subjects).unwrap();
    let expected: [([u32; 4], u32); 6] = [
        ([33, 5, 3, 3], data.subjects()[0].base),
        ([33, 35, 33, 33], data.subjects()[0].base),
        ([103, 5, 3, 3], data.subjects()[0].base),
        ([103, 105, 103, 103], data.subjects()[0].base),
        ([3, 5, 3, 3], 50),
        ([103, 105, 103, 103], 50),
    ];
    let mut exact = 0;
    for (k, (y, base)) in expected.iter().enumerate() {
        let out = contaminate(&data, &ContaminationSpec::new(k as u8 + 1)).unwrap();
        let first = &out.subjects()[0];
        let rest_same = out.subjects()[1..] == data.subjects()[1..];
        if first.y == *y && first.base == *base && rest_same {
            exact += 1;
        }
    }
    let mut distinct = 0;
    let mut compared = 0;
    for seed in 0..5 {
        let clean = common::panel(0.5, seed);
        let diag = |m| influence::diagnose(&common::fit(&contaminate(&clean, &ContaminationSpec::new(m)).unwrap())).unwrap();
        for (a, b) in [(1, 5), (4, 6)] {
            compared += 1;
            let (da, db) = (diag(a), diag(b));
            let gap = da.iter().zip(&db).map(|(x, y)| (x.ci - y.ci).abs()).fold(0.0, f64::max);
            if gap > 1e-6 {
                distinct += 1;
            }
        }
    }
    outcome(
        exact == 6 && distinct == compared,
        format!("{exact}/6 methods exact; methods 5/6 differ from 1/4 in {distinct}/{compared} matched panels"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("quadrature correctness", quadrature, Duration::from_secs(10)),
        ("score correctness", score, Duration::from_secs(30)),
        ("parametric recovery", recovery, Duration::from_secs(300)),
        ("influence identities", identities, Duration::MAX),
        ("deletion consistency", deletion, Duration::MAX),
        ("detection replication", detection, Duration::from_secs(900)),
        ("plot contract", plots, Duration::MAX),
        ("table 1 fidelity", table_one, Duration::MAX),
    ];
    let mut failed = 0;
    for (k, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= *limit;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            k + 1,
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
