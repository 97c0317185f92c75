//! Shared fixtures and independent reference computations for the
//! integration tests.
#![allow(dead_code)]

use nalgebra::DVector;
use pmelm::data::{build_design, DesignMatrices, DesignSpec, PanelDataset, Term};
use pmelm::model::{FitResult, QuadratureRule, Theta};
use pmelm::simulate::{generate, GenSpec};

pub fn panel(sigma1: f64, seed: u64) -> PanelDataset {
    let spec = GenSpec {
        sigma1,
        seed,
        ..GenSpec::default()
    };
    generate(&spec, &DesignSpec::default()).unwrap().panel
}

pub fn fit(data: &PanelDataset) -> FitResult {
    pmelm::fit_ml(data, &DesignSpec::default(), &QuadratureRule::default(), None).unwrap()
}

pub fn design(data: &PanelDataset) -> DesignMatrices {
    build_design(data, &DesignSpec::default()).unwrap()
}

/// Design without the baseline terms, so that data simulated from it is
/// correctly specified for the fitted model.
pub fn no_baseline_spec() -> DesignSpec {
    DesignSpec::new(vec![Term::Intercept, Term::Trt, Term::Lage]).unwrap()
}

fn ln_factorial(k: f64) -> f64 {
    (1..=k as u64).map(|j| (j as f64).ln()).sum()
}

/// Log of the integrand `Π_j Pois(y_j; e^{η_j+u}) φ(u; 0, s)` for subject `i`.
fn log_integrand(design: &DesignMatrices, i: usize, theta: &Theta) -> impl Fn(f64) -> f64 {
    let rows = design.rows(i);
    let beta = DVector::from_vec(theta.beta.clone());
    let eta: Vec<f64> = rows.clone().map(|r| design.x.row(r).dot(&beta.transpose())).collect();
    let y: Vec<f64> = rows.map(|r| design.y[r]).collect();
    let lf: f64 = y.iter().map(|&v| ln_factorial(v)).sum();
    let s = theta.sigma1_sq;
    move |u: f64| {
        let pois: f64 = eta
            .iter()
            .zip(&y)
            .map(|(e, yj)| yj * (e + u) - (e + u).exp())
            .sum::<f64>()
            - lf;
        pois - 0.5 * u * u / s - 0.5 * (2.0 * std::f64::consts::PI * s).ln()
    }
}

/// Dense trapezoid integration over `u ∈ [−10σ₁, 10σ₁]`: returns the log
/// marginal likelihood and the posterior mean and variance of `u`.
pub fn trapezoid_oracle(design: &DesignMatrices, i: usize, theta: &Theta, points: usize) -> (f64, f64, f64) {
    let f = log_integrand(design, i, theta);
    let half = 10.0 * theta.sigma1_sq.sqrt();
    let h = 2.0 * half / (points - 1) as f64;
    let us: Vec<f64> = (0..points).map(|k| -half + k as f64 * h).collect();
    let logs: Vec<f64> = us.iter().map(|&u| f(u)).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (k, (&u, &l)) in us.iter().zip(&logs).enumerate() {
        let w = if k == 0 || k == points - 1 { 0.5 } else { 1.0 };
        let e = w * (l - peak).exp();
        z += e;
        m1 += e * u;
        m2 += e * u * u;
    }
    let mean = m1 / z;
    (peak + (z * h).ln(), mean, m2 / z - mean * mean)
}

/// Average ranks, ties sharing the mean position.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &t in &idx[k..=j] {
            out[t] = avg;
        }
        k = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
