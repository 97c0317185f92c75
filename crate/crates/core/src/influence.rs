//! Local influence of whole subjects on the ML fit.
//!
//! Under the case-weight perturbation `l(θ|ω) = Σ_i ω_i l_i(θ)`, the normal
//! curvature of the likelihood displacement in direction `e_i` is
//! `C_i = 2 Δ_iᵀ (−L̈)⁻¹ Δ_i`. The fixed-effect and variance parts use the
//! diagonal blocks of `L̈`. Alongside these, this module computes the
//! one-step deletion distance, marginal residual summaries, and the
//! component norms used to interpret a large `C_i`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PERIODS;
use crate::linalg;
use crate::model::{self, FitOptions, FitResult, ModelError, Theta};

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("Hessian is singular or not negative definite")]
    SingularHessian,
    #[error("marginal covariance of subject {0} is singular")]
    SingularV(usize),
    #[error("subject index {index} out of range (m = {subjects})")]
    BadSubject { index: usize, subjects: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-subject diagnostics; one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub id: u32,
    pub trt: u8,
    /// Total local influence `C_i`.
    #[serde(rename = "Ci")]
    pub ci: f64,
    /// Fixed-effect part.
    #[serde(rename = "Ci_b")]
    pub ci_b: f64,
    /// Variance-component part.
    #[serde(rename = "Ci_d")]
    pub ci_d: f64,
    /// Squared length of the marginal residual vector.
    #[serde(rename = "rri")]
    pub rri: f64,
    pub cos_alpha: f64,
    pub cos_phi: f64,
    /// One-step case-deletion Cook distance.
    pub cook1: f64,
    pub comp_xx: f64,
    pub comp_r: f64,
    pub comp_zz: f64,
    pub comp_ir: f64,
    pub comp_vinv: f64,
}

pub const CSV_HEADER: &str =
    "id,trt,Ci,Ci_b,Ci_d,rri,cos_alpha,cos_phi,cook1,comp_xx,comp_r,comp_zz,comp_ir,comp_vinv";

/// Statistic columns that can be plotted or ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stat {
    #[serde(rename = "Ci")]
    Ci,
    #[serde(rename = "Ci_b")]
    CiB,
    #[serde(rename = "Ci_d")]
    CiD,
    #[serde(rename = "rri")]
    Rri,
    #[serde(rename = "cook1")]
    Cook1,
}

impl Stat {
    pub const ALL: [Stat; 5] = [Stat::Ci, Stat::CiB, Stat::CiD, Stat::Rri, Stat::Cook1];

    pub fn name(self) -> &'static str {
        match self {
            Stat::Ci => "Ci",
            Stat::CiB => "Ci_b",
            Stat::CiD => "Ci_d",
            Stat::Rri => "rri",
            Stat::Cook1 => "cook1",
        }
    }

    pub fn of(self, r: &DiagnosticRecord) -> f64 {
        match self {
            Stat::Ci => r.ci,
            Stat::CiB => r.ci_b,
            Stat::CiD => r.ci_d,
            Stat::Rri => r.rri,
            Stat::Cook1 => r.cook1,
        }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stat::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown statistic `{s}` (expected Ci, Ci_b, Ci_d, rri, cook1)"))
    }
}

fn check_index(fit: &FitResult, i: usize) -> Result<(), InfluenceError> {
    if i >= fit.n_subjects() {
        return Err(InfluenceError::BadSubject {
            index: i,
            subjects: fit.n_subjects(),
        });
    }
    Ok(())
}

fn neg_hessian_chol(h: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, InfluenceError> {
    linalg::cholesky(&(-h)).ok_or(InfluenceError::SingularHessian)
}

/// Normal curvature of subject `i` and its factorized presentation
/// `C_i = 2‖L̈⁻¹‖_F ‖Δ_i‖² cos φ_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCurvature {
    pub ci: f64,
    pub hinv_norm: f64,
    pub delta_norm_sq: f64,
    /// `C_i / (2‖L̈⁻¹‖_F ‖Δ_i‖²)`; 0 when `Δ_i = 0`.
    pub cos_phi: f64,
}

/// `C = 2 Δᵀ(−L̈)⁻¹Δ` for an arbitrary score vector.
pub fn curvature_of(hessian: &DMatrix<f64>, delta: &DVector<f64>) -> Result<LocalCurvature, InfluenceError> {
    let chol = neg_hessian_chol(hessian)?;
    let ci = 2.0 * linalg::inverse_quadratic_form(&chol, delta);
    let hinv_norm = chol.inverse().norm();
    let delta_norm_sq = delta.norm_squared();
    let cos_phi = if delta_norm_sq > 0.0 {
        ci / (2.0 * hinv_norm * delta_norm_sq)
    } else {
        0.0
    };
    Ok(LocalCurvature {
        ci,
        hinv_norm,
        delta_norm_sq,
        cos_phi,
    })
}

/// Number of leading parameters free to move. A variance held at its
/// lower bound is an active constraint and does not respond to small
/// perturbations, so boundary fits use the `β` block only.
pub fn free_parameters(fit: &FitResult) -> usize {
    let d = fit.hessian.nrows();
    if fit.at_boundary {
        d - 1
    } else {
        d
    }
}

fn free_hessian(fit: &FitResult) -> DMatrix<f64> {
    let d = free_parameters(fit);
    fit.hessian.view((0, 0), (d, d)).into_owned()
}

pub fn local_curvature(fit: &FitResult, i: usize) -> Result<LocalCurvature, InfluenceError> {
    check_index(fit, i)?;
    let d = free_parameters(fit);
    curvature_of(&free_hessian(fit), &fit.delta.column(i).rows(0, d).into_owned())
}

/// Fixed-effect / variance split of the curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureParts {
    /// `2 Δ_βᵀ(−L̈_ββ)⁻¹Δ_β`
    pub c1: f64,
    /// `2 Δ_σ²/(−L̈_σσ)`
    pub c2: f64,
    /// Curvature under `blockdiag(L̈_ββ, L̈_σσ)`, computed from the full
    /// block-diagonal matrix.
    pub block_diagonal: f64,
    /// `|C_i − C1_i − C2_i|`; zero only when `L̈` is block diagonal.
    pub gap: f64,
}

pub fn decompose(fit: &FitResult, i: usize) -> Result<CurvatureParts, InfluenceError> {
    check_index(fit, i)?;
    let d = fit.hessian.nrows();
    let p = d - 1;
    let delta = fit.delta.column(i).into_owned();
    let delta_b = delta.rows(0, p).into_owned();
    let hbb = fit.hessian.view((0, 0), (p, p)).into_owned();
    let hss = fit.hessian[(p, p)];
    let c1 = 2.0 * linalg::inverse_quadratic_form(&neg_hessian_chol(&hbb)?, &delta_b);
    if fit.at_boundary {
        let ci = local_curvature(fit, i)?.ci;
        return Ok(CurvatureParts {
            c1,
            c2: 0.0,
            block_diagonal: c1,
            gap: (ci - c1).abs(),
        });
    }
    if !(hss < 0.0) {
        return Err(InfluenceError::SingularHessian);
    }
    let c2 = 2.0 * delta[p] * delta[p] / (-hss);

    let mut block = DMatrix::zeros(d, d);
    block.view_mut((0, 0), (p, p)).copy_from(&hbb);
    block[(p, p)] = hss;
    let block_diagonal = 2.0 * linalg::inverse_quadratic_form(&neg_hessian_chol(&block)?, &delta);
    let ci = local_curvature(fit, i)?.ci;
    Ok(CurvatureParts {
        c1,
        c2,
        block_diagonal,
        gap: (ci - c1 - c2).abs(),
    })
}

/// The trace form of the variance part with a scalar random-effect
/// covariance `D = σ₁²`:
/// `½ ‖L̈⁻¹‖ cos φ_i · [tr(D⁻²) − 2 tr(D⁻¹ D⁻² Var b_i) + tr(D⁻⁴ Var(b_i)²)]`.
/// Zero for boundary fits, where the variance is held fixed.
pub fn variance_trace_curvature(fit: &FitResult, i: usize) -> Result<f64, InfluenceError> {
    let lc = local_curvature(fit, i)?;
    if fit.at_boundary {
        return Ok(0.0);
    }
    let d = fit.theta_hat.sigma1_sq;
    let v = fit.eb[i].var_b;
    let d_inv = 1.0 / d;
    let d_inv2 = d_inv * d_inv;
    let bracket = d_inv * d_inv - 2.0 * d_inv * d_inv2 * v + (d_inv2 * v).powi(2);
    Ok(0.5 * lc.hinv_norm * lc.cos_phi * bracket)
}

/// Marginal residuals `r_ij = y_ij − μ̂_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub r: DVector<f64>,
}

impl ResidualSet {
    pub fn subject(&self, i: usize) -> DVector<f64> {
        self.r.rows(i * PERIODS, PERIODS).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub residuals: ResidualSet,
    pub rr: Vec<f64>,
    pub cos_alpha: Vec<f64>,
    /// Subjects whose residual vector is identically zero (cos α set to 0).
    pub zero_residual: Vec<usize>,
}

/// `‖r_i‖²` and the cosine between `X_iX_iᵀ` and `r_ir_iᵀ` (Frobenius inner
/// product) for every subject.
pub fn residual_stats(fit: &FitResult) -> ResidualStats {
    let design = &fit.design;
    let r = &design.y - &fit.mu_hat;
    let residuals = ResidualSet { r };
    let m = design.n_subjects();
    let mut rr = Vec::with_capacity(m);
    let mut cos_alpha = Vec::with_capacity(m);
    let mut zero_residual = Vec::new();
    for i in 0..m {
        let ri = residuals.subject(i);
        let xi = design.x.rows(i * PERIODS, PERIODS);
        let a = &xi * xi.transpose();
        let b = &ri * ri.transpose();
        rr.push(ri.norm_squared());
        let denom = a.norm() * b.norm();
        if denom > 0.0 {
            cos_alpha.push((a.dot(&b) / denom).clamp(-1.0, 1.0));
        } else {
            zero_residual.push(i);
            cos_alpha.push(0.0);
        }
    }
    ResidualStats {
        residuals,
        rr,
        cos_alpha,
        zero_residual,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepDeletion {
    pub theta: Theta,
    pub cook: f64,
}

/// Single Newton step from `θ̂` on the likelihood without subject `i`, and
/// the distance `|−2 (θ̂ − θ̂¹)ᵀ L̈_(i) L̈⁻¹ L̈_(i) (θ̂ − θ̂¹)|`.
pub fn one_step_deletion(fit: &FitResult, i: usize) -> Result<OneStepDeletion, InfluenceError> {
    check_index(fit, i)?;
    let d = free_parameters(fit);
    let h = free_hessian(fit);
    let w = fit.weights[i];
    let h_del = &h - fit.subject_hessians[i].view((0, 0), (d, d)) * w;
    let mut g_del = DVector::zeros(d);
    for (k, col) in fit.delta.column_iter().enumerate() {
        if k != i {
            g_del.axpy(fit.weights[k], &col.rows(0, d), 1.0);
        }
    }
    let step = h_del.clone().lu().solve(&g_del).ok_or(InfluenceError::SingularHessian)?;
    // θ̂¹ = θ̂ − L̈_(i)⁻¹ ∂l_(i)/∂θ
    let mut theta_vec = fit.theta_hat.to_vector();
    theta_vec.rows_mut(0, d).axpy(-1.0, &step, 1.0);
    let left = &h_del * &step;
    let h_inv_left = h
        .lu()
        .solve(&left)
        .ok_or(InfluenceError::SingularHessian)?;
    let cook = (-2.0 * left.dot(&h_inv_left)).abs();
    Ok(OneStepDeletion {
        theta: Theta::from_vector(&theta_vec),
        cook,
    })
}

/// Refits without subject `i` and returns `(θ̂ − θ̂_(i))ᵀ(−L̈)(θ̂ − θ̂_(i))`
/// over the free parameters.
pub fn refit_deletion(fit: &FitResult, i: usize) -> Result<f64, InfluenceError> {
    check_index(fit, i)?;
    let mut weights = fit.weights.clone();
    weights[i] = 0.0;
    let refit = model::fit_design(
        &fit.design,
        &fit.rule,
        Some(&fit.theta_hat),
        Some(&weights),
        &FitOptions::default(),
    )?;
    let k = free_parameters(fit);
    let d = (fit.theta_hat.to_vector() - refit.theta_hat.to_vector()).rows(0, k).into_owned();
    Ok(d.dot(&(-free_hessian(fit) * &d)))
}

/// `LD(ω) = 2[l(θ̂) − l(θ̂_ω)]`, with `θ̂_ω` the maximizer of the
/// ω-weighted likelihood.
pub fn likelihood_displacement(fit: &FitResult, weights: &[f64]) -> Result<f64, InfluenceError> {
    let opts = FitOptions {
        grad_tol: 1e-9,
        step_tol: 1e-11,
        ..FitOptions::default()
    };
    let perturbed = model::fit_design(&fit.design, &fit.rule, Some(&fit.theta_hat), Some(weights), &opts)?;
    let base: f64 = fit.li.iter().zip(&fit.weights).map(|(l, w)| l * w).sum();
    let moved: f64 = perturbed
        .li
        .iter()
        .zip(&fit.weights)
        .map(|(l, w)| l * w)
        .sum();
    Ok(2.0 * (base - moved))
}

/// Frobenius norms of the interpretable pieces of `C_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentNorms {
    pub xx: f64,
    pub r: f64,
    pub zz: f64,
    pub ir: f64,
    pub vinv: f64,
}

/// Poisson-lognormal marginal covariance of subject `i` at the fit.
pub fn marginal_covariance(fit: &FitResult, i: usize) -> DMatrix<f64> {
    let mu = fit.mu_hat.rows(i * PERIODS, PERIODS);
    let k = fit.theta_hat.sigma1_sq.exp_m1();
    DMatrix::from_diagonal(&mu.into_owned()) + &mu * mu.transpose() * k
}

pub fn component_norms(
    fit: &FitResult,
    i: usize,
    residuals: &ResidualSet,
) -> Result<ComponentNorms, InfluenceError> {
    check_index(fit, i)?;
    let xi = fit.design.x.rows(i * PERIODS, PERIODS);
    let zi = fit.design.z.view((i * PERIODS, i), (PERIODS, 1));
    let v = marginal_covariance(fit, i);
    let v_inv_sqrt = linalg::inv_sqrt(&v).ok_or(InfluenceError::SingularV(i))?;
    let v_inv = &v_inv_sqrt * &v_inv_sqrt;
    let std_r = &v_inv_sqrt * residuals.subject(i);
    let ir = DMatrix::identity(PERIODS, PERIODS) - &std_r * std_r.transpose();
    Ok(ComponentNorms {
        xx: (&xi * xi.transpose()).norm(),
        r: std_r.norm(),
        zz: (&zi * zi.transpose()).norm(),
        ir: ir.norm(),
        vinv: v_inv.norm(),
    })
}

/// All diagnostics, one record per subject in panel order.
pub fn diagnose(fit: &FitResult) -> Result<Vec<DiagnosticRecord>, InfluenceError> {
    let res = residual_stats(fit);
    (0..fit.n_subjects())
        .map(|i| {
            let lc = local_curvature(fit, i)?;
            let parts = decompose(fit, i)?;
            let del = one_step_deletion(fit, i)?;
            let comps = component_norms(fit, i, &res.residuals)?;
            Ok(DiagnosticRecord {
                id: fit.design.subject_ids[i],
                trt: fit.design.trt[i],
                ci: lc.ci,
                ci_b: parts.c1,
                ci_d: parts.c2,
                rri: res.rr[i],
                cos_alpha: res.cos_alpha[i],
                cos_phi: lc.cos_phi,
                cook1: del.cook,
                comp_xx: comps.xx,
                comp_r: comps.r,
                comp_zz: comps.zz,
                comp_ir: comps.ir,
                comp_vinv: comps.vinv,
            })
        })
        .collect()
}

pub fn write_diagnostics<W: Write>(out: W, records: &[DiagnosticRecord]) -> Result<(), InfluenceError> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_diagnostics<R: Read>(input: R) -> Result<Vec<DiagnosticRecord>, InfluenceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    Ok(rdr.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// 1-based rank of `records[target]` by descending `stat`; ties count in
/// the target's favor.
pub fn rank_of(records: &[DiagnosticRecord], target: usize, stat: Stat) -> usize {
    let v = stat.of(&records[target]);
    1 + records.iter().filter(|r| stat.of(r) > v).count()
}
