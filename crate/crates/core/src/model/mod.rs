//! Random-intercept Poisson mixed model.
//!
//! For subject `i` with periods `j`,
//! `y_ij | u_i ~ Poisson(exp(x_ijᵀβ + u_i))` and `u_i ~ N(0, σ₁²)`.
//! The marginal contribution `l_i(θ)` integrates `u_i` out with adaptive
//! Gauss–Hermite quadrature centered at the conditional mode. Scores and
//! Hessians are posterior expectations over the same nodes, so every
//! derivative refers to one objective.
//!
//! Parameter order is fixed everywhere as `(β₁, …, β_p, σ₁²)`.

pub mod quadrature;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::{build_design, DataError, DesignMatrices, DesignSpec, PanelDataset, Term};
use crate::linalg;
pub use quadrature::QuadratureRule;

const MODE_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("conditional mode search did not converge for subject {subject} after {iterations} iterations")]
    QuadratureDegenerate { subject: usize, iterations: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite derivative at subject {subject}")]
    NonFiniteDerivative { subject: usize },
    #[error("no convergence after {iterations} Newton iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("Hessian is not negative definite at the optimum (largest eigenvalue {max_eigenvalue:.3e})")]
    NonConcaveAtOptimum { max_eigenvalue: f64 },
    #[error("invalid parameter: {0}")]
    InvalidTheta(String),
    #[error("need more observations than parameters (n = {n}, parameters = {params})")]
    TooFewObservations { n: usize, params: usize },
    #[error("fixed-effect design is rank deficient")]
    SingularDesign,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Fixed effects and random-intercept variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub sigma1_sq: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, sigma1_sq: f64) -> Result<Self, ModelError> {
        let t = Self { beta, sigma1_sq };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.sigma1_sq > 0.0 && self.sigma1_sq.is_finite()) {
            return Err(ModelError::InvalidTheta(format!(
                "sigma1_sq must be positive and finite, got {}",
                self.sigma1_sq
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::InvalidTheta("beta must be finite".into()));
        }
        Ok(())
    }

    /// `p + 1`.
    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.beta.iter().copied().chain(std::iter::once(self.sigma1_sq)),
        )
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let p = v.len() - 1;
        Self {
            beta: v.rows(0, p).iter().copied().collect(),
            sigma1_sq: v[p],
        }
    }
}

/// Summaries of one subject's random intercept given its data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEffect {
    pub b_hat: f64,
    pub var_b: f64,
}

/// Sufficient pieces of one subject's conditional likelihood.
struct SubjectTerms {
    /// Σ_j y_j η_j
    y_eta: f64,
    /// Σ_j y_j
    y_sum: f64,
    /// Σ_j exp(η_j)
    mu_sum: f64,
    /// Σ_j log(y_j!)
    log_fact: f64,
}

impl SubjectTerms {
    fn new(design: &DesignMatrices, i: usize, beta: &[f64]) -> (Self, Vec<f64>) {
        let rows = design.rows(i);
        let mut eta = Vec::with_capacity(rows.len());
        let (mut y_eta, mut y_sum, mut mu_sum, mut log_fact) = (0.0, 0.0, 0.0, 0.0);
        for r in rows {
            let e: f64 = (0..design.p()).map(|k| design.x[(r, k)] * beta[k]).sum();
            let y = design.y[r];
            y_eta += y * e;
            y_sum += y;
            mu_sum += e.exp();
            log_fact += ln_gamma(y + 1.0);
            eta.push(e);
        }
        (
            Self {
                y_eta,
                y_sum,
                mu_sum,
                log_fact,
            },
            eta,
        )
    }

    /// Joint log density of (y_i, u) as a function of u.
    fn log_joint(&self, u: f64, s: f64) -> f64 {
        self.y_eta + u * self.y_sum - self.mu_sum * u.exp() - self.log_fact
            - 0.5 * u * u / s
            - 0.5 * (2.0 * std::f64::consts::PI * s).ln()
    }

    /// Conditional mode of u. The score in u is decreasing and concave, so
    /// Newton started to the right of the root converges monotonically.
    fn mode(&self, s: f64, subject: usize) -> Result<f64, ModelError> {
        let mut u = if self.y_sum > 0.0 {
            let upper = if self.mu_sum > 0.0 {
                (self.y_sum / self.mu_sum).ln().max(0.0)
            } else {
                f64::INFINITY
            };
            (s * self.y_sum).min(upper)
        } else {
            0.0
        };
        for _ in 0..MODE_MAX_ITER {
            let e = self.mu_sum * u.exp();
            let grad = self.y_sum - e - u / s;
            let curv = e + 1.0 / s;
            let step = grad / curv;
            u += step;
            if !u.is_finite() {
                break;
            }
            if step.abs() <= 1e-13 * (1.0 + u.abs()) {
                return Ok(u);
            }
        }
        Err(ModelError::QuadratureDegenerate {
            subject,
            iterations: MODE_MAX_ITER,
        })
    }
}

/// Posterior nodes and normalized weights for one subject.
struct Posterior {
    nodes: Vec<f64>,
    probs: Vec<f64>,
    loglik: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn posterior(
    terms: &SubjectTerms,
    s: f64,
    rule: &QuadratureRule,
    subject: usize,
) -> Result<Posterior, ModelError> {
    let (center, scale) = if rule.adaptive {
        let mode = terms.mode(s, subject)?;
        let curv = terms.mu_sum * mode.exp() + 1.0 / s;
        (mode, 1.0 / curv.sqrt())
    } else {
        (0.0, s.sqrt())
    };
    let root2_scale = std::f64::consts::SQRT_2 * scale;
    let mut nodes = Vec::with_capacity(rule.order());
    let mut log_terms = Vec::with_capacity(rule.order());
    for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
        let u = center + root2_scale * z;
        nodes.push(u);
        log_terms.push(w.ln() + z * z + root2_scale.ln() + terms.log_joint(u, s));
    }
    let loglik = log_sum_exp(&log_terms);
    let probs = log_terms.iter().map(|t| (t - loglik).exp()).collect();
    Ok(Posterior {
        nodes,
        probs,
        loglik,
    })
}

/// Value and derivatives of one subject's contribution.
#[derive(Debug, Clone)]
pub struct SubjectEval {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub random_effect: RandomEffect,
}

fn evaluate_subject(
    design: &DesignMatrices,
    i: usize,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<SubjectEval, ModelError> {
    let p = design.p();
    let s = theta.sigma1_sq;
    let (terms, eta) = SubjectTerms::new(design, i, &theta.beta);
    let post = posterior(&terms, s, rule, i)?;

    // Posterior moments of e^u, u, and the σ₁² score g_s(u) = u²/(2s²) − 1/(2s).
    let mut m_e = 0.0;
    let mut m_u = 0.0;
    let mut m_gs = 0.0;
    let mut m_gss = 0.0;
    for (&u, &w) in post.nodes.iter().zip(&post.probs) {
        m_e += w * u.exp();
        m_u += w * u;
        m_gs += w * (0.5 * u * u / (s * s) - 0.5 / s);
        m_gss += w * (-u * u / (s * s * s) + 0.5 / (s * s));
    }
    let (mut var_e, mut var_u, mut cov_e_gs, mut var_gs) = (0.0, 0.0, 0.0, 0.0);
    for (&u, &w) in post.nodes.iter().zip(&post.probs) {
        let de = u.exp() - m_e;
        let dgs = 0.5 * u * u / (s * s) - 0.5 / s - m_gs;
        var_e += w * de * de;
        var_u += w * (u - m_u) * (u - m_u);
        cov_e_gs += w * de * dgs;
        var_gs += w * dgs * dgs;
    }

    // g_β(u) = a − e^u c,  g_ββ(u) = −e^u C
    let rows = design.rows(i);
    let mut a = DVector::zeros(p);
    let mut c = DVector::zeros(p);
    let mut cmat = DMatrix::zeros(p, p);
    for (r, e) in rows.zip(&eta) {
        let xr = design.x.row(r).transpose();
        let mu = e.exp();
        a.axpy(design.y[r], &xr, 1.0);
        c.axpy(mu, &xr, 1.0);
        cmat.ger(mu, &xr, &xr, 1.0);
    }

    let mut score = DVector::zeros(p + 1);
    score.rows_mut(0, p).copy_from(&(&a - &c * m_e));
    score[p] = m_gs;

    let mut hessian = DMatrix::zeros(p + 1, p + 1);
    let hbb = &cmat * (-m_e) + &c * c.transpose() * var_e;
    hessian.view_mut((0, 0), (p, p)).copy_from(&hbb);
    let hbs = &c * (-cov_e_gs);
    hessian.view_mut((0, p), (p, 1)).copy_from(&hbs);
    hessian.view_mut((p, 0), (1, p)).copy_from(&hbs.transpose());
    hessian[(p, p)] = m_gss + var_gs;

    if !post.loglik.is_finite()
        || score.iter().any(|v| !v.is_finite())
        || hessian.iter().any(|v| !v.is_finite())
    {
        return Err(ModelError::NonFiniteDerivative { subject: i });
    }
    Ok(SubjectEval {
        loglik: post.loglik,
        score,
        hessian,
        random_effect: RandomEffect {
            b_hat: m_u,
            var_b: var_u,
        },
    })
}

fn check_theta(design: &DesignMatrices, theta: &Theta) -> Result<(), ModelError> {
    theta.validate()?;
    if theta.beta.len() != design.p() {
        return Err(ModelError::LengthMismatch {
            expected: design.p(),
            got: theta.beta.len(),
        });
    }
    Ok(())
}

fn check_subject(design: &DesignMatrices, i: usize) -> Result<(), ModelError> {
    if i >= design.n_subjects() {
        return Err(ModelError::LengthMismatch {
            expected: design.n_subjects(),
            got: i,
        });
    }
    Ok(())
}

/// Marginal log-likelihood contribution `l_i(θ)` of subject `i`.
pub fn subject_loglik(
    design: &DesignMatrices,
    i: usize,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<f64, ModelError> {
    check_theta(design, theta)?;
    check_subject(design, i)?;
    let (terms, _) = SubjectTerms::new(design, i, &theta.beta);
    Ok(posterior(&terms, theta.sigma1_sq, rule, i)?.loglik)
}

/// All subject contributions, in subject order.
pub fn subject_logliks(
    design: &DesignMatrices,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<Vec<f64>, ModelError> {
    check_theta(design, theta)?;
    (0..design.n_subjects())
        .into_par_iter()
        .with_min_len(32)
        .map(|i| {
            let (terms, _) = SubjectTerms::new(design, i, &theta.beta);
            posterior(&terms, theta.sigma1_sq, rule, i).map(|p| p.loglik)
        })
        .collect()
}

/// Case-weighted log-likelihood `Σ_i ω_i l_i(θ)`.
pub fn total_loglik(
    design: &DesignMatrices,
    theta: &Theta,
    weights: &[f64],
    rule: &QuadratureRule,
) -> Result<f64, ModelError> {
    if weights.len() != design.n_subjects() {
        return Err(ModelError::LengthMismatch {
            expected: design.n_subjects(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(ModelError::InvalidTheta("case weights must be finite".into()));
    }
    let li = subject_logliks(design, theta, rule)?;
    Ok(weighted_sum(&li, weights))
}

fn weighted_sum(li: &[f64], weights: &[f64]) -> f64 {
    li.iter().zip(weights).map(|(l, w)| w * l).sum()
}

/// Per-subject values and derivatives at `θ`, in subject order.
pub fn evaluate_subjects(
    design: &DesignMatrices,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<Vec<SubjectEval>, ModelError> {
    check_theta(design, theta)?;
    (0..design.n_subjects())
        .into_par_iter()
        .with_min_len(32)
        .map(|i| evaluate_subject(design, i, theta, rule))
        .collect()
}

/// Score vectors and Hessian of the full log-likelihood.
#[derive(Debug, Clone)]
pub struct Derivatives {
    /// `(p+1) × m`; column `i` is `Δ_i = ∂l_i/∂θ`.
    pub delta: DMatrix<f64>,
    /// `∂²l/∂θ∂θᵀ`.
    pub hessian: DMatrix<f64>,
    /// `∂²l_i/∂θ∂θᵀ` per subject.
    pub subject_hessians: Vec<DMatrix<f64>>,
}

/// How the total Hessian is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    /// Posterior moments over the quadrature nodes.
    #[default]
    Analytic,
    /// Central differences of the analytic score.
    FiniteDifference,
}

pub fn score_and_hessian(
    design: &DesignMatrices,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<Derivatives, ModelError> {
    let evals = evaluate_subjects(design, theta, rule)?;
    Ok(collect_derivatives(&evals, None))
}

fn collect_derivatives(evals: &[SubjectEval], weights: Option<&[f64]>) -> Derivatives {
    let d = evals[0].score.len();
    let mut delta = DMatrix::zeros(d, evals.len());
    let mut hessian = DMatrix::zeros(d, d);
    for (i, e) in evals.iter().enumerate() {
        delta.set_column(i, &e.score);
        let w = weights.map_or(1.0, |w| w[i]);
        hessian += &e.hessian * w;
    }
    Derivatives {
        delta,
        hessian,
        subject_hessians: evals.iter().map(|e| e.hessian.clone()).collect(),
    }
}

/// Total score `Σ_i Δ_i`.
pub fn total_score(
    design: &DesignMatrices,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<DVector<f64>, ModelError> {
    let evals = evaluate_subjects(design, theta, rule)?;
    let mut g = DVector::zeros(theta.dim());
    for e in &evals {
        g += &e.score;
    }
    Ok(g)
}

/// Hessian by central differences of the analytic score, step
/// `1e-5·(1+|θ_k|)` (capped at half of σ₁² for the variance component).
pub fn finite_difference_hessian(
    design: &DesignMatrices,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>, ModelError> {
    let v = theta.to_vector();
    let d = v.len();
    let mut h = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut step = 1e-5 * (1.0 + v[k].abs());
        if k == d - 1 {
            step = step.min(0.5 * v[k]);
        }
        let mut plus = v.clone();
        plus[k] += step;
        let mut minus = v.clone();
        minus[k] -= step;
        let gp = total_score(design, &Theta::from_vector(&plus), rule)?;
        let gm = total_score(design, &Theta::from_vector(&minus), rule)?;
        h.set_column(k, &((gp - gm) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Posterior mean and variance of subject `i`'s random intercept.
pub fn eb_estimate(
    design: &DesignMatrices,
    i: usize,
    theta: &Theta,
    rule: &QuadratureRule,
) -> Result<RandomEffect, ModelError> {
    check_theta(design, theta)?;
    check_subject(design, i)?;
    Ok(evaluate_subject(design, i, theta, rule)?.random_effect)
}

/// Scale on which the variance component is optimized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScale {
    #[default]
    Log,
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the ∞-norm of the score in `(β, σ₁²)`.
    pub grad_tol: f64,
    /// Convergence threshold on the ∞-norm of the Newton step in `(β, σ₁²)`.
    pub step_tol: f64,
    pub variance_scale: VarianceScale,
    pub hessian: HessianMethod,
    /// Lower bound on σ₁²; fits that end here are flagged `at_boundary`.
    pub min_sigma1_sq: f64,
    /// Largest ∞-norm of a single Newton step on the optimization scale.
    pub max_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-6,
            step_tol: 1e-8,
            variance_scale: VarianceScale::Log,
            hessian: HessianMethod::Analytic,
            min_sigma1_sq: 1e-6,
            max_step: 4.0,
        }
    }
}

/// Maximum likelihood fit and everything the influence diagnostics need.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// `Σ_i ω_i l_i(θ̂)`; the ordinary log-likelihood when all weights are 1.
    pub loglik: f64,
    /// Unweighted contributions `l_i(θ̂)`.
    pub li: Vec<f64>,
    /// `(p+1) × m` matrix of subject scores `Δ_i`.
    pub delta: DMatrix<f64>,
    /// `L̈` of the (weighted) objective at `θ̂`.
    pub hessian: DMatrix<f64>,
    pub subject_hessians: Vec<DMatrix<f64>>,
    pub eb: Vec<RandomEffect>,
    /// Marginal means `exp(x_ijᵀβ̂ + σ̂₁²/2)`, one per row.
    pub mu_hat: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub at_boundary: bool,
    pub weights: Vec<f64>,
    pub design: DesignMatrices,
    pub rule: QuadratureRule,
}

impl FitResult {
    pub fn n_subjects(&self) -> usize {
        self.design.n_subjects()
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            beta: self.theta_hat.beta.clone(),
            sigma1_sq: self.theta_hat.sigma1_sq,
            loglik: self.loglik,
            li: self.li.clone(),
            iterations: self.iterations,
            grad_norm: self.grad_norm,
            terms: self.design.spec.terms().to_vec(),
            quadrature_order: self.rule.order(),
            at_boundary: self.at_boundary,
        }
    }
}

/// JSON form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub beta: Vec<f64>,
    pub sigma1_sq: f64,
    pub loglik: f64,
    pub li: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub terms: Vec<Term>,
    pub quadrature_order: usize,
    #[serde(default)]
    pub at_boundary: bool,
}

impl FitSummary {
    pub fn theta(&self) -> Result<Theta, ModelError> {
        Theta::new(self.beta.clone(), self.sigma1_sq)
    }

    pub fn design_spec(&self) -> Result<DesignSpec, ModelError> {
        Ok(DesignSpec::new(self.terms.clone())?)
    }
}

/// Fits the model to a panel with unit case weights.
pub fn fit_ml(
    data: &PanelDataset,
    spec: &DesignSpec,
    rule: &QuadratureRule,
    init: Option<&Theta>,
) -> Result<FitResult, ModelError> {
    let design = build_design(data, spec)?;
    fit_design(&design, rule, init, None, &FitOptions::default())
}

/// Plain Poisson regression ignoring the random intercept.
pub fn poisson_regression(
    design: &DesignMatrices,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>, ModelError> {
    let p = design.p();
    let n = design.x.nrows();
    let w_row = |r: usize| weights.map_or(1.0, |w| w[design.subject_index[r]]);
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = &design.x * beta;
        (0..n)
            .map(|r| w_row(r) * (design.y[r] * eta[r] - eta[r].exp()))
            .sum()
    };
    let mut beta = DVector::zeros(p);
    if design.spec.terms().first() == Some(&Term::Intercept) {
        let (mut sy, mut sw) = (0.0, 0.0);
        for r in 0..n {
            sy += w_row(r) * design.y[r];
            sw += w_row(r);
        }
        beta[0] = (sy / sw.max(1e-300) + 0.1).ln();
    }
    let mut current = loglik(&beta);
    for _ in 0..100 {
        let eta = &design.x * &beta;
        let mut g = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for r in 0..n {
            let xr = design.x.row(r).transpose();
            let mu = eta[r].exp();
            let w = w_row(r);
            g.axpy(w * (design.y[r] - mu), &xr, 1.0);
            info.ger(w * mu, &xr, &xr, 1.0);
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or(ModelError::SingularDesign)?
            .solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let l = loglik(&cand);
            if l.is_finite() && l >= current {
                beta = cand;
                current = l;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-10 {
            break;
        }
    }
    Ok(beta.iter().copied().collect())
}

/// Newton–Raphson with step halving on the (optionally case-weighted)
/// marginal log-likelihood.
pub fn fit_design(
    design: &DesignMatrices,
    rule: &QuadratureRule,
    init: Option<&Theta>,
    weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<FitResult, ModelError> {
    let m = design.n_subjects();
    let p = design.p();
    let n = design.x.nrows();
    if n <= p + 1 {
        return Err(ModelError::TooFewObservations { n, params: p + 1 });
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() != m => {
            return Err(ModelError::LengthMismatch {
                expected: m,
                got: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; m],
    };
    let mut theta = match init {
        Some(t) => {
            check_theta(design, t)?;
            t.clone()
        }
        None => Theta {
            beta: poisson_regression(design, Some(&weights))?,
            sigma1_sq: 0.1,
        },
    };
    theta.sigma1_sq = theta.sigma1_sq.max(opts.min_sigma1_sq);

    let objective = |t: &Theta| -> Option<f64> {
        subject_logliks(design, t, rule)
            .ok()
            .map(|li| weighted_sum(&li, &weights))
            .filter(|l| l.is_finite())
    };
    let gradient_and_hessian = |t: &Theta| -> Result<(f64, DVector<f64>, DMatrix<f64>), ModelError> {
        let evals = evaluate_subjects(design, t, rule)?;
        let mut g = DVector::zeros(p + 1);
        let mut h = DMatrix::zeros(p + 1, p + 1);
        let mut l = 0.0;
        for (e, w) in evals.iter().zip(&weights) {
            l += w * e.loglik;
            g.axpy(*w, &e.score, 1.0);
            h += &e.hessian * *w;
        }
        Ok((l, g, h))
    };

    let (mut value, mut grad, mut hess) = gradient_and_hessian(&theta)?;
    let mut iterations = 0;
    loop {
        let s = theta.sigma1_sq;
        let at_lower = s <= opts.min_sigma1_sq * (1.0 + 1e-9);
        let pin_variance = at_lower && grad[p] <= 0.0;
        let grad_norm = projected_norm(&grad, pin_variance);

        // Near the bound with the variance pushing inward, log σ₁² is
        // locally convex and modified steps crawl; step on σ₁² directly there.
        let log_curvature = s * s * hess[(p, p)] + s * grad[p];
        let scale = match opts.variance_scale {
            VarianceScale::Log if !pin_variance && log_curvature >= 0.0 => VarianceScale::Direct,
            other => other,
        };

        // Gradient and Hessian on the optimization scale.
        let (g_opt, h_opt) = match scale {
            VarianceScale::Direct => (grad.clone(), hess.clone()),
            VarianceScale::Log => {
                let mut g = grad.clone();
                let mut h = hess.clone();
                g[p] = s * grad[p];
                for k in 0..p {
                    h[(k, p)] *= s;
                    h[(p, k)] *= s;
                }
                h[(p, p)] = log_curvature;
                (g, h)
            }
        };
        let mut dir = ascent_direction(&g_opt, &h_opt, pin_variance);
        let amax = dir.amax();
        if amax > opts.max_step {
            dir *= opts.max_step / amax;
        }
        let theta_step = match scale {
            VarianceScale::Direct => dir.amax(),
            VarianceScale::Log => {
                let db = dir.rows(0, p).amax();
                db.max(s * dir[p].exp_m1().abs())
            }
        };
        if grad_norm < opts.grad_tol && theta_step < opts.step_tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(ModelError::NonConvergence {
                iterations,
                grad_norm,
            });
        }

        // Below rounding resolution of l the comparison carries no signal;
        // take the Newton step as a polishing step.
        let predicted_gain = 0.5 * g_opt.dot(&dir);
        let polishing = predicted_gain.abs() <= 1e-12 * (1.0 + value.abs());

        let mut t = 1.0;
        let mut accepted = None;
        if polishing {
            let cand = apply_step(&theta, &dir, 1.0, scale, opts.min_sigma1_sq);
            if objective(&cand).is_some() {
                accepted = Some(cand);
            }
        }
        for _ in 0..60 {
            if accepted.is_some() {
                break;
            }
            let cand = apply_step(&theta, &dir, t, scale, opts.min_sigma1_sq);
            if let Some(l) = objective(&cand) {
                if l >= value {
                    accepted = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            if grad_norm < opts.grad_tol {
                break;
            }
            return Err(ModelError::NonConvergence {
                iterations,
                grad_norm,
            });
        };
        theta = next;
        iterations += 1;
        (value, grad, hess) = gradient_and_hessian(&theta)?;
    }

    let at_boundary = theta.sigma1_sq <= opts.min_sigma1_sq * (1.0 + 1e-9);
    let evals = evaluate_subjects(design, &theta, rule)?;
    let mut derivs = collect_derivatives(&evals, Some(&weights));
    if opts.hessian == HessianMethod::FiniteDifference && weights.iter().all(|&w| w == 1.0) {
        derivs.hessian = finite_difference_hessian(design, &theta, rule)?;
    }
    let li: Vec<f64> = evals.iter().map(|e| e.loglik).collect();
    let mut g = DVector::zeros(p + 1);
    for (e, w) in evals.iter().zip(&weights) {
        g.axpy(*w, &e.score, 1.0);
    }
    let grad_norm = projected_norm(&g, at_boundary && g[p] <= 0.0);

    if !at_boundary && linalg::cholesky(&(-&derivs.hessian)).is_none() {
        return Err(ModelError::NonConcaveAtOptimum {
            max_eigenvalue: linalg::max_eigenvalue(&derivs.hessian),
        });
    }
    let mu_hat = DVector::from_iterator(
        n,
        (0..n).map(|r| {
            let e: f64 = (0..p).map(|k| design.x[(r, k)] * theta.beta[k]).sum();
            (e + 0.5 * theta.sigma1_sq).exp()
        }),
    );
    Ok(FitResult {
        loglik: weighted_sum(&li, &weights),
        li,
        delta: derivs.delta,
        hessian: derivs.hessian,
        subject_hessians: derivs.subject_hessians,
        eb: evals.iter().map(|e| e.random_effect).collect(),
        mu_hat,
        iterations,
        grad_norm,
        at_boundary,
        weights,
        theta_hat: theta,
        design: design.clone(),
        rule: rule.clone(),
    })
}

fn projected_norm(grad: &DVector<f64>, pin_variance: bool) -> f64 {
    let p = grad.len() - 1;
    if pin_variance {
        grad.rows(0, p).amax()
    } else {
        grad.amax()
    }
}

/// Newton direction for maximization; indefinite Hessians are replaced by
/// their negative-definite spectral modification.
fn ascent_direction(g: &DVector<f64>, h: &DMatrix<f64>, pin_variance: bool) -> DVector<f64> {
    let d = g.len();
    let k = if pin_variance { d - 1 } else { d };
    let gk = g.rows(0, k).into_owned();
    let neg_h = -h.view((0, 0), (k, k)).into_owned();
    let sub = match linalg::cholesky(&neg_h) {
        Some(chol) => chol.solve(&gk),
        None => linalg::modified_solve(&neg_h, &gk),
    };
    let mut dir = DVector::zeros(d);
    dir.rows_mut(0, k).copy_from(&sub);
    dir
}

fn apply_step(theta: &Theta, dir: &DVector<f64>, t: f64, scale: VarianceScale, min_sigma1_sq: f64) -> Theta {
    let p = theta.beta.len();
    let beta = theta
        .beta
        .iter()
        .zip(dir.iter())
        .map(|(b, d)| b + t * d)
        .collect();
    let s = match scale {
        VarianceScale::Log => theta.sigma1_sq * (t * dir[p]).exp(),
        VarianceScale::Direct => theta.sigma1_sq + t * dir[p],
    };
    Theta {
        beta,
        sigma1_sq: s.max(min_sigma1_sq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;

    fn toy_panel() -> PanelDataset {
        let rows = [
            (0, 11, 31, [5, 3, 3, 3]),
            (0, 11, 30, [3, 5, 3, 3]),
            (0, 6, 25, [2, 4, 0, 5]),
            (0, 8, 36, [4, 4, 1, 4]),
            (1, 66, 22, [7, 18, 9, 21]),
            (1, 27, 29, [5, 2, 8, 7]),
            (1, 12, 31, [6, 4, 0, 2]),
            (1, 52, 42, [40, 20, 23, 12]),
            (0, 23, 37, [5, 6, 6, 5]),
            (1, 10, 28, [14, 13, 6, 0]),
        ];
        PanelDataset::new(
            rows.iter()
                .enumerate()
                .map(|(i, &(trt, base, age, y))| SubjectRecord {
                    id: i as u32 + 1,
                    trt,
                    base,
                    age,
                    y,
                })
                .collect(),
        )
        .unwrap()
    }

    fn toy_design() -> DesignMatrices {
        let spec = DesignSpec::new(vec![Term::Intercept, Term::Lbase, Term::Trt]).unwrap();
        build_design(&toy_panel(), &spec).unwrap()
    }

    fn plain_poisson(design: &DesignMatrices, i: usize, beta: &[f64]) -> f64 {
        design
            .rows(i)
            .map(|r| {
                let eta: f64 = (0..design.p()).map(|k| design.x[(r, k)] * beta[k]).sum();
                design.y[r] * eta - eta.exp() - ln_gamma(design.y[r] + 1.0)
            })
            .sum()
    }

    #[test]
    fn degenerate_variance_is_plain_poisson() {
        let d = toy_design();
        let theta = Theta::new(vec![1.2, 0.7, -0.2], 1e-12).unwrap();
        for i in 0..d.n_subjects() {
            let l = subject_loglik(&d, i, &theta, &QuadratureRule::default()).unwrap();
            assert!((l - plain_poisson(&d, i, &theta.beta)).abs() < 1e-6);
        }
    }

    #[test]
    fn one_node_rule_is_laplace() {
        let d = toy_design();
        let theta = Theta::new(vec![1.0, 0.5, 0.1], 0.4).unwrap();
        for i in 0..d.n_subjects() {
            let (terms, _) = SubjectTerms::new(&d, i, &theta.beta);
            let mode = terms.mode(0.4, i).unwrap();
            let h = terms.mu_sum * mode.exp() + 1.0 / 0.4;
            let laplace =
                terms.log_joint(mode, 0.4) + 0.5 * (2.0 * std::f64::consts::PI / h).ln();
            let l = subject_loglik(&d, i, &theta, &QuadratureRule::new(1)).unwrap();
            assert!((l - laplace).abs() < 1e-12, "{l} vs {laplace}");
        }
    }

    #[test]
    fn weights_behave_linearly() {
        let d = toy_design();
        let rule = QuadratureRule::default();
        let theta = Theta::new(vec![1.0, 0.5, 0.1], 0.3).unwrap();
        let li = subject_logliks(&d, &theta, &rule).unwrap();
        let ones = vec![1.0; d.n_subjects()];
        let total = total_loglik(&d, &theta, &ones, &rule).unwrap();
        assert_eq!(total, li.iter().sum::<f64>());
        let mut del = ones.clone();
        del[3] = 0.0;
        let deleted = total_loglik(&d, &theta, &del, &rule).unwrap();
        assert!((deleted - (total - li[3])).abs() < 1e-10);
        let mut e = vec![0.0; d.n_subjects()];
        e[2] = 1.0;
        assert_eq!(total_loglik(&d, &theta, &e, &rule).unwrap(), li[2]);
        assert!(matches!(
            total_loglik(&d, &theta, &ones[1..], &rule),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn beta_score_matches_marginal_residuals_when_variance_vanishes() {
        let d = toy_design();
        let theta = Theta::new(vec![1.1, 0.6, -0.1], 1e-10).unwrap();
        let derivs = score_and_hessian(&d, &theta, &QuadratureRule::default()).unwrap();
        for i in 0..d.n_subjects() {
            for k in 0..d.p() {
                let direct: f64 = d
                    .rows(i)
                    .map(|r| {
                        let eta: f64 = (0..d.p()).map(|c| d.x[(r, c)] * theta.beta[c]).sum();
                        (d.y[r] - eta.exp()) * d.x[(r, k)]
                    })
                    .sum();
                assert!((derivs.delta[(k, i)] - direct).abs() < 1e-6 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn analytic_hessian_matches_finite_differences() {
        let d = toy_design();
        let rule = QuadratureRule::default();
        let theta = Theta::new(vec![1.3, 0.8, 0.1], 0.35).unwrap();
        let an = score_and_hessian(&d, &theta, &rule).unwrap().hessian;
        let fd = finite_difference_hessian(&d, &theta, &rule).unwrap();
        for (a, f) in an.iter().zip(fd.iter()) {
            assert!((a - f).abs() < 1e-5 * (1.0 + a.abs()), "{a} vs {f}");
        }
        let asym = (&an - an.transpose()).amax();
        assert!(asym < 1e-8);
    }

    #[test]
    fn fit_then_refit_is_a_fixed_point() {
        let panel = toy_panel();
        let spec = DesignSpec::new(vec![Term::Intercept, Term::Lbase, Term::Trt]).unwrap();
        let rule = QuadratureRule::default();
        let fit = fit_ml(&panel, &spec, &rule, None).unwrap();
        let sum_li: f64 = fit.li.iter().sum();
        assert!((sum_li - fit.loglik).abs() <= 1e-8 * fit.loglik.abs());
        let total: DVector<f64> = fit.delta.column_sum();
        assert!(total.amax() <= 1e-5 * fit.hessian.amax());
        let refit = fit_ml(&panel, &spec, &rule, Some(&fit.theta_hat)).unwrap();
        assert!(refit.iterations <= 2);
        let diff = (refit.theta_hat.to_vector() - fit.theta_hat.to_vector()).amax();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn direct_and_log_variance_scales_agree() {
        let d = toy_design();
        let rule = QuadratureRule::default();
        let log = fit_design(&d, &rule, None, None, &FitOptions::default()).unwrap();
        let direct = fit_design(
            &d,
            &rule,
            None,
            None,
            &FitOptions {
                variance_scale: VarianceScale::Direct,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(!log.at_boundary);
        let diff = (log.theta_hat.to_vector() - direct.theta_hat.to_vector()).amax();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn posterior_contracts() {
        let d = toy_design();
        let theta = Theta::new(vec![1.0, 0.5, 0.1], 0.3).unwrap();
        for i in 0..d.n_subjects() {
            let re = eb_estimate(&d, i, &theta, &QuadratureRule::default()).unwrap();
            assert!(re.var_b > 0.0 && re.var_b < 0.3);
        }
    }

    #[test]
    fn invalid_theta_rejected() {
        let d = toy_design();
        let rule = QuadratureRule::default();
        assert!(Theta::new(vec![0.0; 3], 0.0).is_err());
        let short = Theta {
            beta: vec![0.0; 2],
            sigma1_sq: 0.1,
        };
        assert!(matches!(
            subject_loglik(&d, 0, &short, &rule),
            Err(ModelError::LengthMismatch { .. })
        ));
    }
}
