//! Gauss–Hermite rules for integrating a scalar Gaussian random effect.

use serde::{Deserialize, Serialize};

/// Physicists' Gauss–Hermite rule: `∫ f(z) e^{-z²} dz ≈ Σ w_k f(z_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Recenter and rescale at the conditional mode of each integrand.
    pub adaptive: bool,
}

pub const DEFAULT_ORDER: usize = 25;

impl QuadratureRule {
    /// Builds an adaptive rule of the given order. Panics if `order == 0`.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be at least 1");
        let (nodes, weights) = gauss_hermite(order);
        Self {
            order,
            nodes,
            weights,
            adaptive: true,
        }
    }

    pub fn non_adaptive(order: usize) -> Self {
        Self {
            adaptive: false,
            ..Self::new(order)
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// |Σ w_k e^{z_k²} φ(√2 z_k) √2 − 1|: integrates the standard normal
    /// density on the rescaled nodes.
    pub fn normalization_error(&self) -> f64 {
        let s2 = std::f64::consts::SQRT_2;
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| {
                let u = s2 * z;
                w * (z * z).exp() * (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt() * s2
            })
            .sum();
        (total - 1.0).abs()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::new(DEFAULT_ORDER)
    }
}

/// Nodes (ascending) and weights by Newton iteration on the orthonormal
/// Hermite recurrence.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}
