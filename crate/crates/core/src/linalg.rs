//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Cholesky factor of a symmetric positive definite matrix, or `None`.
pub fn cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(symmetrize(a))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `A x = b` after flooring the eigenvalues of symmetric `A` at a
/// small positive multiple of its spectral radius (absolute values taken).
pub fn modified_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let radius = eig.eigenvalues.amax().max(1.0);
    let floor = 1e-8 * radius;
    let coords = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        coords.len(),
        coords
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| c / l.abs().max(floor)),
    );
    &eig.eigenvectors * scaled
}

/// `V^{-1/2}` of a symmetric positive definite matrix.
pub fn inv_sqrt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(a));
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Quadratic form `bᵀ A⁻¹ b` through a Cholesky factor.
pub fn inverse_quadratic_form(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> f64 {
    b.dot(&chol.solve(b))
}
