//! Dense linear algebra glue between `ndarray` and `nalgebra`, plus the
//! cached solver for the penalized normal equations `(AᵀA + ρI) x = b`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `max |AAᵀ − I|`.
pub fn orthonormality_error(a: ArrayView2<'_, f64>) -> f64 {
    let g = a.dot(&a.t());
    g.indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// Applies `(AᵀA + ρI)⁻¹` to a batch of row vectors through the `m × m`
/// Woodbury form
///
/// ```text
/// (AᵀA + ρI)⁻¹ v = (v − Aᵀ (AAᵀ + ρI)⁻¹ A v) / ρ
/// ```
///
/// The Cholesky factor of `AAᵀ + ρI` is computed once per `(A, ρ)` pair.
pub struct XSolver {
    a: Array2<f64>,
    rho: f64,
    chol: Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for XSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("XSolver")
            .field("m", &self.a.nrows())
            .field("n", &self.a.ncols())
            .field("rho", &self.rho)
            .finish()
    }
}

impl XSolver {
    pub fn new(a: ArrayView2<'_, f64>, rho: f64) -> Result<Self> {
        let gram = a.dot(&a.t());
        Self::with_gram(a, &gram, rho)
    }

    /// Reuses a precomputed `AAᵀ`, shared by every module within one step.
    pub fn with_gram(a: ArrayView2<'_, f64>, gram: &Array2<f64>, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Numeric(format!("penalty must be positive, got {rho}")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("sampling matrix has non-finite entries".into()));
        }
        let m = a.nrows();
        let mut s = to_na(gram.view());
        for i in 0..m {
            s[(i, i)] += rho;
        }
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::Singular("AAᵀ + ρI is not positive definite".into()))?;
        Ok(XSolver {
            a: a.to_owned(),
            rho,
            chol,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.a
    }

    /// Solves every row of `v` (`B × n`).
    pub fn apply(&self, v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if v.ncols() != self.a.ncols() {
            return Err(Error::Dimension(format!(
                "x-update expects vectors of length {}, got {}",
                self.a.ncols(),
                v.ncols()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("x-update right-hand side is not finite".into()));
        }
        Ok(self.solve_rows(v))
    }

    /// [`Self::apply`] without validation.
    pub(crate) fn solve_rows(&self, v: ArrayView2<'_, f64>) -> Array2<f64> {
        // P = V Aᵀ  (B × m);  Qᵀ = S⁻¹ Pᵀ
        let p = v.dot(&self.a.t());
        let pt = to_na(p.t());
        let qt = self.chol.solve(&pt);
        let q = from_na(&qt).reversed_axes();
        let mut out = v.to_owned();
        out -= &q.dot(&self.a);
        out /= self.rho;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn woodbury_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_fn((3, 7), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((2, 7), |_| rng.random_range(-1.0..1.0));
        let rho = 0.3;
        let solver = XSolver::new(a.view(), rho).unwrap();
        let x = solver.apply(v.view()).unwrap();
        let mut m = to_na(a.t().dot(&a).view());
        for i in 0..7 {
            m[(i, i)] += rho;
        }
        let dense = m.lu().solve(&to_na(v.t())).unwrap();
        assert!(max_abs_diff(x.view(), from_na(&dense).t()) < 1e-12);
    }

    #[test]
    fn rejects_bad_penalty_and_inputs() {
        let a = Array2::eye(2);
        assert!(XSolver::new(a.view(), 0.0).is_err());
        assert!(XSolver::new(a.view(), f64::NAN).is_err());
        let s = XSolver::new(a.view(), 1.0).unwrap();
        assert!(matches!(
            s.apply(Array2::from_elem((1, 2), f64::INFINITY).view()),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(s.apply(Array2::zeros((1, 3)).view()), Err(Error::Dimension(_))));
    }
}
