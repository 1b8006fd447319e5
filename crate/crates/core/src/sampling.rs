//! Sampling operators and mean-subtraction sampling.
//!
//! Each patch `x*` is measured with the augmented matrix `A* = [A; 1ᵀ]`. The
//! extra all-ones row yields `n·x̄*`, from which the measurement of the
//! zero-mean patch is recovered without ever observing `x*` directly:
//!
//! ```text
//! y = ỹ − (1/n)·A·[y_{m+1}, …, y_{m+1}]ᵀ,   ỹ = A x*,   y_{m+1} = Σ x*_j
//! ```
//!
//! The default operator has orthonormal rows. Under additive white noise on
//! the signal, the maximum-likelihood data term is
//! `‖(AAᵀ)^{-1/2}(y − Ax)‖²`, i.e. plain least squares with the whitened
//! matrix `Ǎ = (AAᵀ)^{-1/2}A = U[I 0]Vᵀ`. [`init_whitened`] draws such a
//! matrix directly by picking random rows of a random orthogonal matrix and
//! [`whiten`] maps an arbitrary full-row-rank matrix onto that form.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::linalg::{from_na, to_na};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingOperator {
    pub matrix: Array2<f64>,
    pub whitened: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    /// Measurement of the mean-subtracted patch.
    pub y: Array1<f64>,
    /// `ỹ = A x*`.
    pub y_raw: Array1<f64>,
    /// `y_{m+1} = n·x̄*`.
    pub mean_channel: f64,
    pub patch_mean: f64,
}

impl SamplingOperator {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return dim_err("sampling matrix is empty");
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("sampling matrix has non-finite entries".into()));
        }
        Ok(SamplingOperator {
            matrix,
            whitened: false,
            trainable: true,
        })
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }
}

/// `m = round(ratio·n)` clamped to `[1, n−1]`.
pub fn measurement_count(ratio: f64, n: usize) -> usize {
    let m = (ratio * n as f64).round() as usize;
    m.clamp(1, n.saturating_sub(1).max(1))
}

/// Random `m × n` matrix with orthonormal rows: `m` rows drawn without
/// replacement from the orthogonal factor of an `n × n` Gaussian matrix.
pub fn init_whitened(m: usize, n: usize, seed: u64) -> Result<SamplingOperator> {
    if m == 0 || m >= n {
        return dim_err(format!("need 1 <= m < n, got m={m}, n={n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let mut rows = rand::seq::index::sample(&mut rng, n, m).into_vec();
    rows.sort_unstable();
    let matrix = Array2::from_shape_fn((m, n), |(i, j)| q[(rows[i], j)]);
    Ok(SamplingOperator {
        matrix,
        whitened: true,
        trainable: true,
    })
}

/// `(AAᵀ)^{-1/2} A`, computed from the eigendecomposition of the Gram matrix.
pub fn whiten(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m, n) = a.dim();
    if m == 0 || n == 0 {
        return dim_err("cannot whiten an empty matrix");
    }
    if m > n {
        return Err(Error::Singular(format!(
            "{m}x{n} matrix cannot have full row rank"
        )));
    }
    let gram = to_na(a.dot(&a.t()).view());
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    // Singular values are the square roots of the Gram eigenvalues.
    if min.is_nan() || min <= 0.0 || min.sqrt() <= 1e-10 * max.sqrt() {
        return Err(Error::Singular(format!(
            "smallest singular value {:.3e} vs largest {:.3e}",
            min.max(0.0).sqrt(),
            max.sqrt()
        )));
    }
    let q = &eig.eigenvectors;
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let w = q * inv_sqrt * q.transpose();
    Ok(from_na(&w).dot(&a))
}

/// `A* = [A; 1ᵀ]`.
pub fn augment(op: &SamplingOperator) -> Array2<f64> {
    let mut out = Array2::ones((op.m() + 1, op.n()));
    out.slice_mut(ndarray::s![..op.m(), ..]).assign(&op.matrix);
    out
}

pub fn mss_sample(op: &SamplingOperator, x_star: ArrayView1<'_, f64>) -> Result<Measurement> {
    let n = op.n();
    if x_star.len() != n {
        return dim_err(format!("patch has {} entries, operator expects {n}", x_star.len()));
    }
    let y_star = augment(op).dot(&x_star);
    let m = op.m();
    let y_raw = y_star.slice(ndarray::s![..m]).to_owned();
    let mean_channel = y_star[m];
    let fill = Array1::from_elem(n, mean_channel);
    let y = &y_raw - &(op.matrix.dot(&fill) / n as f64);
    Ok(Measurement {
        y,
        y_raw,
        mean_channel,
        patch_mean: mean_channel / n as f64,
    })
}

/// Batched measurement of `P × n` patches: returns `(Y, means)` where row `p`
/// of `Y` is the measurement for patch `p`. Without mean subtraction `Y` is
/// the plain `A x*` and the means are zero.
pub fn sample_patches(
    op: &SamplingOperator,
    patches: ArrayView2<'_, f64>,
    mss: bool,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if patches.ncols() != op.n() {
        return dim_err(format!(
            "patches have {} entries, operator expects {}",
            patches.ncols(),
            op.n()
        ));
    }
    let (y, means) = sample_values(&op.matrix, patches, mss);
    Ok((y, means))
}

fn sample_values(
    a: &Array2<f64>,
    patches: ArrayView2<'_, f64>,
    mss: bool,
) -> (Array2<f64>, Array1<f64>) {
    let n = a.ncols() as f64;
    let y_raw = patches.dot(&a.t());
    if !mss {
        return (y_raw, Array1::zeros(patches.nrows()));
    }
    let mean_channel = patches.sum_axis(Axis(1));
    let means = &mean_channel / n;
    let a_ones = a.sum_axis(Axis(1));
    let correction = means
        .view()
        .insert_axis(Axis(1))
        .dot(&a_ones.view().insert_axis(Axis(0)));
    (y_raw - correction, means)
}

/// Differentiable counterpart of [`sample_patches`] with respect to `A`.
pub fn sample_patches_var<'t>(
    a: &Var<'t>,
    patches: &Array2<f64>,
    mss: bool,
) -> (Var<'t>, Array1<f64>) {
    let a_val = a
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let (y, means) = sample_values(&a_val, patches.view(), mss);
    // dY/dA acts through the centered (or raw) patches.
    let effective = Rc::new(if mss {
        patches - &means.view().insert_axis(Axis(1))
    } else {
        patches.clone()
    });
    let y = a.tape().record(y.into_dyn(), &[a], move |g, _| {
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        vec![Some(g2.t().dot(&*effective).into_dyn())]
    });
    (y, means)
}
