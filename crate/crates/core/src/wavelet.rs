//! One-level orthonormal 2-D Haar transform.
//!
//! For every 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a + b − c − d) / 2
//! HL = (a − b + c − d) / 2    HH = (a − b − c + d) / 2
//! ```
//!
//! The transform is orthonormal, so squared Frobenius distances are the same
//! in the pixel and coefficient domains. Odd-sized inputs are reflect-padded
//! by one row/column before transforming.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix4};

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::imaging::reflect_pad;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
    /// Rows/columns added to make the input even.
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl WaveletCoeffs {
    pub fn bands(&self) -> [&Array2<f64>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands()
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Squared Frobenius distance over all four stacked sub-bands.
    pub fn distance_sq(&self, other: &WaveletCoeffs) -> f64 {
        self.bands()
            .iter()
            .zip(other.bands())
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum()
    }
}

fn forward_block(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [
        0.5 * (a + b + c + d),
        0.5 * (a + b - c - d),
        0.5 * (a - b + c - d),
        0.5 * (a - b - c + d),
    ]
}

fn inverse_block(ll: f64, lh: f64, hl: f64, hh: f64) -> [f64; 4] {
    [
        0.5 * (ll + lh + hl + hh),
        0.5 * (ll + lh - hl - hh),
        0.5 * (ll - lh + hl - hh),
        0.5 * (ll - lh - hl + hh),
    ]
}

pub fn haar_dwt(image: ArrayView2<'_, f64>) -> Result<WaveletCoeffs> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return dim_err("cannot transform an empty image");
    }
    let (pb, pr) = (h % 2, w % 2);
    let padded;
    let src = if pb + pr > 0 {
        padded = reflect_pad(&image.to_owned(), pb, pr);
        padded.view()
    } else {
        image
    };
    let (h2, w2) = ((h + pb) / 2, (w + pr) / 2);
    let mut bands: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((h2, w2)));
    for i in 0..h2 {
        for j in 0..w2 {
            let c = forward_block(
                src[[2 * i, 2 * j]],
                src[[2 * i, 2 * j + 1]],
                src[[2 * i + 1, 2 * j]],
                src[[2 * i + 1, 2 * j + 1]],
            );
            for (band, v) in bands.iter_mut().zip(c) {
                band[[i, j]] = v;
            }
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(WaveletCoeffs {
        ll,
        lh,
        hl,
        hh,
        pad_bottom: pb,
        pad_right: pr,
    })
}

/// Inverse transform; padding added by [`haar_dwt`] is cropped away.
pub fn haar_idwt(c: &WaveletCoeffs) -> Array2<f64> {
    let (h2, w2) = c.ll.dim();
    let mut out = Array2::zeros((2 * h2, 2 * w2));
    for i in 0..h2 {
        for j in 0..w2 {
            let [a, b, cc, d] =
                inverse_block(c.ll[[i, j]], c.lh[[i, j]], c.hl[[i, j]], c.hh[[i, j]]);
            out[[2 * i, 2 * j]] = a;
            out[[2 * i, 2 * j + 1]] = b;
            out[[2 * i + 1, 2 * j]] = cc;
            out[[2 * i + 1, 2 * j + 1]] = d;
        }
    }
    out.slice(ndarray::s![..2 * h2 - c.pad_bottom, ..2 * w2 - c.pad_right])
        .to_owned()
}

/// `[N, 1, H, W] → [N, 4, H/2, W/2]` with bands ordered LL, LH, HL, HH.
fn stack_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _, h, w) = x4.dim();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = ndarray::Array4::zeros((n, 4, h2, w2));
    for b in 0..n {
        let img = x4.index_axis(Axis(0), b);
        let img = img.index_axis(Axis(0), 0);
        for i in 0..h2 {
            for j in 0..w2 {
                let c = forward_block(
                    img[[2 * i, 2 * j]],
                    img[[2 * i, 2 * j + 1]],
                    img[[2 * i + 1, 2 * j]],
                    img[[2 * i + 1, 2 * j + 1]],
                );
                for (k, v) in c.into_iter().enumerate() {
                    out[[b, k, i, j]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

fn stack_inverse(g: &ArrayD<f64>) -> ArrayD<f64> {
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _, h2, w2) = g4.dim();
    let mut out = ndarray::Array4::zeros((n, 1, 2 * h2, 2 * w2));
    for b in 0..n {
        for i in 0..h2 {
            for j in 0..w2 {
                let px = inverse_block(
                    g4[[b, 0, i, j]],
                    g4[[b, 1, i, j]],
                    g4[[b, 2, i, j]],
                    g4[[b, 3, i, j]],
                );
                out[[b, 0, 2 * i, 2 * j]] = px[0];
                out[[b, 0, 2 * i, 2 * j + 1]] = px[1];
                out[[b, 0, 2 * i + 1, 2 * j]] = px[2];
                out[[b, 0, 2 * i + 1, 2 * j + 1]] = px[3];
            }
        }
    }
    out.into_dyn()
}

/// Stacked Haar sub-bands of a batch of even-sized single-channel images.
/// The transform is orthonormal, so the backward pass is the inverse.
pub fn haar_var<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return dim_err(format!("haar expects [N,1,even,even], got {s:?}"));
    }
    let value = stack_forward(x.value());
    Ok(x.tape()
        .record(value, &[x], |g, _| vec![Some(stack_inverse(g))]))
}

/// Same stacking as [`haar_var`] on a plain array batch.
pub fn haar_stack(images: &ArrayD<f64>) -> ArrayD<f64> {
    debug_assert_eq!(images.ndim(), 4);
    stack_forward(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_only_ll() {
        let c = haar_dwt(Array2::from_elem((4, 6), 0.3).view()).unwrap();
        assert!(c.ll.iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for band in [&c.lh, &c.hl, &c.hh] {
            assert!(band.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_by_two_by_hand() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
        let w = haar_dwt(array![[a, b], [c, d]].view()).unwrap();
        assert_eq!(w.ll[[0, 0]], 5.5);
        assert_eq!(w.lh[[0, 0]], -2.5);
        assert_eq!(w.hl[[0, 0]], -1.5);
        assert_eq!(w.hh[[0, 0]], 0.5);
        // energy: 1 + 4 + 9 + 25 = 39
        assert!((w.energy() - 39.0).abs() < 1e-12);
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Array2::from_shape_fn((5, 7), |_| rng.random::<f64>());
        let c = haar_dwt(img.view()).unwrap();
        assert_eq!((c.pad_bottom, c.pad_right), (1, 1));
        assert_eq!(c.ll.dim(), (3, 4));
        assert!((haar_idwt(&c) - &img).iter().all(|v| v.abs() < 1e-12));
        assert!(haar_dwt(Array2::<f64>::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn graph_transform_matches_plain_and_backprops_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>());
        let tape = Tape::new();
        let x = tape.param(img.clone().into_shape_with_order((1, 1, 4, 6)).unwrap().into_dyn());
        let w = haar_var(&x).unwrap();
        let plain = haar_dwt(img.view()).unwrap();
        for (k, band) in plain.bands().iter().enumerate() {
            let got = w.value().index_axis(Axis(0), 0).index_axis(Axis(0), k).to_owned();
            assert!((&got - *band).iter().all(|v| v.abs() < 1e-15));
        }
        // d/dx ‖WT(x)‖² = 2x by orthonormality
        let g = tape.backward(&w.square().sum()).wrt(&x);
        assert!((g - x.value() * 2.0).iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_parseval(h in 1usize..10, w in 1usize..10, seed in 0u64..1000) {
            let (h, w) = (2 * h, 2 * w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
            let (cx, cy) = (haar_dwt(x.view()).unwrap(), haar_dwt(y.view()).unwrap());
            prop_assert!((haar_idwt(&cx) - &x).iter().all(|v| v.abs() <= 1e-10));
            let pixel: f64 = (&x - &y).iter().map(|v| v * v).sum();
            prop_assert!((cx.distance_sq(&cy) - pixel).abs() <= 1e-8);
        }
    }
}
