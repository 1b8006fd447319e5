//! Training losses: pixel MSE on the final reconstruction and the Haar
//! wavelet loss on every module's whole-image output.
//!
//! ```text
//! L_WT    = 1/(N·K) Σ_j Σ_k ‖WT(X_j) − WT(X̂_j^(k))‖²_F
//! L_MSE   = 1/(numel·N) Σ_j ‖X_j − X̂_j‖²_F
//! L_total = L_MSE + γ·L_WT
//! ```

use std::rc::Rc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::imaging::{reflect_index, reflect_pad, Image};
use crate::wavelet::{haar_dwt, haar_stack, haar_var};

pub const DEFAULT_GAMMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub wt: f64,
    pub total: f64,
    /// Each module's share of `wt` (these sum to `wt`).
    pub per_module_wt: Vec<f64>,
}

pub fn total_loss(mse: f64, wt: f64, gamma: f64) -> f64 {
    mse + gamma * wt
}

fn same_shapes(a: &[Image], b: &[Image]) -> Result<()> {
    if a.len() != b.len() {
        return dim_err(format!("{} originals vs {} outputs", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.pixels.dim() != y.pixels.dim() {
            return dim_err(format!(
                "shape mismatch {:?} vs {:?}",
                x.pixels.dim(),
                y.pixels.dim()
            ));
        }
    }
    Ok(())
}

pub fn mse_loss(originals: &[Image], finals: &[Image]) -> Result<f64> {
    same_shapes(originals, finals)?;
    if originals.is_empty() {
        return dim_err("no images");
    }
    let n = originals.len() as f64;
    let sum: f64 = originals
        .iter()
        .zip(finals)
        .map(|(x, y)| {
            let sq: f64 = x
                .pixels
                .iter()
                .zip(y.pixels.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq / x.numel() as f64
        })
        .sum();
    Ok(sum / n)
}

/// `outputs[j][k]` is module `k`'s whole-image output for original `j`.
pub fn wavelet_loss(originals: &[Image], outputs: &[Vec<Image>]) -> Result<f64> {
    if originals.len() != outputs.len() || originals.is_empty() {
        return dim_err(format!(
            "{} originals vs {} output groups",
            originals.len(),
            outputs.len()
        ));
    }
    let k = outputs[0].len();
    if k == 0 || outputs.iter().any(|o| o.len() != k) {
        return dim_err("every original needs the same nonzero number of module outputs");
    }
    let mut sum = 0.0;
    for (x, outs) in originals.iter().zip(outputs) {
        let wx = haar_dwt(x.pixels.view())?;
        for o in outs {
            if o.pixels.dim() != x.pixels.dim() {
                return dim_err("module output shape differs from the original");
            }
            sum += wx.distance_sq(&haar_dwt(o.pixels.view())?);
        }
    }
    Ok(sum / (originals.len() * k) as f64)
}

/// `[N, 1, H, W]` stack of images, reflect-padded to even size when
/// `even` is set.
pub fn stack_images(images: &[Image], even: bool) -> ArrayD<f64> {
    let (h, w) = images[0].pixels.dim();
    let (ph, pw) = if even { (h % 2, w % 2) } else { (0, 0) };
    let mut out = ndarray::Array4::zeros((images.len(), 1, h + ph, w + pw));
    for (i, img) in images.iter().enumerate() {
        let px = if ph + pw > 0 {
            reflect_pad(&img.pixels, ph, pw)
        } else {
            img.pixels.clone()
        };
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&px);
    }
    out.into_dyn()
}

/// Reflect-pads the spatial axes of a `[N, C, H, W]` batch to even size, the
/// same padding [`haar_dwt`] applies to odd images.
pub fn pad_even_var<'t>(x: &Var<'t>) -> Var<'t> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    if h % 2 == 0 && w % 2 == 0 {
        return x.clone();
    }
    let (he, we) = (h + h % 2, w + w % 2);
    let planes = s[0] * s[1];
    let mut index = Vec::with_capacity(planes * he * we);
    for p in 0..planes {
        for r in 0..he {
            let sr = reflect_index(r as isize, h);
            for c in 0..we {
                index.push(p * h * w + sr * w + reflect_index(c as isize, w));
            }
        }
    }
    x.gather(Rc::new(index), &[s[0], s[1], he, we])
}

/// Stacked Haar coefficients of the originals, `[N, 4, ⌈H/2⌉, ⌈W/2⌉]`.
pub fn haar_stack_images(images: &[Image]) -> ArrayD<f64> {
    haar_stack(&stack_images(images, true))
}

/// `Σ_j ‖X_j − X̂_j‖² / (numel·N)` on a `[N, 1, H, W]` batch.
pub fn mse_loss_var<'t>(target: &ArrayD<f64>, output: &Var<'t>) -> Var<'t> {
    let s = target.shape();
    let numel = (s[2] * s[3]) as f64;
    let t = output.tape().constant(target.clone());
    output.sub(&t).square().sum().scale(1.0 / (numel * s[0] as f64))
}

/// `Σ_j ‖WT(X_j) − WT(X̂_j)‖²` for one module on a `[N, 1, H, W]` batch with
/// even spatial size. `target_wt` is the precomputed transform of the
/// originals.
pub fn wavelet_sq_var<'t>(target_wt: &ArrayD<f64>, output: &Var<'t>) -> Result<Var<'t>> {
    let w = haar_var(output)?;
    if w.shape() != target_wt.shape() {
        return dim_err(format!(
            "wavelet shapes differ: {:?} vs {:?}",
            w.shape(),
            target_wt.shape()
        ));
    }
    let t = output.tape().constant(target_wt.clone());
    Ok(w.sub(&t).square().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, rng: &mut impl Rng) -> Image {
        Image::new("r", Array2::from_shape_fn((h, w), |_| rng.random::<f64>()))
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(0.5, 2.0, 0.01) - 0.52).abs() < 1e-15);
        assert_eq!(total_loss(0.5, 2.0, 0.0), 0.5);
        assert_eq!(DEFAULT_GAMMA, 0.01);
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_img(2, 2, &mut rng);
        assert_eq!(mse_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        let b = Image::new("b", &a.pixels + 0.1);
        assert!((mse_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap() - 0.01).abs() < 1e-15);
        let c = Image::new("c", &a.pixels + 0.3);
        let ratio = mse_loss(std::slice::from_ref(&a), &[c]).unwrap() / mse_loss(std::slice::from_ref(&a), &[b]).unwrap();
        assert!((ratio - 9.0).abs() < 1e-9);
        assert!(mse_loss(std::slice::from_ref(&a), &[rand_img(3, 2, &mut rng)]).is_err());
    }

    #[test]
    fn wavelet_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_img(6, 8, &mut rng);
        assert_eq!(wavelet_loss(std::slice::from_ref(&x), &[vec![x.clone()]]).unwrap(), 0.0);
        let mut bumped = x.clone();
        bumped.pixels[[3, 5]] += 0.5;
        let single = wavelet_loss(std::slice::from_ref(&x), &[vec![bumped.clone()]]).unwrap();
        assert!((single - 0.25).abs() < 1e-12);
        let other = rand_img(6, 8, &mut rng);
        let base = wavelet_loss(std::slice::from_ref(&x), &[vec![bumped.clone(), other.clone()]]).unwrap();
        let doubled = wavelet_loss(std::slice::from_ref(&x), &[vec![bumped.clone(), other.clone(), bumped, other]]).unwrap();
        assert!((base - doubled).abs() < 1e-12);
        assert!(wavelet_loss(std::slice::from_ref(&x), &[vec![rand_img(4, 8, &mut rng)]]).is_err());
    }

    #[test]
    fn odd_images_pad_like_the_plain_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = vec![rand_img(5, 7, &mut rng)];
        let ys = vec![rand_img(5, 7, &mut rng)];
        let tape = Tape::new();
        let out = pad_even_var(&tape.param(stack_images(&ys, false)));
        assert_eq!(out.shape(), &[1, 1, 6, 8]);
        let w = wavelet_sq_var(&haar_stack(&stack_images(&xs, true)), &out).unwrap().item();
        let plain = wavelet_loss(&xs, std::slice::from_ref(&ys)).unwrap();
        assert!((w - plain).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Image> = (0..2).map(|_| rand_img(6, 4, &mut rng)).collect();
        let ys: Vec<Image> = (0..2).map(|_| rand_img(6, 4, &mut rng)).collect();
        let tape = Tape::new();
        let out = tape.param(stack_images(&ys, true));
        let target = stack_images(&xs, true);
        let m = mse_loss_var(&target, &out).item();
        assert!((m - mse_loss(&xs, &ys).unwrap()).abs() < 1e-14);
        let w = wavelet_sq_var(&haar_stack(&target), &out).unwrap().item() / 2.0;
        let outputs: Vec<Vec<Image>> = ys.iter().map(|y| vec![y.clone()]).collect();
        assert!((w - wavelet_loss(&xs, &outputs).unwrap()).abs() < 1e-12);
    }
}
