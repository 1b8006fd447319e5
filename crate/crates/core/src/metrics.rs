//! Reconstruction quality metrics on [0,1] images.

use ndarray::{Array2, ArrayView2};

use crate::error::{dim_err, Result};
use crate::imaging::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.pixels.dim() != b.pixels.dim() {
        return dim_err(format!(
            "image shapes differ: {:?} vs {:?}",
            a.pixels.dim(),
            b.pixels.dim()
        ));
    }
    if a.numel() == 0 {
        return dim_err("images are empty");
    }
    Ok(())
}

pub fn mse(reference: &Image, candidate: &Image) -> Result<f64> {
    check_shapes(reference, candidate)?;
    let sum: f64 = reference
        .pixels
        .iter()
        .zip(candidate.pixels.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.numel() as f64)
}

/// Peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Image, candidate: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, candidate)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h−k+1) × (w−k+1)`.
fn filter_valid(x: ArrayView2<'_, f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let tmp = Array2::from_shape_fn((h, w + 1 - n), |(r, c)| {
        k.iter().enumerate().map(|(i, kv)| kv * x[[r, c + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(r, c)| {
        k.iter().enumerate().map(|(i, kv)| kv * tmp[[r + i, c]]).sum::<f64>()
    })
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), `L = 1`,
/// `C1 = (0.01L)²`, `C2 = (0.03L)²`, averaged over all window positions that
/// lie fully inside the image. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(reference: &Image, candidate: &Image) -> Result<f64> {
    check_shapes(reference, candidate)?;
    let (h, w) = reference.pixels.dim();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let (x, y) = (reference.pixels.view(), candidate.pixels.view());
    let mu_x = filter_valid(x, &k);
    let mu_y = filter_valid(y, &k);
    let xx = filter_valid((&x * &x).view(), &k);
    let yy = filter_valid((&y * &y).view(), &k);
    let xy = filter_valid((&x * &y).view(), &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for (((mx, my), (sxx, syy)), sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()))
        .zip(xy.iter())
    {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn field(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Image {
        Image::new("f", Array2::from_shape_fn((h, w), |(r, c)| f(r as f64, c as f64)))
    }

    fn reference() -> Image {
        field(24, 20, |r, c| 0.5 + 0.3 * (0.37 * r + 0.11 * c).sin() * (0.23 * c - 0.05 * r).cos())
    }

    #[test]
    fn psnr_values() {
        let a = reference();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let b = Image::new("b", &a.pixels + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &field(3, 3, |_, _| 0.0)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut last = f64::INFINITY;
        for sd in [0.01, 0.03, 0.1] {
            let noise = Normal::new(0.0, sd).unwrap();
            let noisy = Image::new("n", a.pixels.mapv(|v| v + noise.sample(&mut rng)));
            let p = psnr(&a, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    // Expected values from scikit-image `structural_similarity` with
    // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    // data_range=1.0 on the same analytic fields.
    #[test]
    fn ssim_matches_reference_implementation() {
        let a = reference();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let shifted = Image::new("s", &a.pixels + 0.1);
        assert!((ssim(&a, &shifted).unwrap() - 0.9826511844794948).abs() < 1e-6);
        let pert = field(24, 20, |r, c| {
            0.5 + 0.3 * (0.37 * r + 0.11 * c).sin() * (0.23 * c - 0.05 * r).cos() + 0.05 * (1.3 * r + 0.7 * c).cos()
        });
        assert!((ssim(&a, &pert).unwrap() - 0.9160535006487931).abs() < 1e-6);
        let hc = field(24, 20, |r, c| {
            0.5 + 0.45 * ((0.6 * r + 0.3).sin() * (0.5 * c + 0.2).sin()).signum()
        });
        let neg = Image::new("neg", hc.pixels.mapv(|v| 1.0 - v));
        let s = ssim(&hc, &neg).unwrap();
        assert!((s - -0.7814504328868319).abs() < 1e-6);
        assert!(s < 0.5);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let b = Image::new("b", a.pixels.mapv(|v| v + noise.sample(&mut rng)));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_small_images_use_smaller_window() {
        let a = field(6, 8, |r, c| (r + c) / 14.0);
        let v = ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }
}
