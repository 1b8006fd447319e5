//! Grayscale images, dataset ingestion and the patch grid used by every
//! stage of the pipeline.
//!
//! Patches are non-overlapping `side × side` tiles of the image after it has
//! been reflect-padded on the bottom and right edges up to the next multiple
//! of `side`. Patches are ordered row-major over the grid and every patch is
//! rasterized row-major into a vector of length `n = side²`.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
const LUMA_601: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub name: String,
    pub pixels: Array2<f64>,
}

impl Image {
    pub fn new(name: impl Into<String>, pixels: Array2<f64>) -> Self {
        Image {
            name: name.into(),
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn numel(&self) -> usize {
        self.pixels.len()
    }

    /// Top-left `h × w` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        Image::new(
            self.name.clone(),
            self.pixels
                .slice(s![top..top + h, left..left + w])
                .to_owned(),
        )
    }

    pub fn clamped(&self) -> Image {
        Image::new(self.name.clone(), self.pixels.mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Writes an 8-bit grayscale file; the format follows the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let buf = image::GrayImage::from_fn(w, h, |x, y| {
            let v = self.pixels[[y as usize, x as usize]].clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        });
        buf.save(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Reflection index into `0..len` for any `i`, mirroring without repeating
/// the edge sample. Indices further out than one period keep folding.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Reflect-pads on the bottom and right.
pub fn reflect_pad(pixels: &Array2<f64>, pad_bottom: usize, pad_right: usize) -> Array2<f64> {
    let (h, w) = pixels.dim();
    Array2::from_shape_fn((h + pad_bottom, w + pad_right), |(r, c)| {
        pixels[[
            reflect_index(r as isize, h),
            reflect_index(c as isize, w),
        ]]
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_side: usize,
    pub rows: usize,
    pub cols: usize,
    /// Size of the original, unpadded image.
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    /// One rasterized patch per row, `rows·cols × n`.
    pub patches: Array2<f64>,
}

/// Grid geometry without the patch payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub patch_side: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn for_image(height: usize, width: usize, patch_side: usize) -> Result<Self> {
        if patch_side < 2 {
            return Err(Error::Config(format!(
                "patch side must be at least 2, got {patch_side}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Dimension("image is empty".into()));
        }
        Ok(GridShape {
            patch_side,
            rows: height.div_ceil(patch_side),
            cols: width.div_ceil(patch_side),
            height,
            width,
        })
    }

    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.patch_side
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.patch_side
    }

    pub fn pad_bottom(&self) -> usize {
        self.padded_height() - self.height
    }

    pub fn pad_right(&self) -> usize {
        self.padded_width() - self.width
    }

    /// For each entry of the `count × n` patch matrix (row-major), the flat
    /// index of the corresponding pixel in the padded image.
    pub fn patch_to_pixel_index(&self) -> Vec<usize> {
        let s = self.patch_side;
        let pw = self.padded_width();
        let mut idx = Vec::with_capacity(self.count() * self.n());
        for pr in 0..self.rows {
            for pc in 0..self.cols {
                for i in 0..s {
                    for j in 0..s {
                        idx.push((pr * s + i) * pw + pc * s + j);
                    }
                }
            }
        }
        idx
    }

    /// Inverse permutation of [`Self::patch_to_pixel_index`].
    pub fn pixel_to_patch_index(&self) -> Vec<usize> {
        let fwd = self.patch_to_pixel_index();
        let mut inv = vec![0; fwd.len()];
        for (k, &p) in fwd.iter().enumerate() {
            inv[p] = k;
        }
        inv
    }
}

impl PatchGrid {
    pub fn shape(&self) -> GridShape {
        GridShape {
            patch_side: self.patch_side,
            rows: self.rows,
            cols: self.cols,
            height: self.height,
            width: self.width,
        }
    }

    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    /// Rebuilds a grid around new patch content with the same geometry.
    pub fn with_patches(&self, patches: Array2<f64>) -> Result<PatchGrid> {
        if patches.dim() != self.patches.dim() {
            return Err(Error::Dimension(format!(
                "expected {:?} patch matrix, got {:?}",
                self.patches.dim(),
                patches.dim()
            )));
        }
        Ok(PatchGrid {
            patches,
            ..self.clone()
        })
    }
}

pub fn extract_patches(image: &Image, patch_side: usize) -> Result<PatchGrid> {
    let shape = GridShape::for_image(image.height(), image.width(), patch_side)?;
    let padded = reflect_pad(&image.pixels, shape.pad_bottom(), shape.pad_right());
    let flat = padded.as_standard_layout();
    let flat = flat.as_slice().unwrap();
    let data: Vec<f64> = shape
        .patch_to_pixel_index()
        .into_iter()
        .map(|i| flat[i])
        .collect();
    let patches = Array2::from_shape_vec((shape.count(), shape.n()), data).unwrap();
    Ok(PatchGrid {
        patch_side,
        rows: shape.rows,
        cols: shape.cols,
        height: shape.height,
        width: shape.width,
        pad_bottom: shape.pad_bottom(),
        pad_right: shape.pad_right(),
        patches,
    })
}

/// Splices patches back into the padded image without cropping.
pub fn splice_padded(grid: &PatchGrid) -> Result<Array2<f64>> {
    let shape = grid.shape();
    if grid.patches.nrows() != shape.count() || grid.patches.ncols() != shape.n() {
        return Err(Error::Dimension(format!(
            "grid is {}x{} patches of {} pixels but holds a {:?} matrix",
            shape.rows,
            shape.cols,
            shape.n(),
            grid.patches.dim()
        )));
    }
    let src = grid.patches.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut out = Array2::zeros((shape.padded_height(), shape.padded_width()));
    let dst = out.as_slice_mut().unwrap();
    for (k, p) in shape.patch_to_pixel_index().into_iter().enumerate() {
        dst[p] = src[k];
    }
    Ok(out)
}

pub fn splice_patches(grid: &PatchGrid) -> Result<Image> {
    let padded = splice_padded(grid)?;
    Ok(Image::new(
        "",
        padded.slice(s![..grid.height, ..grid.width]).to_owned(),
    ))
}

/// Converts a decoded image to [0,1] grayscale. Integer samples are divided by
/// their type's maximum; color uses BT.601 luma weights.
pub fn to_grayscale(img: &image::DynamicImage) -> Array2<f64> {
    use image::DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        D::ImageLuma8(b) => Array2::from_shape_fn((h, w), |(r, c)| {
            b.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
        }),
        D::ImageLuma16(b) => Array2::from_shape_fn((h, w), |(r, c)| {
            b.get_pixel(c as u32, r as u32)[0] as f64 / 65535.0
        }),
        D::ImageLumaA8(_) | D::ImageLumaA16(_) => {
            let b = img.to_luma32f();
            Array2::from_shape_fn((h, w), |(r, c)| b.get_pixel(c as u32, r as u32)[0] as f64)
        }
        _ => {
            let b = img.to_rgb32f();
            Array2::from_shape_fn((h, w), |(r, c)| {
                let p = b.get_pixel(c as u32, r as u32);
                LUMA_601
                    .iter()
                    .zip(p.0.iter())
                    .map(|(wt, &v)| wt * v as f64)
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
        }
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Image::new(name, to_grayscale(&img)))
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "bmp" | "pgm" | "pnm" | "ppm")
    )
}

/// Image files under `root`, recursively, in sorted path order.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image_file(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every image under `root` and splits them into groups sized by
/// `fractions` after a seeded shuffle.
pub fn load_dataset(root: &Path, fractions: &[f64], seed: u64) -> Result<Vec<Vec<Image>>> {
    if !root.exists() {
        return Err(Error::Config(format!(
            "dataset path {} does not exist",
            root.display()
        )));
    }
    let paths = if root.is_dir() {
        list_images(root)?
    } else {
        vec![root.to_path_buf()]
    };
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no PNG/BMP/PGM images found under {}",
            root.display()
        )));
    }
    let images = paths
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>>>()?;
    split_images(images, fractions, seed)
}

/// Seeded shuffle followed by a split at rounded cumulative fractions.
pub fn split_images(mut images: Vec<Image>, fractions: &[f64], seed: u64) -> Result<Vec<Vec<Image>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.shuffle(&mut rng);
    let count = images.len();
    let mut bounds = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    for f in fractions {
        cum += f;
        bounds.push(((cum * count as f64).round() as usize).min(count));
    }
    *bounds.last_mut().unwrap() = count;
    let mut groups = Vec::with_capacity(fractions.len());
    let mut iter = images.into_iter();
    let mut start = 0;
    for end in bounds {
        let end = end.max(start);
        groups.push(iter.by_ref().take(end - start).collect());
        start = end;
    }
    Ok(groups)
}

/// Procedural piecewise-smooth grayscale scenes: a shaded background with
/// overlapping disks, boxes and a stripe texture.
pub fn synthetic_images(count: usize, height: usize, width: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let (h, w) = (height as f64, width as f64);
            let base = rng.random_range(0.2..0.6);
            let gy = rng.random_range(-0.3..0.3);
            let gx = rng.random_range(-0.3..0.3);
            let mut px = Array2::from_shape_fn((height, width), |(r, c)| {
                base + gy * r as f64 / h + gx * c as f64 / w
            });
            for _ in 0..rng.random_range(2..5) {
                let cy = rng.random_range(0.0..h);
                let cx = rng.random_range(0.0..w);
                let rad = rng.random_range(0.1..0.35) * h.min(w);
                let level = rng.random_range(0.0..1.0);
                px.indexed_iter_mut().for_each(|((r, c), v)| {
                    let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                    if d < rad {
                        *v = 0.4 * *v + 0.6 * level;
                    }
                });
            }
            for _ in 0..rng.random_range(1..3) {
                let top = rng.random_range(0..height);
                let left = rng.random_range(0..width);
                let bh = rng.random_range(height / 8..height / 2 + 1);
                let bw = rng.random_range(width / 8..width / 2 + 1);
                let level = rng.random_range(0.0..1.0);
                px.slice_mut(s![top..(top + bh).min(height), left..(left + bw).min(width)])
                    .fill(level);
            }
            let freq = rng.random_range(0.15..0.5);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let amp = rng.random_range(0.02..0.08);
            px.indexed_iter_mut().for_each(|((r, c), v)| {
                let t = freq * (r as f64 * angle.sin() + c as f64 * angle.cos());
                *v = (*v + amp * t.sin()).clamp(0.0, 1.0);
            });
            Image::new(format!("synthetic_{k:03}"), px)
        })
        .collect()
}
