//! Convolutional sub-network shared by the learned proximal step and the
//! high-frequency complement block.
//!
//! Layout is `[batch, channels, height, width]`. Convolutions are 3×3,
//! stride 1, with one pixel of reflection padding so the spatial size is
//! preserved and no artificial edges are introduced at patch borders.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView3, ArrayViewMut3, Axis, Ix4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::reflect_index;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch statistics of one normalization layer: biased variance and the
/// number of samples per channel.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

fn reflect_table(len: usize) -> [Vec<usize>; 3] {
    std::array::from_fn(|k| {
        (0..len)
            .map(|i| reflect_index(i as isize + k as isize - 1, len))
            .collect()
    })
}

/// `[cin·9, h·w]` patch matrix with reflection at the borders.
fn im2col(x: ArrayView3<'_, f64>, rows: &[Vec<usize>; 3], cols: &[Vec<usize>; 3]) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut out = Array2::zeros((cin * 9, h * w));
    for ci in 0..cin {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = out.row_mut(ci * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().unwrap();
                for y in 0..h {
                    let sy = rows[ky][y];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        *d = plane[[sy, cols[kx][xx]]];
                    }
                }
            }
        }
    }
    out
}

fn col2im_add(
    cols_grad: &Array2<f64>,
    mut gx: ArrayViewMut3<'_, f64>,
    rows: &[Vec<usize>; 3],
    cols: &[Vec<usize>; 3],
) {
    let (cin, h, w) = gx.dim();
    for ci in 0..cin {
        let mut plane = gx.index_axis_mut(Axis(0), ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols_grad.row(ci * 9 + ky * 3 + kx);
                let row = row.as_slice().unwrap();
                for y in 0..h {
                    let sy = rows[ky][y];
                    for xx in 0..w {
                        plane[[sy, cols[kx][xx]]] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, reflection padding. `weight` is
/// `[cout, cin, 3, 3]`, `bias` is `[cout]`.
pub fn conv3x3<'t>(x: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Var<'t> {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let (b, cin, h, w) = xv.dim();
    let cout = weight.shape()[0];
    assert_eq!(weight.shape(), &[cout, cin, 3, 3], "conv weight shape");
    assert!(h >= 2 && w >= 2, "reflection padding needs at least 2x2 inputs");
    let w2 = weight
        .value()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cout, cin * 9))
        .unwrap();
    let bias_v = bias.value().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let rows = Rc::new(reflect_table(h));
    let cols = Rc::new(reflect_table(w));
    let mut out = ArrayD::zeros(IxDyn(&[b, cout, h, w]));
    {
        let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        for bi in 0..b {
            let colm = im2col(xv.index_axis(Axis(0), bi), &rows, &cols);
            let mut ob = out4.index_axis_mut(Axis(0), bi);
            let mut ob2 = ob.view_mut().into_shape_with_order((cout, h * w)).unwrap();
            for (mut r, &bv) in ob2.rows_mut().into_iter().zip(bias_v.iter()) {
                r.fill(bv);
            }
            general_mat_mul(1.0, &w2, &colm, 1.0, &mut ob2);
        }
    }
    let xin = x.shared_value();
    let w2 = Rc::new(w2);
    x.tape().record(out, &[x, weight, bias], move |g, need| {
        let xv = xin.view().into_dimensionality::<Ix4>().unwrap();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut gx = need[0].then(|| ArrayD::zeros(IxDyn(&[b, cin, h, w])));
        let mut gw = Array2::<f64>::zeros((cout, cin * 9));
        for bi in 0..b {
            let gb = g4.index_axis(Axis(0), bi);
            let gb = gb.as_standard_layout();
            let gb2 = gb.view().into_shape_with_order((cout, h * w)).unwrap();
            if need[1] {
                let colm = im2col(xv.index_axis(Axis(0), bi), &rows, &cols);
                general_mat_mul(1.0, &gb2, &colm.t(), 1.0, &mut gw);
            }
            if let Some(gx) = gx.as_mut() {
                let gcols = w2.t().dot(&gb2);
                let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                col2im_add(&gcols, gx4.index_axis_mut(Axis(0), bi), &rows, &cols);
            }
        }
        let gbias = need[2].then(|| {
            g4.sum_axis(Axis(3))
                .sum_axis(Axis(2))
                .sum_axis(Axis(0))
                .into_dyn()
        });
        vec![
            gx,
            need[1].then(|| gw.into_shape_with_order(IxDyn(&[cout, cin, 3, 3])).unwrap()),
            gbias,
        ]
    })
}

/// Per-channel normalization over batch and spatial axes.
pub fn batch_norm<'t>(
    x: &Var<'t>,
    gamma: &Var<'t>,
    beta: &Var<'t>,
    running: Option<(&Tensor, &Tensor)>,
) -> (Var<'t>, Option<BnStats>) {
    let xv = x.value().view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = xv.dim();
    let count = b * h * w;
    let gam = gamma.value().iter().copied().collect::<Vec<_>>();
    let bet = beta.value().iter().copied().collect::<Vec<_>>();
    let (mean, var, stats) = match running {
        Some((rm, rv)) => (
            rm.iter().copied().collect::<Vec<_>>(),
            rv.iter().copied().collect::<Vec<_>>(),
            None,
        ),
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let lane = xv.index_axis(Axis(1), ch);
                let mu = lane.sum() / count as f64;
                mean[ch] = mu;
                var[ch] = lane.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / count as f64;
            }
            let stats = BnStats {
                mean: Array1::from(mean.clone()),
                var: Array1::from(var.clone()),
                count,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = xv.to_owned();
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - mu) * is);
    }
    let mut out = xhat.clone();
    for ch in 0..c {
        let (g, bb) = (gam[ch], bet[ch]);
        out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + bb);
    }
    let training = running.is_none();
    let y = x.tape().record(out.into_dyn(), &[x, gamma, beta], move |g, need| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut ggam = Array1::zeros(c);
        let mut gbet = Array1::zeros(c);
        let mut gx = need[0].then(|| ndarray::Array4::<f64>::zeros((b, c, h, w)));
        for ch in 0..c {
            let gl = g4.index_axis(Axis(1), ch);
            let xl = xhat.index_axis(Axis(1), ch);
            let sum_g = gl.sum();
            let sum_gx = ndarray::Zip::from(&gl)
                .and(&xl)
                .fold(0.0, |acc, &a, &bv| acc + a * bv);
            ggam[ch] = sum_gx;
            gbet[ch] = sum_g;
            if let Some(gx) = gx.as_mut() {
                let scale = gam[ch] * inv_std[ch];
                let mut dst = gx.index_axis_mut(Axis(1), ch);
                if training {
                    let m = count as f64;
                    ndarray::Zip::from(&mut dst).and(&gl).and(&xl).for_each(|d, &gv, &xh| {
                        *d = scale * (gv - sum_g / m - xh * sum_gx / m);
                    });
                } else {
                    ndarray::Zip::from(&mut dst).and(&gl).for_each(|d, &gv| *d = scale * gv);
                }
            }
        }
        vec![
            gx.map(|a| a.into_dyn()),
            need[1].then(|| ggam.into_dyn()),
            need[2].then(|| gbet.into_dyn()),
        ]
    });
    (y, stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: T,
    pub beta: T,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// conv → BN → ReLU → conv, plus the identity skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv_a: Conv<T>,
    pub bn: BatchNorm<T>,
    pub conv_b: Conv<T>,
}

/// Feature extraction (conv1, bn1, ReLU), enhancement (res1, ReLU, res2) and
/// aggregation (bn2, ReLU, conv2), wrapped in a global skip connection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxNet<T> {
    pub conv1: Conv<T>,
    pub bn1: BatchNorm<T>,
    pub res1: ResBlock<T>,
    pub res2: ResBlock<T>,
    pub bn2: BatchNorm<T>,
    pub conv2: Conv<T>,
}

pub type ProxNetParams = ProxNet<Tensor>;

impl<T> Conv<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> BatchNorm<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn visit_state<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BatchNorm<U> {
        BatchNorm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    /// Exponential moving average with unbiased batch variance.
    pub fn absorb(&mut self, stats: &BnStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let mom = BN_MOMENTUM;
        ndarray::Zip::from(&mut self.running_mean)
            .and(stats.mean.view().into_dyn())
            .for_each(|r, &m| *r = (1.0 - mom) * *r + mom * m);
        ndarray::Zip::from(&mut self.running_var)
            .and(stats.var.view().into_dyn())
            .for_each(|r, &v| *r = (1.0 - mom) * *r + mom * v * unbias);
    }
}

impl<'t> BatchNorm<Var<'t>> {
    fn forward(&self, x: &Var<'t>, mode: BnMode, stats: &mut Vec<BnStats>) -> Var<'t> {
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval => Some((&self.running_mean, &self.running_var)),
        };
        let (y, s) = batch_norm(x, &self.gamma, &self.beta, running);
        stats.extend(s);
        y
    }
}

impl<T> ResBlock<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.conv_a.visit(&format!("{prefix}.conv_a"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
        self.conv_b.visit(&format!("{prefix}.conv_b"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.conv_a.visit_mut(&format!("{prefix}.conv_a"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
        self.conv_b.visit_mut(&format!("{prefix}.conv_b"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ResBlock<U> {
        ResBlock {
            conv_a: self.conv_a.map(f),
            bn: self.bn.map(f),
            conv_b: self.conv_b.map(f),
        }
    }
}

impl<T> ProxNet<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.res1.visit(&format!("{prefix}.res1"), f);
        self.res2.visit(&format!("{prefix}.res2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        self.res1.visit_mut(&format!("{prefix}.res1"), f);
        self.res2.visit_mut(&format!("{prefix}.res2"), f);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ProxNet<U> {
        ProxNet {
            conv1: self.conv1.map(f),
            bn1: self.bn1.map(f),
            res1: self.res1.map(f),
            res2: self.res2.map(f),
            bn2: self.bn2.map(f),
            conv2: self.conv2.map(f),
        }
    }

    /// Normalization layers in forward order.
    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm<T>; 4] {
        [
            &mut self.bn1,
            &mut self.res1.bn,
            &mut self.res2.bn,
            &mut self.bn2,
        ]
    }

    pub fn visit_state<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.bn1.visit_state(&format!("{prefix}.bn1"), f);
        self.res1.bn.visit_state(&format!("{prefix}.res1.bn"), f);
        self.res2.bn.visit_state(&format!("{prefix}.res2.bn"), f);
        self.bn2.visit_state(&format!("{prefix}.bn2"), f);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn1.visit_state_mut(&format!("{prefix}.bn1"), f);
        self.res1.bn.visit_state_mut(&format!("{prefix}.res1.bn"), f);
        self.res2.bn.visit_state_mut(&format!("{prefix}.res2.bn"), f);
        self.bn2.visit_state_mut(&format!("{prefix}.bn2"), f);
    }
}

fn conv_init(rng: &mut impl Rng, cout: usize, cin: usize, gain: f64) -> Conv<Tensor> {
    let std = gain * (2.0 / (cin * 9) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Conv {
        weight: ArrayD::from_shape_fn(IxDyn(&[cout, cin, 3, 3]), |_| normal.sample(rng)),
        bias: ArrayD::zeros(IxDyn(&[cout])),
    }
}

fn bn_init(c: usize) -> BatchNorm<Tensor> {
    BatchNorm {
        gamma: ArrayD::ones(IxDyn(&[c])),
        beta: ArrayD::zeros(IxDyn(&[c])),
        running_mean: ArrayD::zeros(IxDyn(&[c])),
        running_var: ArrayD::ones(IxDyn(&[c])),
    }
}

impl ProxNet<Tensor> {
    /// He-normal convolutions; the output convolution is scaled down so the
    /// network starts close to the identity map.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        ProxNet {
            conv1: conv_init(rng, channels, 1, 1.0),
            bn1: bn_init(channels),
            res1: ResBlock {
                conv_a: conv_init(rng, channels, channels, 1.0),
                bn: bn_init(channels),
                conv_b: conv_init(rng, channels, channels, 1.0),
            },
            res2: ResBlock {
                conv_a: conv_init(rng, channels, channels, 1.0),
                bn: bn_init(channels),
                conv_b: conv_init(rng, channels, channels, 1.0),
            },
            bn2: bn_init(channels),
            conv2: conv_init(rng, 1, channels, 0.1),
        }
    }

    /// Every learnable tensor zero; the network is then the identity.
    pub fn zeros(channels: usize) -> Self {
        let mut net = Self::init(channels, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        net.visit_mut("", &mut |_, t| t.fill(0.0));
        net
    }

    pub fn channels(&self) -> usize {
        self.conv1.weight.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ProxNet<Var<'t>> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

impl<'t> ResBlock<Var<'t>> {
    fn forward(&self, x: &Var<'t>, mode: BnMode, stats: &mut Vec<BnStats>) -> Var<'t> {
        let h = conv3x3(x, &self.conv_a.weight, &self.conv_a.bias);
        let h = self.bn.forward(&h, mode, stats).relu();
        let h = conv3x3(&h, &self.conv_b.weight, &self.conv_b.bias);
        x.add(&h)
    }
}

impl<'t> ProxNet<Var<'t>> {
    /// `x + f(x)` for a `[B, 1, H, W]` input.
    pub fn forward(&self, x: &Var<'t>, mode: BnMode, stats: &mut Vec<BnStats>) -> Var<'t> {
        let h = conv3x3(x, &self.conv1.weight, &self.conv1.bias);
        let h = self.bn1.forward(&h, mode, stats).relu();
        let h = self.res1.forward(&h, mode, stats).relu();
        let h = self.res2.forward(&h, mode, stats);
        let h = self.bn2.forward(&h, mode, stats).relu();
        let h = conv3x3(&h, &self.conv2.weight, &self.conv2.bias);
        x.add(&h)
    }
}

/// Side of the square patch for vectors of length `n`.
pub fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || side < 2 {
        return Err(Error::Config(format!(
            "vector length {n} is not a square of side >= 2"
        )));
    }
    Ok(side)
}

/// Applies the network to a batch of `n`-vectors (rows), each reshaped to
/// `√n × √n`, using the stored normalization statistics.
pub fn prox_apply(params: &ProxNetParams, v: ndarray::ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (b, n) = v.dim();
    let side = square_side(n)?;
    let tape = Tape::no_grad();
    let net = params.bind(&tape);
    let x = tape
        .constant(v.to_owned().into_dyn())
        .reshape(&[b, 1, side, side]);
    let out = net.forward(&x, BnMode::Eval, &mut Vec::new());
    Ok(out
        .value()
        .clone()
        .into_shape_with_order((b, n))
        .unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct definition of the reflect-padded convolution.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let s = x.shape();
        let (bn, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let cout = w.shape()[0];
        ArrayD::from_shape_fn(IxDyn(&[bn, cout, h, wd]), |idx| {
            let (bi, co, y, xx) = (idx[0], idx[1], idx[2], idx[3]);
            let mut acc = b[[co]];
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = reflect_index(y as isize + ky as isize - 1, h);
                        let sx = reflect_index(xx as isize + kx as isize - 1, wd);
                        acc += w[[co, ci, ky, kx]] * x[[bi, ci, sy, sx]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let w = random(&[2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let tape = Tape::no_grad();
        let out = conv3x3(&tape.constant(x.clone()), &tape.constant(w.clone()), &tape.constant(b.clone()));
        let expected = conv_oracle(&x, &w, &b);
        assert!(out.value().iter().zip(expected.iter()).all(|(a, e)| (a - e).abs() < 1e-12));
    }

    #[test]
    fn center_tap_kernel_on_2x2_input() {
        // Kernel with only the center tap set to 2 and bias 0.5 acts as 2x + 0.5;
        // a right-neighbour tap picks up the reflected column at the border.
        let tape = Tape::no_grad();
        let x = tape.constant(ndarray::array![[1.0, 2.0], [3.0, 4.0]].into_shape_with_order(IxDyn(&[1, 1, 2, 2])).unwrap());
        let mut w = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 1, 1]] = 2.0;
        w[[0, 0, 1, 2]] = 1.0;
        let out = conv3x3(&x, &tape.constant(w), &tape.constant(ndarray::arr1(&[0.5]).into_dyn()));
        // (0,0): 2·1 + x(0,1)=2 → 4.5 ; (0,1): 2·2 + reflect x(0,0)=1 → 5.5
        let expected = [4.5, 5.5, 10.5, 11.5];
        assert_eq!(out.value().iter().copied().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn conv_and_bn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random(&[2, 2, 4, 3], &mut rng);
        let w0 = random(&[3, 2, 3, 3], &mut rng);
        let b0 = random(&[3], &mut rng);
        let g0 = random(&[3], &mut rng);
        let bt0 = random(&[3], &mut rng);
        let loss = |x: &Tensor, w: &Tensor, g: &Tensor, train: bool| {
            let tape = Tape::new();
            let (xv, wv, bv, gv, btv) = (
                tape.param(x.clone()),
                tape.param(w.clone()),
                tape.param(b0.clone()),
                tape.param(g.clone()),
                tape.param(bt0.clone()),
            );
            let h = conv3x3(&xv, &wv, &bv);
            let rm = ArrayD::from_elem(IxDyn(&[3]), 0.1);
            let rv = ArrayD::from_elem(IxDyn(&[3]), 1.3);
            let (h, _) = batch_norm(&h, &gv, &btv, (!train).then_some((&rm, &rv)));
            let out = h.square().mul(&tape.constant(random(&[2, 3, 4, 3], &mut ChaCha8Rng::seed_from_u64(9)))).sum();
            let grads = tape.backward(&out);
            (out.item(), grads.wrt(&xv), grads.wrt(&wv), grads.wrt(&gv))
        };
        for train in [true, false] {
            let (_, gx, gw, gg) = loss(&x0, &w0, &g0, train);
            let h = 1e-6;
            for (analytic, which) in [(&gx, 0), (&gw, 1), (&gg, 2)] {
                let base = [&x0, &w0, &g0][which];
                for i in (0..base.len()).step_by(5) {
                    let mut p = base.clone();
                    let mut m = base.clone();
                    p.as_slice_mut().unwrap()[i] += h;
                    m.as_slice_mut().unwrap()[i] -= h;
                    let eval = |t: &Tensor| match which {
                        0 => loss(t, &w0, &g0, train).0,
                        1 => loss(&x0, t, &g0, train).0,
                        _ => loss(&x0, &w0, t, train).0,
                    };
                    let numeric = (eval(&p) - eval(&m)) / (2.0 * h);
                    let a = analytic.as_slice().unwrap()[i];
                    assert!((a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()), "train={train} which={which} i={i}: {a} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn zero_network_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_fn((3, 16), |_| rng.random::<f64>());
        let out = prox_apply(&ProxNet::zeros(4), v.view()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ProxNet::init(4, &mut rng);
        let v = Array2::from_shape_fn((3, 16), |_| rng.random::<f64>());
        let batched = prox_apply(&net, v.view()).unwrap();
        for i in 0..3 {
            let single = prox_apply(&net, v.slice(ndarray::s![i..i + 1, ..])).unwrap();
            assert!((&single.row(0) - &batched.row(i)).iter().all(|d| d.abs() < 1e-13));
        }
    }

    #[test]
    fn non_square_vectors_rejected() {
        let net = ProxNet::zeros(2);
        assert!(matches!(prox_apply(&net, Array2::zeros((1, 15)).view()), Err(Error::Config(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = bn_init(1);
        bn.absorb(&BnStats {
            mean: ndarray::arr1(&[1.0]),
            var: ndarray::arr1(&[2.0]),
            count: 3,
        });
        assert!((bn.running_mean[[0]] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[[0]] - (0.9 + 0.1 * 3.0)).abs() < 1e-15);
    }
}
