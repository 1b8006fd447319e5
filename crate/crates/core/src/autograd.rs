//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to tracked [`Var`]s. Values are
//! reference counted, so a tape built with [`Tape::no_grad`] frees
//! intermediates as soon as they go out of scope and only the final values
//! survive. Node ids are allocated in creation order, which is already a
//! topological order for the backward sweep.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Computes parent gradients from the output gradient. The mask tells which
/// parents are tracked so expensive unused gradients can be skipped.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing; every `Var` it produces is a constant.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let id = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[&Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<Option<usize>> = parents.iter().map(|p| p.id).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: ids,
            backward: Some(Box::new(backward)),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some(root_id) = root.id else {
            return Gradients { grads };
        };
        grads[root_id] = Some(ArrayD::ones(root.value.raw_dim()));
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value.raw_dim()))
    }
}

#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared_value(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the gradient history.
    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: Rc::clone(&self.value),
        }
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        *self.value.iter().next().expect("empty tensor")
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let value = &*self.value + &*other.value;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.tape.record(value, &[self, other], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g, &sa)),
                need[1].then(|| sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let value = &*self.value - &*other.value;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.tape.record(value, &[self, other], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g, &sa)),
                need[1].then(|| -sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let value = &*self.value * &*other.value;
        let (a, b) = (self.shared_value(), other.shared_value());
        self.tape.record(value, &[self, other], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(&(g * &*b), a.shape())),
                need[1].then(|| sum_to_shape(&(g * &*a), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let value = &*self.value / &*other.value;
        let (a, b) = (self.shared_value(), other.shared_value());
        self.tape.record(value, &[self, other], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(&(g / &*b), a.shape())),
                need[1].then(|| {
                    let full = -(g * &*a) / &(&*b * &*b);
                    sum_to_shape(&full, b.shape())
                }),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = &*self.value * c;
        self.tape
            .record(value, &[self], move |g, _| vec![Some(g * c)])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let value = &*self.value + c;
        self.tape.record(value, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<'t> {
        let value = self.value.mapv(|v| v * v);
        let a = self.shared_value();
        self.tape
            .record(value, &[self], move |g, _| vec![Some(g * &*a * 2.0)])
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.value.mapv(|v| v.max(0.0));
        let a = self.shared_value();
        self.tape.record(value, &[self], move |g, _| {
            let mut out = g.clone();
            out.zip_mut_with(&*a, |o, &x| {
                if x <= 0.0 {
                    *o = 0.0
                }
            });
            vec![Some(out)]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        let value = self.value.mapv(softplus);
        let a = self.shared_value();
        self.tape.record(value, &[self], move |g, _| {
            let mut out = g.clone();
            out.zip_mut_with(&*a, |o, &x| *o *= sigmoid(x));
            vec![Some(out)]
        })
    }

    /// Elementwise `sign(v)·max(|v| − t, 0)`.
    pub fn soft_threshold(&self, t: f64) -> Var<'t> {
        let value = self.value.mapv(|v| v.signum() * (v.abs() - t).max(0.0));
        let a = self.shared_value();
        self.tape.record(value, &[self], move |g, _| {
            let mut out = g.clone();
            out.zip_mut_with(&*a, |o, &x| {
                if x.abs() <= t {
                    *o = 0.0
                }
            });
            vec![Some(out)]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value.sum());
        let dim = self.value.raw_dim();
        self.tape.record(value, &[self], move |g, _| {
            let s = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(dim.clone(), s))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let value = as2(&self.value).dot(&as2(&other.value)).into_dyn();
        let (a, b) = (self.shared_value(), other.shared_value());
        self.tape.record(value, &[self, other], move |g, need| {
            let g2 = as2(g);
            vec![
                need[0].then(|| g2.dot(&as2(&b).t()).into_dyn()),
                need[1].then(|| as2(&a).t().dot(&g2).into_dyn()),
            ]
        })
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var<'t> {
        let value = as2(&self.value).t().to_owned().into_dyn();
        self.tape.record(value, &[self], |g, _| {
            vec![Some(as2(g).t().to_owned().into_dyn())]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let value = self
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let orig = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _| {
            let back = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&orig))
                .unwrap();
            vec![Some(back)]
        })
    }

    /// Subtracts each row's mean from a 2-D tensor.
    pub fn center_rows(&self) -> Var<'t> {
        let value = center_rows(&self.value);
        self.tape
            .record(value, &[self], |g, _| vec![Some(center_rows(g))])
    }

    /// `out.flat[i] = self.flat[index[i]]` (standard layout). Indices may
    /// repeat; the backward pass scatter-adds.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let src = self.value.as_standard_layout();
        let flat = src.as_slice().unwrap();
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("gather: shape mismatch");
        let src_shape = self.shape().to_vec();
        self.tape.record(value, &[self], move |g, _| {
            let mut out = ArrayD::zeros(IxDyn(&src_shape));
            let dst = out.as_slice_mut().unwrap();
            let g = g.as_standard_layout();
            for (&i, &v) in index.iter().zip(g.iter()) {
                dst[i] += v;
            }
            vec![Some(out)]
        })
    }
}

pub(crate) fn center_rows(t: &Tensor) -> Tensor {
    let m = as2(t);
    let means = m.mean_axis(Axis(1)).unwrap();
    (&m - &means.insert_axis(Axis(1))).into_dyn()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn broadcast_add_mul_div_gradients() {
        let a0 = array![[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]].into_dyn();
        let b0 = array![0.5, 1.5, -2.5].into_dyn();
        let s0 = ArrayD::from_elem(IxDyn(&[]), 1.7);
        let f = |a: &Tensor, b: &Tensor, s: &Tensor| {
            let tape = Tape::new();
            let (a, b, s) = (tape.param(a.clone()), tape.param(b.clone()), tape.param(s.clone()));
            let out = a.add(&b).mul(&a).div(&s).sub(&b.scale(0.3)).square().sum();
            (out.item(), tape.backward(&out).wrt(&a), tape.backward(&out).wrt(&b), tape.backward(&out).wrt(&s))
        };
        let (_, ga, gb, gs) = f(&a0, &b0, &s0);
        let na = fd(|x| f(x, &b0, &s0).0, &a0);
        let nb = fd(|x| f(&a0, x, &s0).0, &b0);
        let ns = fd(|x| f(&a0, &b0, x).0, &s0);
        for (x, y) in ga.iter().zip(na.iter()).chain(gb.iter().zip(nb.iter())).chain(gs.iter().zip(ns.iter())) {
            assert!((x - y).abs() < 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_gather_center_gradients() {
        let a0 = array![[0.3, -1.2], [0.7, 0.1], [1.1, -0.6]].into_dyn();
        let w0 = array![[0.2, 0.9, -0.3], [-0.5, 0.4, 0.8]].into_dyn();
        let idx = Rc::new(vec![5, 0, 0, 3, 2, 4, 1, 5]);
        let f = |a: &Tensor, w: &Tensor| {
            let tape = Tape::new();
            let (a, w) = (tape.param(a.clone()), tape.param(w.clone()));
            let prod = a.matmul(&w).center_rows().softplus();
            let out = prod.gather(idx.clone(), &[2, 4]).relu().sum();
            let g = tape.backward(&out);
            (out.item(), g.wrt(&a), g.wrt(&w))
        };
        let (_, ga, gw) = f(&a0, &w0);
        let na = fd(|x| f(x, &w0).0, &a0);
        let nw = fd(|x| f(&a0, x).0, &w0);
        for (x, y) in ga.iter().zip(na.iter()).chain(gw.iter().zip(nw.iter())) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.param(array![1.0, 2.0].into_dyn());
        let out = a.detach().square().sum().add(&a.sum());
        let g = tape.backward(&out);
        assert_eq!(g.wrt(&a), array![1.0, 1.0].into_dyn());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let a = tape.param(array![1.0, 2.0].into_dyn());
        let out = a.square().sum();
        assert!(!out.is_tracked());
        assert!(tape.is_empty());
        assert_eq!(out.item(), 5.0);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
