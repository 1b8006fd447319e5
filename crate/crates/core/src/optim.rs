//! Adam with the canonical defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).

use std::collections::BTreeMap;

use ndarray::Zip;

use crate::autograd::Tensor;
use crate::error::{dim_err, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub lr: f64,
    /// Number of updates taken so far.
    pub step: u64,
    /// First and second moment estimates by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the step counter. Call once per optimizer step, before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected update of one parameter in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return dim_err(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                param.shape()
            ));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.raw_dim()), Tensor::zeros(param.raw_dim())));
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.lr;
        Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + EPS);
            });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(0.01);
        let mut p = ArrayD::from_elem(IxDyn(&[3]), 1.0);
        let g = ArrayD::from_shape_vec(IxDyn(&[3]), vec![2.0, -0.5, 0.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &g).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = ArrayD::from_elem(IxDyn(&[2]), 3.0);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            opt.begin_step();
            opt.update("p", &mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut opt = Adam::new(0.0);
        let mut p = ArrayD::from_elem(IxDyn(&[2]), 0.5);
        opt.begin_step();
        opt.update("p", &mut p, &ArrayD::from_elem(IxDyn(&[2]), 7.0)).unwrap();
        assert_eq!(p, ArrayD::from_elem(IxDyn(&[2]), 0.5));
        assert!(opt.update("p", &mut p, &ArrayD::zeros(IxDyn(&[3]))).is_err());
    }
}
