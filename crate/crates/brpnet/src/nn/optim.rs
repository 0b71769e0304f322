//! Adam with decoupled weight decay.

use super::param::ParamRef;
use super::tensor::{Elem, Tensor};

pub struct AdamW<T: Elem> {
    params: Vec<ParamRef<T>>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Elem> AdamW<T> {
    pub fn new(params: Vec<ParamRef<T>>, weight_decay: f64) -> Self {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.borrow().value.shape()))
            .collect();
        let v = params
            .iter()
            .map(|p| Tensor::zeros(p.borrow().value.shape()))
            .collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.borrow_mut().grad.fill(T::ZERO);
        }
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let mut p = p.borrow_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.value.numel() {
                let g = p.grad.data()[j].to_f64();
                let mj = self.beta1 * m[j].to_f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j].to_f64() + (1.0 - self.beta2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let w = p.value.data()[j].to_f64();
                p.value.data_mut()[j] = T::from_f64(w - lr * update - lr * self.weight_decay * w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::param;

    #[test]
    fn adamw_descends_a_quadratic() {
        // Minimize (w - 3)^2 by feeding its gradient.
        let p = param(Tensor::from_vec(&[1], vec![0.0f64]));
        let mut opt = AdamW::new(vec![p.clone()], 0.0);
        for _ in 0..2000 {
            let w = p.borrow().value.data()[0];
            p.borrow_mut().grad.data_mut()[0] = 2.0 * (w - 3.0);
            opt.step(0.05);
            opt.zero_grad();
        }
        let w = p.borrow().value.data()[0];
        assert!((w - 3.0).abs() < 1e-3, "got {w}");
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let p = param(Tensor::from_vec(&[1], vec![1.0f64]));
        let mut opt = AdamW::new(vec![p.clone()], 0.1);
        opt.step(0.1);
        let w = p.borrow().value.data()[0];
        assert!(w < 1.0 && w > 0.98, "got {w}");
    }
}
