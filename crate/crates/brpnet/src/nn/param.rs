//! Trainable parameters and seeded initializers.

use std::cell::RefCell;
use std::rc::Rc;

use rand::rngs::StdRng;
use rand::RngExt;

use super::tensor::{Elem, Tensor};

/// A trainable tensor plus its gradient accumulator.
#[derive(Debug)]
pub struct Param<T: Elem> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

pub type ParamRef<T> = Rc<RefCell<Param<T>>>;

/// Non-trainable state (batch-norm running statistics).
pub type TensorCell<T> = Rc<RefCell<Tensor<T>>>;

pub fn param<T: Elem>(value: Tensor<T>) -> ParamRef<T> {
    let grad = Tensor::zeros(value.shape());
    Rc::new(RefCell::new(Param { value, grad }))
}

pub fn cell<T: Elem>(value: Tensor<T>) -> TensorCell<T> {
    Rc::new(RefCell::new(value))
}

/// Standard normal via Box-Muller on the seeded stream.
fn normal(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal<T: Elem>(rng: &mut StdRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::from_f64(normal(rng) * std)).collect(),
    )
}

pub fn zeros_param<T: Elem>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones_param<T: Elem>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![T::ONE; n])
}
