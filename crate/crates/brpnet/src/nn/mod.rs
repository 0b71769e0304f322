//! Minimal CPU training stack: tensors, stride-1 convolution via im2col +
//! GEMM, a dynamic reverse-mode tape, common layers, AdamW and checkpoint IO.
//! Generic over f32 (training/inference) and f64 (finite-difference gradient
//! checks). All parallel kernels chunk by shape alone, so outputs are bitwise
//! reproducible for a fixed seed regardless of thread count.

mod conv;
pub mod gradcheck;
mod layers;
mod optim;
mod param;
mod tape;
mod tensor;

pub mod checkpoint;

pub use layers::{BatchNorm2d, BnMode, BnReluConv, Conv2d, DenseBlock, Transition};
pub use optim::AdamW;
pub use param::{cell, he_normal, ones_param, param, zeros_param, Param, ParamRef, TensorCell};
pub use tape::{Tape, Var};
pub use tensor::{Elem, Tensor};
