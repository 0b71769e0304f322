//! Dynamic reverse-mode autodiff over the op set the networks need.
//!
//! Each forward op appends a node holding whatever its backward pass needs;
//! `Tape::backward` walks the nodes in reverse creation order (a topological
//! order of the dynamic graph) accumulating gradients into parent nodes and
//! parameter `.grad` buffers. With gradients disabled no nodes are recorded
//! and intermediate values die with their `Var` handles.

use std::rc::Rc;

use rayon::prelude::*;

use super::conv::{conv2d_fwd, conv2d_grad_b, conv2d_grad_w, conv2d_grad_x};
use super::param::{ParamRef, TensorCell};
use super::tensor::{Elem, Tensor};
use crate::losses::kernel;

/// Handle to a forward value, optionally attached to a tape node.
#[derive(Clone)]
pub struct Var<T: Elem> {
    pub val: Rc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Elem> Var<T> {
    /// A value outside the autodiff graph (inputs, targets).
    pub fn constant(t: Tensor<T>) -> Self {
        Var {
            val: Rc::new(t),
            id: None,
        }
    }

    pub fn scalar_value(&self) -> T {
        self.val.scalar_value()
    }
}

struct Parent<T: Elem> {
    id: Option<usize>,
    val: Rc<Tensor<T>>,
}

impl<T: Elem> Parent<T> {
    fn of(v: &Var<T>) -> Self {
        Parent {
            id: v.id,
            val: Rc::clone(&v.val),
        }
    }
}

enum Node<T: Elem> {
    ParamLeaf {
        p: ParamRef<T>,
    },
    Conv2d {
        x: Parent<T>,
        w: ParamRef<T>,
        b: Option<ParamRef<T>>,
        pad: usize,
    },
    BatchNorm {
        x: Parent<T>,
        gamma: ParamRef<T>,
        beta: ParamRef<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Parent<T>,
        out: Rc<Tensor<T>>,
    },
    Sigmoid {
        x: Parent<T>,
        out: Rc<Tensor<T>>,
    },
    MaxPool2 {
        x: Parent<T>,
        argmax: Vec<u32>,
    },
    AvgPool2 {
        x: Parent<T>,
    },
    Upsample {
        x: Parent<T>,
    },
    Add {
        a: Parent<T>,
        b: Parent<T>,
    },
    Scale {
        x: Parent<T>,
        k: T,
    },
    ConcatC {
        parts: Vec<Parent<T>>,
    },
    SumAll {
        x: Parent<T>,
    },
    WeightedSum {
        parts: Vec<(Parent<T>, T)>,
    },
    StLoss {
        p: Parent<T>,
        target: Rc<Tensor<T>>,
        gamma: T,
    },
    DiceLoss {
        p: Parent<T>,
        target: Rc<Tensor<T>>,
        eps: T,
        sum_pt: f64,
        denom: f64,
    },
    FocalLoss {
        p: Parent<T>,
        target: Rc<Tensor<T>>,
        gamma_f: T,
        alpha: T,
    },
}

pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Elem> Tape<T> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, node: Node<T>, val: Tensor<T>) -> Var<T> {
        let id = self.nodes.len();
        self.nodes.push(node);
        Var {
            val: Rc::new(val),
            id: Some(id),
        }
    }

    fn emit(&mut self, val: Tensor<T>, mk: impl FnOnce() -> Node<T>, track: bool) -> Var<T> {
        if self.grad_enabled && track {
            self.push(mk(), val)
        } else {
            Var::constant(val)
        }
    }

    /// Injects a parameter tensor as a graph value (its gradient accumulates
    /// directly into the parameter). Used for gradient checks of functions
    /// of raw inputs.
    pub fn param_leaf(&mut self, p: &ParamRef<T>) -> Var<T> {
        let val = p.borrow().value.clone();
        self.emit(val, || Node::ParamLeaf { p: Rc::clone(p) }, true)
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &ParamRef<T>, b: Option<&ParamRef<T>>, pad: usize) -> Var<T> {
        let out = {
            let wp = w.borrow();
            let bias = b.map(|p| p.borrow().value.data().to_vec());
            conv2d_fwd(&x.val, &wp.value, bias.as_deref(), pad)
        };
        self.emit(
            out,
            || Node::Conv2d {
                x: Parent::of(x),
                w: Rc::clone(w),
                b: b.map(Rc::clone),
                pad,
            },
            true, // params always receive gradients
        )
    }

    /// Batch norm over the spatial extent of each channel (single-image
    /// batches). `use_batch_stats` selects the normalizing statistics
    /// (current input vs running buffers); `update_running` folds the batch
    /// statistics into the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: &Var<T>,
        gamma: &ParamRef<T>,
        beta: &ParamRef<T>,
        running_mean: &TensorCell<T>,
        running_var: &TensorCell<T>,
        momentum: f64,
        eps: f64,
        use_batch_stats: bool,
        update_running: bool,
    ) -> Var<T> {
        let (c, h, w) = x.val.dims3();
        let n = (h * w) as f64;
        let mut mean = vec![T::ZERO; c];
        let mut inv_std = vec![T::ZERO; c];
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let g = gamma.borrow();
            let bt = beta.borrow();
            let mut rm = running_mean.borrow_mut();
            let mut rv = running_var.borrow_mut();
            for ch in 0..c {
                let xs = &x.val.data()[ch * h * w..(ch + 1) * h * w];
                let (m, v) = if use_batch_stats || update_running {
                    let mut sum = 0.0f64;
                    for &xv in xs {
                        sum += xv.to_f64();
                    }
                    let m = sum / n;
                    let mut sq = 0.0f64;
                    for &xv in xs {
                        let d = xv.to_f64() - m;
                        sq += d * d;
                    }
                    let v = sq / n;
                    if update_running {
                        let rmd = rm.data_mut();
                        let rvd = rv.data_mut();
                        rmd[ch] = T::from_f64((1.0 - momentum) * rmd[ch].to_f64() + momentum * m);
                        rvd[ch] = T::from_f64((1.0 - momentum) * rvd[ch].to_f64() + momentum * v);
                    }
                    if use_batch_stats {
                        (m, v)
                    } else {
                        (rm.data()[ch].to_f64(), rv.data()[ch].to_f64())
                    }
                } else {
                    (rm.data()[ch].to_f64(), rv.data()[ch].to_f64())
                };
                let istd = 1.0 / (v + eps).sqrt();
                mean[ch] = T::from_f64(m);
                inv_std[ch] = T::from_f64(istd);
                let gm = g.value.data()[ch];
                let bv = bt.value.data()[ch];
                let ys = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
                for (y, &xv) in ys.iter_mut().zip(xs) {
                    *y = gm * ((xv - mean[ch]) * inv_std[ch]) + bv;
                }
            }
        }
        self.emit(
            out,
            || Node::BatchNorm {
                x: Parent::of(x),
                gamma: Rc::clone(gamma),
                beta: Rc::clone(beta),
                mean,
                inv_std,
                train: use_batch_stats,
            },
            true,
        )
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        let out = Tensor::from_vec(
            x.val.shape(),
            x.val.data().iter().map(|&v| v.maxv(T::ZERO)).collect(),
        );
        if self.grad_enabled && x.id.is_some() {
            let rc = Rc::new(out);
            let id = self.nodes.len();
            self.nodes.push(Node::Relu {
                x: Parent::of(x),
                out: Rc::clone(&rc),
            });
            Var { val: rc, id: Some(id) }
        } else {
            Var::constant(out)
        }
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Var<T> {
        let out = Tensor::from_vec(
            x.val.shape(),
            x.val
                .data()
                .iter()
                .map(|&v| T::ONE / (T::ONE + (-v).exp()))
                .collect(),
        );
        if self.grad_enabled && x.id.is_some() {
            let rc = Rc::new(out);
            let id = self.nodes.len();
            self.nodes.push(Node::Sigmoid {
                x: Parent::of(x),
                out: Rc::clone(&rc),
            });
            Var { val: rc, id: Some(id) }
        } else {
            Var::constant(out)
        }
    }

    /// 2x2 max pooling, stride 2. Requires even spatial dims.
    pub fn max_pool2(&mut self, x: &Var<T>) -> Var<T> {
        let (c, h, w) = x.val.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            let xs = &x.val.data()[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = (2 * oy) * w + 2 * ox;
                    let mut best = xs[best_i];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                    out.data_mut()[(ch * oh + oy) * ow + ox] = best;
                    argmax[(ch * oh + oy) * ow + ox] = (ch * h * w + best_i) as u32;
                }
            }
        }
        self.emit(
            out,
            || Node::MaxPool2 {
                x: Parent::of(x),
                argmax,
            },
            x.id.is_some(),
        )
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, x: &Var<T>) -> Var<T> {
        let (c, h, w) = x.val.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            let xs = &x.val.data()[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = (2 * oy) * w + 2 * ox;
                    let s = xs[i] + xs[i + 1] + xs[i + w] + xs[i + w + 1];
                    out.data_mut()[(ch * oh + oy) * ow + ox] = s * quarter;
                }
            }
        }
        self.emit(out, || Node::AvgPool2 { x: Parent::of(x) }, x.id.is_some())
    }

    /// Bilinear upsample to (out_h, out_w), half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: &Var<T>, out_h: usize, out_w: usize) -> Var<T> {
        let (c, h, w) = x.val.dims3();
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        let taps_r = bilinear_taps(h, out_h);
        let taps_c = bilinear_taps(w, out_w);
        let x_data: &[T] = x.val.data();
        out.data_mut()
            .par_chunks_mut(out_h * out_w)
            .enumerate()
            .for_each(|(ch, plane)| {
                let xs = &x_data[ch * h * w..(ch + 1) * h * w];
                for (r, &(r0, r1, ar)) in taps_r.iter().enumerate() {
                    for (cc, &(c0, c1, ac)) in taps_c.iter().enumerate() {
                        let ar = T::from_f64(ar);
                        let ac = T::from_f64(ac);
                        let top = xs[r0 * w + c0] * (T::ONE - ac) + xs[r0 * w + c1] * ac;
                        let bot = xs[r1 * w + c0] * (T::ONE - ac) + xs[r1 * w + c1] * ac;
                        plane[r * out_w + cc] = top * (T::ONE - ar) + bot * ar;
                    }
                }
            });
        self.emit(out, || Node::Upsample { x: Parent::of(x) }, x.id.is_some())
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.val.shape(), b.val.shape(), "add shape mismatch");
        let mut out = (*a.val).clone();
        out.add_assign(&b.val);
        self.emit(
            out,
            || Node::Add {
                a: Parent::of(a),
                b: Parent::of(b),
            },
            a.id.is_some() || b.id.is_some(),
        )
    }

    pub fn scale(&mut self, x: &Var<T>, k: T) -> Var<T> {
        let out = Tensor::from_vec(x.val.shape(), x.val.data().iter().map(|&v| v * k).collect());
        self.emit(out, || Node::Scale { x: Parent::of(x), k }, x.id.is_some())
    }

    /// Channel concatenation of rank-3 tensors with equal spatial dims.
    pub fn concat_c(&mut self, parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let (_, h, w) = parts[0].val.dims3();
        let total_c: usize = parts
            .iter()
            .map(|p| {
                let (c, ph, pw) = p.val.dims3();
                assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
                c
            })
            .sum();
        let mut out = Tensor::zeros(&[total_c, h, w]);
        let mut off = 0usize;
        for p in parts {
            let n = p.val.numel();
            out.data_mut()[off..off + n].copy_from_slice(p.val.data());
            off += n;
        }
        self.emit(
            out,
            || Node::ConcatC {
                parts: parts.iter().map(|p| Parent::of(p)).collect(),
            },
            parts.iter().any(|p| p.id.is_some()),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: &Var<T>) -> Var<T> {
        let mut acc = 0.0f64;
        for &v in x.val.data() {
            acc += v.to_f64();
        }
        self.emit(
            Tensor::scalar(T::from_f64(acc)),
            || Node::SumAll { x: Parent::of(x) },
            x.id.is_some(),
        )
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(&mut self, parts: &[(Var<T>, T)]) -> Var<T> {
        let mut acc = T::ZERO;
        for (v, w) in parts {
            acc += v.scalar_value() * *w;
        }
        self.emit(
            Tensor::scalar(acc),
            || Node::WeightedSum {
                parts: parts.iter().map(|(v, w)| (Parent::of(v), *w)).collect(),
            },
            parts.iter().any(|(v, _)| v.id.is_some()),
        )
    }

    /// Smooth truncated loss (pixel mean) of probabilities against a binary target.
    pub fn st_loss(&mut self, p: &Var<T>, target: &Rc<Tensor<T>>, gamma: T) -> Var<T> {
        assert_eq!(p.val.numel(), target.numel(), "st_loss target mismatch");
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.val.data().iter().zip(target.data()) {
            let pt = if tv > T::from_f64(0.5) { pv } else { T::ONE - pv };
            acc += kernel::st_value(pt, gamma).to_f64();
        }
        let val = acc / p.val.numel() as f64;
        self.emit(
            Tensor::scalar(T::from_f64(val)),
            || Node::StLoss {
                p: Parent::of(p),
                target: Rc::clone(target),
                gamma,
            },
            p.id.is_some(),
        )
    }

    /// Soft dice loss over the whole map.
    pub fn dice_loss(&mut self, p: &Var<T>, target: &Rc<Tensor<T>>, eps: T) -> Var<T> {
        assert_eq!(p.val.numel(), target.numel(), "dice_loss target mismatch");
        let mut sum_p = 0.0f64;
        let mut sum_t = 0.0f64;
        let mut sum_pt = 0.0f64;
        for (&pv, &tv) in p.val.data().iter().zip(target.data()) {
            sum_p += pv.to_f64();
            sum_t += tv.to_f64();
            sum_pt += (pv * tv).to_f64();
        }
        let denom = sum_p + sum_t + eps.to_f64();
        let val = 1.0 - (2.0 * sum_pt + eps.to_f64()) / denom;
        self.emit(
            Tensor::scalar(T::from_f64(val)),
            || Node::DiceLoss {
                p: Parent::of(p),
                target: Rc::clone(target),
                eps,
                sum_pt,
                denom,
            },
            p.id.is_some(),
        )
    }

    /// Focal loss (pixel mean).
    pub fn focal_loss(&mut self, p: &Var<T>, target: &Rc<Tensor<T>>, gamma_f: T, alpha: T) -> Var<T> {
        assert_eq!(p.val.numel(), target.numel(), "focal_loss target mismatch");
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.val.data().iter().zip(target.data()) {
            let pt = if tv > T::from_f64(0.5) { pv } else { T::ONE - pv };
            acc += kernel::focal_value(pt, gamma_f, alpha).to_f64();
        }
        let val = acc / p.val.numel() as f64;
        self.emit(
            Tensor::scalar(T::from_f64(val)),
            || Node::FocalLoss {
                p: Parent::of(p),
                target: Rc::clone(target),
                gamma_f,
                alpha,
            },
            p.id.is_some(),
        )
    }

    /// Reverse pass from a scalar root; accumulates parameter gradients.
    pub fn backward(&mut self, root: &Var<T>) {
        let root_id = root
            .id
            .expect("backward root must be tape-tracked (grad enabled)");
        assert_eq!(root.val.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(Tensor::scalar(T::ONE));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Node::ParamLeaf { p } => {
                    p.borrow_mut().grad.add_assign(&g);
                }
                Node::Conv2d { x, w, b, pad } => {
                    let ws = w.borrow().value.shape().to_vec();
                    let (c_out, k) = (ws[0], ws[2]);
                    let dw = conv2d_grad_w(&x.val, &g, c_out, k, *pad);
                    w.borrow_mut().grad.add_assign(&dw);
                    if let Some(b) = b {
                        let db = conv2d_grad_b(&g);
                        let mut bp = b.borrow_mut();
                        for (gslot, &d) in bp.grad.data_mut().iter_mut().zip(&db) {
                            *gslot += d;
                        }
                    }
                    if x.id.is_some() {
                        let dx = conv2d_grad_x(&w.borrow().value, &g, *pad);
                        accumulate(&mut grads, x.id, dx);
                    }
                }
                Node::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => {
                    let (c, h, w) = x.val.dims3();
                    let n = (h * w) as f64;
                    let mut dgamma = vec![T::ZERO; c];
                    let mut dbeta = vec![T::ZERO; c];
                    let mut dx = x.id.map(|_| Tensor::zeros(&[c, h, w]));
                    let gamma_vals = gamma.borrow().value.data().to_vec();
                    for ch in 0..c {
                        let xs = &x.val.data()[ch * h * w..(ch + 1) * h * w];
                        let gs = &g.data()[ch * h * w..(ch + 1) * h * w];
                        let (m, istd) = (mean[ch], inv_std[ch]);
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for (&gv, &xv) in gs.iter().zip(xs) {
                            let xhat = (xv - m) * istd;
                            sum_g += gv.to_f64();
                            sum_gx += (gv * xhat).to_f64();
                        }
                        dgamma[ch] = T::from_f64(sum_gx);
                        dbeta[ch] = T::from_f64(sum_g);
                        if let Some(dx) = dx.as_mut() {
                            let dxs = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
                            let gm = gamma_vals[ch];
                            if *train {
                                let mg = T::from_f64(sum_g / n);
                                let mgx = T::from_f64(sum_gx / n);
                                for ((d, &gv), &xv) in dxs.iter_mut().zip(gs).zip(xs) {
                                    let xhat = (xv - m) * istd;
                                    *d = gm * istd * (gv - mg - xhat * mgx);
                                }
                            } else {
                                for (d, &gv) in dxs.iter_mut().zip(gs) {
                                    *d = gm * istd * gv;
                                }
                            }
                        }
                    }
                    {
                        let mut gp = gamma.borrow_mut();
                        for (slot, &d) in gp.grad.data_mut().iter_mut().zip(&dgamma) {
                            *slot += d;
                        }
                        let mut bp = beta.borrow_mut();
                        for (slot, &d) in bp.grad.data_mut().iter_mut().zip(&dbeta) {
                            *slot += d;
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x.id, dx);
                    }
                }
                Node::Relu { x, out } => {
                    let dx = Tensor::from_vec(
                        out.shape(),
                        out.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&o, &gv)| if o > T::ZERO { gv } else { T::ZERO })
                            .collect(),
                    );
                    accumulate(&mut grads, x.id, dx);
                }
                Node::Sigmoid { x, out } => {
                    let dx = Tensor::from_vec(
                        out.shape(),
                        out.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&o, &gv)| gv * o * (T::ONE - o))
                            .collect(),
                    );
                    accumulate(&mut grads, x.id, dx);
                }
                Node::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(x.val.shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src as usize] += gv;
                    }
                    accumulate(&mut grads, x.id, dx);
                }
                Node::AvgPool2 { x } => {
                    let (c, h, w) = x.val.dims3();
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[(ch * oh + oy) * ow + ox] * quarter;
                                let base = ch * h * w + (2 * oy) * w + 2 * ox;
                                dx.data_mut()[base] += gv;
                                dx.data_mut()[base + 1] += gv;
                                dx.data_mut()[base + w] += gv;
                                dx.data_mut()[base + w + 1] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, x.id, dx);
                }
                Node::Upsample { x } => {
                    let (c, h, w) = x.val.dims3();
                    let (_, oh, ow) = g.dims3();
                    let taps_r = bilinear_taps(h, oh);
                    let taps_c = bilinear_taps(w, ow);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    dx.data_mut()
                        .par_chunks_mut(h * w)
                        .enumerate()
                        .for_each(|(ch, plane)| {
                            let gs = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                            for (r, &(r0, r1, ar)) in taps_r.iter().enumerate() {
                                for (cc, &(c0, c1, ac)) in taps_c.iter().enumerate() {
                                    let gv = gs[r * ow + cc];
                                    let ar_t = T::from_f64(ar);
                                    let ac_t = T::from_f64(ac);
                                    plane[r0 * w + c0] += gv * (T::ONE - ar_t) * (T::ONE - ac_t);
                                    plane[r0 * w + c1] += gv * (T::ONE - ar_t) * ac_t;
                                    plane[r1 * w + c0] += gv * ar_t * (T::ONE - ac_t);
                                    plane[r1 * w + c1] += gv * ar_t * ac_t;
                                }
                            }
                        });
                    accumulate(&mut grads, x.id, dx);
                }
                Node::Add { a, b } => {
                    if a.id.is_some() {
                        accumulate(&mut grads, a.id, g.clone());
                    }
                    if b.id.is_some() {
                        accumulate(&mut grads, b.id, g.clone());
                    }
                }
                Node::Scale { x, k } => {
                    let dx = Tensor::from_vec(g.shape(), g.data().iter().map(|&v| v * *k).collect());
                    accumulate(&mut grads, x.id, dx);
                }
                Node::ConcatC { parts } => {
                    let mut off = 0usize;
                    for p in parts {
                        let n = p.val.numel();
                        if p.id.is_some() {
                            let dx = Tensor::from_vec(p.val.shape(), g.data()[off..off + n].to_vec());
                            accumulate(&mut grads, p.id, dx);
                        }
                        off += n;
                    }
                }
                Node::SumAll { x } => {
                    let gv = g.scalar_value();
                    let n = x.val.numel();
                    let dx = Tensor::from_vec(x.val.shape(), vec![gv; n]);
                    accumulate(&mut grads, x.id, dx);
                }
                Node::WeightedSum { parts } => {
                    let gv = g.scalar_value();
                    for (p, w) in parts {
                        if p.id.is_some() {
                            accumulate(&mut grads, p.id, Tensor::scalar(gv * *w));
                        }
                    }
                }
                Node::StLoss { p, target, gamma } => {
                    let gv = g.scalar_value();
                    let n = T::from_f64(p.val.numel() as f64);
                    let dx = Tensor::from_vec(
                        p.val.shape(),
                        p.val
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(&pv, &tv)| {
                                let pos = tv > T::from_f64(0.5);
                                let pt = if pos { pv } else { T::ONE - pv };
                                let d = kernel::st_dpt(pt, *gamma);
                                let s = if pos { T::ONE } else { -T::ONE };
                                gv * d * s / n
                            })
                            .collect(),
                    );
                    accumulate(&mut grads, p.id, dx);
                }
                Node::DiceLoss {
                    p,
                    target,
                    eps,
                    sum_pt,
                    denom,
                } => {
                    let gv = g.scalar_value();
                    let num = 2.0 * sum_pt + eps.to_f64();
                    let d2 = denom * denom;
                    let dx = Tensor::from_vec(
                        p.val.shape(),
                        target
                            .data()
                            .iter()
                            .map(|&tv| {
                                let d = -(2.0 * tv.to_f64() * denom - num) / d2;
                                gv * T::from_f64(d)
                            })
                            .collect(),
                    );
                    accumulate(&mut grads, p.id, dx);
                }
                Node::FocalLoss {
                    p,
                    target,
                    gamma_f,
                    alpha,
                } => {
                    let gv = g.scalar_value();
                    let n = T::from_f64(p.val.numel() as f64);
                    let dx = Tensor::from_vec(
                        p.val.shape(),
                        p.val
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(&pv, &tv)| {
                                let pos = tv > T::from_f64(0.5);
                                let pt = if pos { pv } else { T::ONE - pv };
                                let d = kernel::focal_dpt(pt, *gamma_f, *alpha);
                                let s = if pos { T::ONE } else { -T::ONE };
                                gv * d * s / n
                            })
                            .collect(),
                    );
                    accumulate(&mut grads, p.id, dx);
                }
            }
        }
    }
}

fn accumulate<T: Elem>(grads: &mut [Option<Tensor<T>>], id: Option<usize>, g: Tensor<T>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Source taps (i0, i1, frac) for 1-D bilinear interpolation onto `out` samples.
fn bilinear_taps(src: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / out as f64;
    (0..out)
        .map(|i| {
            let f = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, f - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::param;

    #[test]
    fn relu_sigmoid_values() {
        let mut tape = Tape::<f64>::new(false);
        let x = Var::constant(Tensor::from_vec(&[1, 1, 4], vec![-1.0, 0.0, 0.5, 2.0]));
        let r = tape.relu(&x);
        assert_eq!(r.val.data(), &[0.0, 0.0, 0.5, 2.0]);
        let s = tape.sigmoid(&x);
        assert!((s.val.data()[3] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn pools_and_upsample_shapes() {
        let mut tape = Tape::<f64>::new(false);
        let x = Var::constant(Tensor::from_vec(
            &[1, 2, 4],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        ));
        let mp = tape.max_pool2(&x);
        assert_eq!(mp.val.shape(), &[1, 1, 2]);
        assert_eq!(mp.val.data(), &[6.0, 8.0]);
        let ap = tape.avg_pool2(&x);
        assert_eq!(ap.val.data(), &[3.5, 5.5]);
        let up = tape.upsample_bilinear(&ap, 2, 4);
        assert_eq!(up.val.shape(), &[1, 2, 4]);
    }

    #[test]
    fn conv_param_gets_gradient_without_tracked_input() {
        let mut tape = Tape::<f64>::new(true);
        let w = param(Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]));
        let x = Var::constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.conv2d(&x, &w, None, 0);
        let loss = tape.sum_all(&y);
        tape.backward(&loss);
        // d(sum(2x))/dw = sum(x) = 10
        assert_eq!(w.borrow().grad.data(), &[10.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x*w) + sum(x*w) should give dw = 2*sum(x).
        let mut tape = Tape::<f64>::new(true);
        let w = param(Tensor::from_vec(&[1, 1, 1, 1], vec![1.5]));
        let x = Var::constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]));
        let y = tape.conv2d(&x, &w, None, 0);
        let s1 = tape.sum_all(&y);
        let s2 = tape.sum_all(&y);
        let tot = tape.weighted_sum(&[(s1, 1.0), (s2, 1.0)]);
        tape.backward(&tot);
        assert_eq!(w.borrow().grad.data(), &[6.0]);
    }
}
