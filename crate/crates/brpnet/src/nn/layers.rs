//! Parameterized layers composed by the networks.

use rand::rngs::StdRng;

use super::param::{cell, he_normal, ones_param, param, zeros_param, ParamRef, TensorCell};
use super::tape::{Tape, Var};
use super::tensor::{Elem, Tensor};

/// Stride-1 square convolution with bias.
pub struct Conv2d<T: Elem> {
    pub w: ParamRef<T>,
    pub b: ParamRef<T>,
    pub pad: usize,
}

impl<T: Elem> Conv2d<T> {
    /// Same-padded k×k conv (pad = k/2).
    pub fn new(rng: &mut StdRng, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv2d {
            w: param(he_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k)),
            b: param(zeros_param(&[out_ch])),
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Var<T> {
        tape.conv2d(x, &self.w, Some(&self.b), self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.borrow().value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w.borrow().value.shape()[1]
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ParamRef<T>)> {
        vec![
            (format!("{prefix}.w"), self.w.clone()),
            (format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

/// Which statistics batch norm normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics + running update in training, running buffers at eval.
    Standard { train: bool },
    /// Current-input statistics always (batch-size-1 semantics); running
    /// buffers updated only when `update_running` is set.
    BatchStats { update_running: bool },
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d<T: Elem> {
    pub gamma: ParamRef<T>,
    pub beta: ParamRef<T>,
    pub running_mean: TensorCell<T>,
    pub running_var: TensorCell<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Elem> BatchNorm2d<T> {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            gamma: param(ones_param(&[ch])),
            beta: param(zeros_param(&[ch])),
            running_mean: cell(Tensor::zeros(&[ch])),
            running_var: cell(Tensor::from_vec(&[ch], vec![T::ONE; ch])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Standard semantics: batch statistics in training, running buffers at
    /// eval.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, train: bool) -> Var<T> {
        self.forward_mode(tape, x, BnMode::Standard { train })
    }

    pub fn forward_mode(&self, tape: &mut Tape<T>, x: &Var<T>, mode: BnMode) -> Var<T> {
        let (use_batch, update) = match mode {
            BnMode::Standard { train } => (train, train),
            BnMode::BatchStats { update_running } => (true, update_running),
        };
        tape.batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            use_batch,
            update,
        )
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ParamRef<T>)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }

    /// Running statistics, named for checkpoints.
    pub fn buffers(&self, prefix: &str) -> Vec<(String, TensorCell<T>)> {
        vec![
            (format!("{prefix}.running_mean"), self.running_mean.clone()),
            (format!("{prefix}.running_var"), self.running_var.clone()),
        ]
    }
}

/// BN → ReLU → 3×3 conv, the repeated unit of dense blocks and decoders.
pub struct BnReluConv<T: Elem> {
    pub bn: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
}

impl<T: Elem> BnReluConv<T> {
    pub fn new(rng: &mut StdRng, in_ch: usize, out_ch: usize, k: usize) -> Self {
        BnReluConv {
            bn: BatchNorm2d::new(in_ch),
            conv: Conv2d::new(rng, in_ch, out_ch, k),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, train: bool) -> Var<T> {
        self.forward_mode(tape, x, BnMode::Standard { train })
    }

    pub fn forward_mode(&self, tape: &mut Tape<T>, x: &Var<T>, mode: BnMode) -> Var<T> {
        let h = self.bn.forward_mode(tape, x, mode);
        let h = tape.relu(&h);
        self.conv.forward(tape, &h)
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        let mut p = self.bn.params();
        p.extend(self.conv.params());
        p
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ParamRef<T>)> {
        let mut s = self.bn.state(&format!("{prefix}.bn"));
        s.extend(self.conv.state(&format!("{prefix}.conv")));
        s
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, TensorCell<T>)> {
        self.bn.buffers(&format!("{prefix}.bn"))
    }
}

/// Dense block: `depth` BN-ReLU-conv3×3 layers, each appending `growth`
/// channels to the running concatenation.
pub struct DenseBlock<T: Elem> {
    pub layers: Vec<BnReluConv<T>>,
}

impl<T: Elem> DenseBlock<T> {
    pub fn new(rng: &mut StdRng, in_ch: usize, depth: usize, growth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| BnReluConv::new(rng, in_ch + i * growth, growth, 3))
            .collect();
        DenseBlock { layers }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, train: bool) -> Var<T> {
        self.forward_mode(tape, x, BnMode::Standard { train })
    }

    pub fn forward_mode(&self, tape: &mut Tape<T>, x: &Var<T>, mode: BnMode) -> Var<T> {
        let mut acc = x.clone();
        for layer in &self.layers {
            let y = layer.forward_mode(tape, &acc, mode);
            acc = tape.concat_c(&[&acc, &y]);
        }
        acc
    }

    pub fn out_channels(&self, in_ch: usize) -> usize {
        in_ch + self.layers.len() * self.layers.first().map_or(0, |l| l.conv.out_channels())
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ParamRef<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state(&format!("{prefix}.layer{i}")))
            .collect()
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, TensorCell<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers(&format!("{prefix}.layer{i}")))
            .collect()
    }
}

/// Transition between dense blocks: BN-ReLU-1×1 conv halving channels, then
/// 2×2 average pooling.
pub struct Transition<T: Elem> {
    pub unit: BnReluConv<T>,
}

impl<T: Elem> Transition<T> {
    pub fn new(rng: &mut StdRng, in_ch: usize) -> Self {
        Transition {
            unit: BnReluConv::new(rng, in_ch, in_ch / 2, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, train: bool) -> Var<T> {
        self.forward_mode(tape, x, BnMode::Standard { train })
    }

    pub fn forward_mode(&self, tape: &mut Tape<T>, x: &Var<T>, mode: BnMode) -> Var<T> {
        let h = self.unit.forward_mode(tape, x, mode);
        tape.avg_pool2(&h)
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        self.unit.params()
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ParamRef<T>)> {
        self.unit.state(prefix)
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, TensorCell<T>)> {
        self.unit.buffers(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dense_block_channel_arithmetic() {
        let mut rng = StdRng::seed_from_u64(0);
        let block = DenseBlock::<f32>::new(&mut rng, 8, 3, 4);
        let mut tape = Tape::new(false);
        let x = Var::constant(Tensor::zeros(&[8, 6, 6]));
        let y = block.forward(&mut tape, &x, false);
        assert_eq!(y.val.dims3(), (8 + 3 * 4, 6, 6));
        assert_eq!(block.out_channels(8), 20);
    }

    #[test]
    fn transition_halves_and_downsamples() {
        let mut rng = StdRng::seed_from_u64(0);
        let t = Transition::<f32>::new(&mut rng, 10);
        let mut tape = Tape::new(false);
        let x = Var::constant(Tensor::zeros(&[10, 8, 8]));
        let y = t.forward(&mut tape, &x, false);
        assert_eq!(y.val.dims3(), (5, 4, 4));
    }
}
