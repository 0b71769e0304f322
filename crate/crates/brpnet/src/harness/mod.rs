//! Training loops, schedule, inference, evaluation, sweeps: the machinery
//! behind the CLI.

mod ckpt;
mod config;
mod evaluate;
mod infer;
mod schedule;
mod sweep;
mod train1;
mod train2;

pub use ckpt::{load_stage1, load_stage2, save_stage1, save_stage2, Normalization};
pub use config::{Stage1Config, Stage2Config, Stage2Loss, TrainConfig};
pub use evaluate::{evaluate_dirs, format_report, write_report};
pub use infer::Pipeline;
pub use schedule::{cosine_no_restart, lr_at, Schedule};
pub use sweep::{eval_pipeline, format_table, sweep, SweepParam, SweepRow};
pub use train1::{train_stage1, EpochStats, Stage1Artifacts};
pub use train2::{train_stage2, train_stage2_opts, Stage2Artifacts};

use crate::core::{ProbabilityPair, RgbImage};
use crate::nn::Tensor;
use crate::tafe::TafeOutput;
use crate::Result;

/// HWC image to the CHW tensor the networks consume.
pub fn image_tensor(img: &RgbImage) -> Tensor<f32> {
    let (h, w) = (img.h(), img.w());
    let mut data = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let px = img.pixel(r, c);
            for ch in 0..3 {
                data[ch * h * w + r * w + c] = px[ch];
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Stage-1 main heads as a validated probability pair.
pub fn prob_pair(out: &TafeOutput) -> Result<ProbabilityPair> {
    ProbabilityPair::new(out.seg_prob.clone(), out.bnd_prob.clone())
}

/// Splitmix-style seed derivation for independent deterministic streams.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic train/val split carving `val_fraction` off the tail of the
/// stem-sorted list.
pub fn split_train_val(
    samples: Vec<crate::data::Sample>,
    val_fraction: f64,
) -> (Vec<crate::data::Sample>, Vec<crate::data::Sample>) {
    let mut samples = samples;
    samples.sort_by(|a, b| a.stem.cmp(&b.stem));
    let n_val = ((samples.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let split = samples.len() - n_val;
    let val = samples.split_off(split);
    (samples, val)
}
