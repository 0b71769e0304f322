//! Stage-2 training: run the frozen stage-1 net over the training images,
//! build proposals and patches, construct labels by IoU matching against the
//! ground truth, and train the small/large refinement nets with focal (or
//! cross-entropy) loss under a no-restart cosine schedule.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::core::Grid;
use crate::data::Sample;
use crate::losses::mask_tensor;
use crate::nn::{AdamW, Tape, Tensor, Var};
use crate::patching::{extract_patch, target_side, SizeClass};
use crate::proposals::{propose, proposals_from_map};
use crate::refine::{match_proposal, RefineNet};
use crate::{Error, Result};

use super::ckpt::{load_stage1, save_stage2};
use super::config::{Stage2Loss, TrainConfig};
use super::schedule::cosine_no_restart;
use super::{image_tensor, mix_seed, prob_pair};

#[derive(Debug, Clone)]
pub struct Stage2Artifacts {
    pub small_checkpoint: PathBuf,
    pub large_checkpoint: PathBuf,
    pub n_small: usize,
    pub n_large: usize,
    pub n_matched: usize,
    pub n_unmatched: usize,
    pub loss_history_small: Vec<f64>,
    pub loss_history_large: Vec<f64>,
}

struct PatchExample {
    input: Tensor<f32>,
    label: Grid<u8>,
    class: SizeClass,
    matched: bool,
}

/// Builds the stage-2 training set from stage-1 outputs on one sample.
fn collect_examples(
    sample: &Sample,
    net: &crate::tafe::TafeNet<f32>,
    norm: &super::ckpt::Normalization,
    cfg: &TrainConfig,
) -> Result<Vec<PatchExample>> {
    let stained = norm.stain_only(&sample.image);
    let normalized = norm.zscore_only(&stained)?;
    let out = net.infer(&image_tensor(&normalized))?;
    let pp = prob_pair(&out)?;
    let proposal_map = propose(&pp, &cfg.stage1.post)?;
    let proposals = proposals_from_map(&proposal_map);
    let mut examples = Vec::with_capacity(proposals.len());
    for prop in &proposals {
        let record = extract_patch(&normalized, &pp, prop, &cfg.stage2.patch)?;
        let target = target_side(record.size_class, &cfg.stage2.patch);
        let m = match_proposal(prop, &sample.instances, cfg.stage2.tau, &record.window, target);
        examples.push(PatchExample {
            input: record.input,
            label: m.label,
            class: record.size_class,
            matched: m.matched_gt_id.is_some(),
        });
    }
    Ok(examples)
}

fn train_refine_net(
    examples: &[&PatchExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RefineNet<f32>, Vec<f64>)> {
    let net = RefineNet::<f32>::new(&cfg.stage2.refine, seed);
    let mut history = Vec::with_capacity(cfg.stage2.epochs);
    if examples.is_empty() {
        return Ok((net, history));
    }
    let (gamma, alpha) = match cfg.stage2.loss {
        Stage2Loss::Focal => (cfg.stage2.focal_gamma as f32, cfg.stage2.focal_alpha as f32),
        // Focal with gamma 0, alpha 1 is exactly cross-entropy.
        Stage2Loss::CrossEntropy => (0.0, 1.0),
    };
    let mut opt = AdamW::new(net.params(), cfg.stage2.weight_decay);
    let targets: Vec<Rc<Tensor<f32>>> = examples
        .iter()
        .map(|e| Rc::new(mask_tensor::<f32>(&e.label)))
        .collect();
    for epoch in 0..cfg.stage2.epochs {
        let lr = cosine_no_restart(epoch, cfg.stage2.lr0, cfg.stage2.epochs);
        let mut idx: Vec<usize> = (0..examples.len()).collect();
        idx.shuffle(&mut StdRng::seed_from_u64(mix_seed(seed, 0x57A6E2, epoch as u64)));
        let mut loss_sum = 0.0f64;
        for batch in idx.chunks(cfg.stage2.batch_size) {
            opt.zero_grad();
            let inv = 1.0f32 / batch.len() as f32;
            for &i in batch {
                let mut tape = Tape::new(true);
                let p = net.forward(&mut tape, &Var::constant(examples[i].input.clone()), true)?;
                let loss = tape.focal_loss(&p, &targets[i], gamma, alpha);
                let value = loss.scalar_value() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite stage-2 loss at epoch {epoch}"
                    )));
                }
                loss_sum += value;
                let scaled = tape.scale(&loss, inv);
                tape.backward(&scaled);
            }
            opt.step(lr);
        }
        let mean = loss_sum / examples.len() as f64;
        println!(
            "stage2 epoch {:>2}/{} lr {:.3e} loss {:.5} ({} patches)",
            epoch + 1,
            cfg.stage2.epochs,
            lr,
            mean,
            examples.len()
        );
        history.push(mean);
    }
    Ok((net, history))
}

pub fn train_stage2(
    train: &[Sample],
    stage1_ckpt: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage2Artifacts> {
    train_stage2_opts(train, stage1_ckpt, cfg, out_dir, false)
}

/// As [`train_stage2`]; `dump_patches` additionally writes the first few
/// patch records as PNG strips under `out_dir/patches`.
pub fn train_stage2_opts(
    train: &[Sample],
    stage1_ckpt: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
    dump_patches: bool,
) -> Result<Stage2Artifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (tafe, norm, _) = load_stage1(stage1_ckpt)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| train[a].stem.cmp(&train[b].stem));

    let mut examples: Vec<PatchExample> = Vec::new();
    for &i in &order {
        examples.extend(collect_examples(&train[i], &tafe, &norm, cfg)?);
    }
    if dump_patches {
        let dir = out_dir.join("patches");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, ex) in examples.iter().take(16).enumerate() {
            crate::patching::dump_patch_strip(
                &dir.join(format!("patch_{i:03}.png")),
                &crate::patching::PatchRecord {
                    proposal_id: i as u32,
                    window: crate::patching::Window { r0: 0, c0: 0, side: 1 },
                    size_class: ex.class,
                    input: ex.input.clone(),
                    scale: 1.0,
                },
            )?;
        }
    }
    if examples.is_empty() {
        return Err(Error::Dataset(
            "stage-1 produced zero proposals on every training image".into(),
        ));
    }
    let small: Vec<&PatchExample> = examples.iter().filter(|e| e.class == SizeClass::Small).collect();
    let large: Vec<&PatchExample> = examples.iter().filter(|e| e.class == SizeClass::Large).collect();
    let n_matched = examples.iter().filter(|e| e.matched).count();
    println!(
        "stage2 dataset: {} small, {} large, {} matched, {} false-positive",
        small.len(),
        large.len(),
        n_matched,
        examples.len() - n_matched
    );

    let (small_net, hist_small) = train_refine_net(&small, cfg, mix_seed(cfg.seed, 0x5A11, 0))?;
    let (large_net, hist_large) = train_refine_net(&large, cfg, mix_seed(cfg.seed, 0x1A26E, 0))?;

    let small_path = out_dir.join("stage2_small.ckpt");
    let large_path = out_dir.join("stage2_large.ckpt");
    save_stage2(&small_path, &small_net, cfg)?;
    save_stage2(&large_path, &large_net, cfg)?;
    Ok(Stage2Artifacts {
        small_checkpoint: small_path,
        large_checkpoint: large_path,
        n_small: small.len(),
        n_large: large.len(),
        n_matched,
        n_unmatched: examples.len() - n_matched,
        loss_history_small: hist_small,
        loss_history_large: hist_large,
    })
}
