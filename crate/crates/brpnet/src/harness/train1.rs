//! Stage-1 training loop: AdamW over the TAFE net under the warm-restart
//! cosine schedule, per-epoch validation AJI, checkpoints at restart
//! boundaries plus best and final.

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{augment, Sample};
use crate::losses::stage1_loss_graph;
use crate::losses::mask_tensor;
use crate::metrics;
use crate::nn::{AdamW, Tape, Var};
use crate::proposals::propose;
use crate::tafe::TafeNet;
use crate::{Error, Result};

use super::ckpt::{save_stage1, Normalization};
use super::config::TrainConfig;
use super::schedule::Schedule;
use super::{image_tensor, mix_seed, prob_pair};

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_aji: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Artifacts {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history: Vec<EpochStats>,
    pub best_val_aji: f64,
}

/// Normalization state split so augmentation can run in stain-normalized
/// [0,1] space with z-scoring applied per crop afterwards.
impl Normalization {
    pub fn stain_only(&self, img: &crate::core::RgbImage) -> crate::core::RgbImage {
        if self.stain_enabled {
            crate::data::apply_stain_stats(img, &crate::data::stain_stats(img), &self.stain_ref)
        } else {
            img.clone()
        }
    }

    pub fn zscore_only(&self, img: &crate::core::RgbImage) -> Result<crate::core::RgbImage> {
        crate::data::zscore_normalize(img, self.mean, self.std)
    }
}

pub fn train_stage1(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage1Artifacts> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("stage-1 training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let schedule = Schedule::new(cfg.stage1.epochs, cfg.stage1.lr0, cfg.stage1.first_period)?;

    // Sort by stem for a deterministic normalization reference and order.
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| train[a].stem.cmp(&train[b].stem));
    let sorted: Vec<&Sample> = order.iter().map(|&i| &train[i]).collect();

    let images: Vec<&crate::core::RgbImage> = sorted.iter().map(|s| &s.image).collect();
    let norm = Normalization::fit(&images, cfg.stain_norm);

    // Stain-normalize up front; z-score after augmentation.
    let prepared: Vec<Sample> = sorted
        .iter()
        .map(|s| {
            let stained = norm.stain_only(&s.image);
            let base = Sample::new(s.stem.clone(), stained, s.instances.clone(), cfg.boundary_width);
            base
        })
        .collect();
    let val_prepared: Vec<Sample> = val
        .iter()
        .map(|s| {
            Sample::new(
                s.stem.clone(),
                norm.stain_only(&s.image),
                s.instances.clone(),
                cfg.boundary_width,
            )
        })
        .collect();

    let net = TafeNet::<f32>::new(&cfg.stage1.tafe, cfg.seed)?;
    let mut opt = AdamW::new(net.params(), cfg.stage1.weight_decay);

    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.stage1.epochs);
    let best_path = out_dir.join("stage1_best.ckpt");
    let final_path = out_dir.join("stage1_final.ckpt");
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 0..cfg.stage1.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut idx: Vec<usize> = (0..prepared.len()).collect();
        idx.shuffle(&mut StdRng::seed_from_u64(mix_seed(cfg.seed, 0xE10C, epoch as u64)));

        let mut loss_sum = 0.0f64;
        let mut n_seen = 0usize;
        for batch in idx.chunks(cfg.stage1.batch_size) {
            opt.zero_grad();
            let inv = 1.0f32 / batch.len() as f32;
            for &i in batch {
                let mut aug_rng =
                    StdRng::seed_from_u64(mix_seed(cfg.seed, 0xA06 + epoch as u64, i as u64));
                let crop = augment(&prepared[i], &cfg.stage1.augment, &mut aug_rng)?;
                let input = image_tensor(&norm.zscore_only(&crop.image)?);
                let seg_t = std::rc::Rc::new(mask_tensor::<f32>(crop.seg.grid()));
                let bnd_t = std::rc::Rc::new(mask_tensor::<f32>(crop.bnd.grid()));
                let mut tape = Tape::new(true);
                let out = net.forward_graph(&mut tape, &Var::constant(input), true)?;
                let loss = stage1_loss_graph(&mut tape, &out, &seg_t, &bnd_t, &cfg.stage1.loss);
                let value = loss.scalar_value() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite stage-1 loss at epoch {epoch}, sample {}",
                        prepared[i].stem
                    )));
                }
                loss_sum += value;
                n_seen += 1;
                let scaled = tape.scale(&loss, inv);
                tape.backward(&scaled);
            }
            opt.step(lr);
        }
        let train_loss = loss_sum / n_seen.max(1) as f64;

        let val_aji = validate_stage1(&net, &norm, &val_prepared, cfg)?;
        println!(
            "stage1 epoch {:>3}/{} lr {:.3e} loss {:.5} val_aji {:.4}",
            epoch + 1,
            cfg.stage1.epochs,
            lr,
            train_loss,
            val_aji
        );
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_aji,
        });

        if !val_prepared.is_empty() && val_aji > best_val {
            best_val = val_aji;
            save_stage1(&best_path, &net, &norm, cfg)?;
        }
        // Checkpoint at each restart boundary (start of the next period).
        if schedule.restart_starts.contains(&(epoch + 1)) {
            save_stage1(&out_dir.join(format!("stage1_epoch{:04}.ckpt", epoch + 1)), &net, &norm, cfg)?;
        }
    }

    save_stage1(&final_path, &net, &norm, cfg)?;
    if val_prepared.is_empty() {
        save_stage1(&best_path, &net, &norm, cfg)?;
        best_val = f64::NAN;
    }
    write_history(&out_dir.join("stage1_history.tsv"), &history)?;
    Ok(Stage1Artifacts {
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        history,
        best_val_aji: best_val,
    })
}

fn validate_stage1(
    net: &TafeNet<f32>,
    norm: &Normalization,
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0f64;
    for s in val {
        let input = image_tensor(&norm.zscore_only(&s.image)?);
        let out = net.infer(&input)?;
        let pred = propose(&prob_pair(&out)?, &cfg.stage1.post)?;
        sum += metrics::aji(&s.instances, &pred)?;
    }
    Ok(sum / val.len() as f64)
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch\tlr\ttrain_loss\tval_aji\n");
    for h in history {
        text.push_str(&format!(
            "{}\t{:.6e}\t{:.8}\t{:.6}\n",
            h.epoch, h.lr, h.train_loss, h.val_aji
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
