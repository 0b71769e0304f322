//! Pipeline checkpoints: the shared archive container plus the image
//! normalization state the nets were trained with.

use std::path::Path;

use crate::core::RgbImage;
use crate::data::{apply_stain_stats, channel_stats, stain_stats, zscore_normalize, StainStats};
use crate::nn::checkpoint::{load_archive, save_archive};
use crate::nn::Tensor;
use crate::refine::RefineNet;
use crate::tafe::TafeNet;
use crate::{Error, Result};

use super::config::TrainConfig;

/// Stain + intensity normalization fitted on the training set and replayed
/// at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub stain_enabled: bool,
    pub stain_ref: StainStats,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Fits on training images (already sorted by stem): the stain reference
    /// is the first image; mean/std are computed after stain transfer.
    pub fn fit(images: &[&RgbImage], stain_enabled: bool) -> Normalization {
        assert!(!images.is_empty(), "cannot fit normalization on no images");
        let stain_ref = stain_stats(images[0]);
        let normalized: Vec<RgbImage> = if stain_enabled {
            images
                .iter()
                .map(|img| apply_stain_stats(img, &stain_stats(img), &stain_ref))
                .collect()
        } else {
            images.iter().map(|&img| img.clone()).collect()
        };
        let refs: Vec<&RgbImage> = normalized.iter().collect();
        let (mean, std) = channel_stats(&refs);
        // Quantize to f32 so a checkpoint round trip is exact.
        let q3 = |v: [f64; 3]| [v[0] as f32 as f64, v[1] as f32 as f64, v[2] as f32 as f64];
        Normalization {
            stain_enabled,
            stain_ref: StainStats {
                mean: q3(stain_ref.mean),
                std: q3(stain_ref.std),
            },
            mean: q3(mean),
            std: q3(std),
        }
    }

    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        let staged = if self.stain_enabled {
            apply_stain_stats(img, &stain_stats(img), &self.stain_ref)
        } else {
            img.clone()
        };
        zscore_normalize(&staged, self.mean, self.std)
    }

    fn entries(&self) -> Vec<(String, Tensor<f32>)> {
        let f = |v: &[f64]| Tensor::from_vec(&[3], v.iter().map(|&x| x as f32).collect());
        vec![
            ("norm.mean".into(), f(&self.mean)),
            ("norm.std".into(), f(&self.std)),
            ("stain.ref_mean".into(), f(&self.stain_ref.mean)),
            ("stain.ref_std".into(), f(&self.stain_ref.std)),
            (
                "stain.enabled".into(),
                Tensor::from_vec(&[1], vec![if self.stain_enabled { 1.0 } else { 0.0 }]),
            ),
        ]
    }

    fn from_entries(entries: &[(String, Tensor<f32>)]) -> Result<Normalization> {
        let get = |name: &str| -> Result<Vec<f64>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
        };
        let mean = get("norm.mean")?;
        let std = get("norm.std")?;
        let rm = get("stain.ref_mean")?;
        let rs = get("stain.ref_std")?;
        let enabled = get("stain.enabled")?[0] > 0.5;
        Ok(Normalization {
            stain_enabled: enabled,
            stain_ref: StainStats {
                mean: [rm[0], rm[1], rm[2]],
                std: [rs[0], rs[1], rs[2]],
            },
            mean: [mean[0], mean[1], mean[2]],
            std: [std[0], std[1], std[2]],
        })
    }
}

fn net_entries(
    state: &[(String, crate::nn::ParamRef<f32>)],
    buffers: &[(String, crate::nn::TensorCell<f32>)],
) -> Vec<(String, Tensor<f32>)> {
    let mut entries: Vec<(String, Tensor<f32>)> = state
        .iter()
        .map(|(n, p)| (n.clone(), p.borrow().value.clone()))
        .collect();
    entries.extend(
        buffers
            .iter()
            .map(|(n, b)| (n.clone(), b.borrow().clone())),
    );
    entries
}

fn restore_net(
    entries: &[(String, Tensor<f32>)],
    state: &[(String, crate::nn::ParamRef<f32>)],
    buffers: &[(String, crate::nn::TensorCell<f32>)],
) -> Result<()> {
    let lookup = |name: &str| -> Result<&Tensor<f32>> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    for (name, p) in state {
        let t = lookup(name)?;
        if t.shape() != p.borrow().value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} vs expected {:?}",
                t.shape(),
                p.borrow().value.shape()
            )));
        }
        p.borrow_mut().value = t.clone();
    }
    for (name, b) in buffers {
        let t = lookup(name)?;
        *b.borrow_mut() = t.clone();
    }
    Ok(())
}

pub fn save_stage1(
    path: &Path,
    net: &TafeNet<f32>,
    norm: &Normalization,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut entries = net_entries(&net.state(), &net.buffers());
    entries.extend(norm.entries());
    save_archive(path, &cfg.to_text(), &entries)
}

pub fn load_stage1(path: &Path) -> Result<(TafeNet<f32>, Normalization, TrainConfig)> {
    let (cfg_text, entries) = load_archive::<f32>(path)?;
    let cfg = TrainConfig::from_text(&cfg_text)?;
    let net = TafeNet::new(&cfg.stage1.tafe, 0)?;
    restore_net(&entries, &net.state(), &net.buffers())?;
    let norm = Normalization::from_entries(&entries)?;
    Ok((net, norm, cfg))
}

pub fn save_stage2(path: &Path, net: &RefineNet<f32>, cfg: &TrainConfig) -> Result<()> {
    let entries = net_entries(&net.state(), &net.buffers());
    save_archive(path, &cfg.to_text(), &entries)
}

pub fn load_stage2(path: &Path) -> Result<(RefineNet<f32>, TrainConfig)> {
    let (cfg_text, entries) = load_archive::<f32>(path)?;
    let cfg = TrainConfig::from_text(&cfg_text)?;
    let net = RefineNet::new(&cfg.stage2.refine, 0);
    restore_net(&entries, &net.state(), &net.buffers())?;
    Ok((net, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn stage1_checkpoint_round_trip_is_forward_identical() {
        let dir = std::env::temp_dir().join("brp_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("stage1.ckpt");
        let mut cfg = TrainConfig::desk();
        cfg.stage1.tafe = crate::tafe::TafeConfig {
            block_depths: [1, 1, 1, 1],
            growth_rate: 2,
            proj_channels: 2,
        };
        let net = TafeNet::<f32>::new(&cfg.stage1.tafe, 77).unwrap();
        let norm = Normalization {
            stain_enabled: true,
            stain_ref: StainStats {
                mean: [0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64],
                std: [1.0, 1.1f32 as f64, 1.2f32 as f64],
            },
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        };
        save_stage1(&path, &net, &norm, &cfg).unwrap();
        let (loaded, norm2, cfg2) = load_stage1(&path).unwrap();
        assert_eq!(norm, norm2);
        assert_eq!(cfg, cfg2);
        let x = Tensor::from_vec(
            &[3, 16, 16],
            (0..3 * 256).map(|i| (i % 13) as f32 / 13.0).collect(),
        );
        let a = net.infer(&x).unwrap();
        let b = loaded.infer(&x).unwrap();
        assert_eq!(a.seg_prob, b.seg_prob);
        assert_eq!(a.bnd_prob, b.bnd_prob);
    }
}
