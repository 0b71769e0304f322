//! TrainConfig: every hyper-parameter of both stages in one record, with a
//! flat `key = value` text form (dotted sections). Unknown keys are errors;
//! CLI `--set key=value` overrides apply after the file.

use crate::data::AugmentConfig;
use crate::losses::LossConfig;
use crate::patching::PatchParams;
use crate::proposals::{Connectivity, PostprocParams};
use crate::refine::RefineNetConfig;
use crate::tafe::TafeConfig;
use crate::{Error, Result};

use super::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Loss {
    Focal,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr0: f64,
    pub first_period: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tafe: TafeConfig,
    pub loss: LossConfig,
    pub post: PostprocParams,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub loss: Stage2Loss,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub refine: RefineNetConfig,
    pub patch: PatchParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub boundary_width: usize,
    pub stain_norm: bool,
    /// Fraction of training data carved out for validation when no explicit
    /// validation set is supplied.
    pub val_fraction: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl TrainConfig {
    /// Full-scale recipe (1000×1000 H&E images).
    pub fn full() -> Self {
        TrainConfig {
            seed: 0,
            boundary_width: 2,
            stain_norm: true,
            val_fraction: 0.2,
            stage1: Stage1Config {
                epochs: 600,
                lr0: 3e-4,
                first_period: 40,
                weight_decay: 1e-4,
                batch_size: 4,
                tafe: TafeConfig::full(),
                loss: LossConfig::default(),
                post: PostprocParams::default(),
                augment: AugmentConfig::default(),
            },
            stage2: Stage2Config {
                epochs: 10,
                lr0: 3e-4,
                weight_decay: 1e-4,
                batch_size: 8,
                tau: 0.5,
                loss: Stage2Loss::Focal,
                focal_gamma: 2.0,
                focal_alpha: 1.0,
                refine: RefineNetConfig::default(),
                patch: PatchParams::default(),
            },
        }
    }

    /// Desk-scale recipe for 128×128 synthetic data on CPU.
    pub fn desk() -> Self {
        let mut cfg = TrainConfig::full();
        cfg.boundary_width = 1;
        cfg.stain_norm = false;
        cfg.stage1.epochs = 20;
        cfg.stage1.first_period = 20;
        cfg.stage1.batch_size = 2;
        cfg.stage1.tafe = TafeConfig::desk();
        cfg.stage1.post.min_area = 5;
        cfg.stage1.post.dilation_radius = 1;
        cfg.stage1.augment = AugmentConfig {
            crop_size: 64,
            p_blur: 0.1,
            blur_sigma_max: 0.8,
            p_elastic: 0.2,
            elastic_alpha: 8.0,
            elastic_sigma: 4.0,
            ..AugmentConfig::default()
        };
        cfg.stage2.epochs = 5;
        cfg.stage2.refine = RefineNetConfig::desk();
        // Split at 24 so both size classes see substantial training data at
        // 128x128 scale (nuclei spanning roughly 5-20 px across).
        cfg.stage2.patch = PatchParams {
            margin: 6,
            s_small: 24,
            s_large: 48,
            mask_dilation: 2,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        Schedule::new(self.stage1.epochs, self.stage1.lr0, self.stage1.first_period)?;
        self.stage1.tafe.validate()?;
        self.stage2.patch.validate()?;
        if self.stage1.augment.crop_size % 8 != 0 {
            return Err(Error::Config("augment crop_size must be divisible by 8".into()));
        }
        if !(0.0..=1.0).contains(&self.stage2.tau) {
            return Err(Error::Config("tau must lie in [0,1]".into()));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0,1)".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let conn = match s1.post.connectivity {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        };
        let loss2 = match s2.loss {
            Stage2Loss::Focal => "focal",
            Stage2Loss::CrossEntropy => "cross_entropy",
        };
        format!(
            "seed = {}\n\
             boundary_width = {}\n\
             stain_norm = {}\n\
             val_fraction = {}\n\
             stage1.epochs = {}\n\
             stage1.lr0 = {}\n\
             stage1.first_period = {}\n\
             stage1.weight_decay = {}\n\
             stage1.batch_size = {}\n\
             stage1.tafe.block_depths = {}\n\
             stage1.tafe.growth_rate = {}\n\
             stage1.tafe.proj_channels = {}\n\
             stage1.loss.st_gamma = {}\n\
             stage1.loss.dice_weight = {}\n\
             stage1.loss.dice_eps = {}\n\
             stage1.loss.aux_weight = {}\n\
             stage1.post.seg_thresh = {}\n\
             stage1.post.bnd_thresh = {}\n\
             stage1.post.min_area = {}\n\
             stage1.post.dilation_radius = {}\n\
             stage1.post.connectivity = {}\n\
             stage1.augment.crop_size = {}\n\
             stage1.augment.p_hflip = {}\n\
             stage1.augment.p_vflip = {}\n\
             stage1.augment.brightness = {}\n\
             stage1.augment.contrast = {}\n\
             stage1.augment.saturation = {}\n\
             stage1.augment.p_blur = {}\n\
             stage1.augment.blur_sigma_max = {}\n\
             stage1.augment.p_elastic = {}\n\
             stage1.augment.elastic_alpha = {}\n\
             stage1.augment.elastic_sigma = {}\n\
             stage2.epochs = {}\n\
             stage2.lr0 = {}\n\
             stage2.weight_decay = {}\n\
             stage2.batch_size = {}\n\
             stage2.tau = {}\n\
             stage2.loss = {}\n\
             stage2.focal_gamma = {}\n\
             stage2.focal_alpha = {}\n\
             stage2.refine.growth_rates = {}\n\
             stage2.refine.layers_per_block = {}\n\
             stage2.patch.margin = {}\n\
             stage2.patch.s_small = {}\n\
             stage2.patch.s_large = {}\n\
             stage2.patch.mask_dilation = {}\n",
            self.seed,
            self.boundary_width,
            self.stain_norm,
            self.val_fraction,
            s1.epochs,
            s1.lr0,
            s1.first_period,
            s1.weight_decay,
            s1.batch_size,
            s1.tafe.block_depths.map(|d| d.to_string()).join(","),
            s1.tafe.growth_rate,
            s1.tafe.proj_channels,
            s1.loss.st_gamma,
            s1.loss.dice_weight,
            s1.loss.dice_eps,
            s1.loss.aux_weight,
            s1.post.seg_thresh,
            s1.post.bnd_thresh,
            s1.post.min_area,
            s1.post.dilation_radius,
            conn,
            s1.augment.crop_size,
            s1.augment.p_hflip,
            s1.augment.p_vflip,
            s1.augment.brightness,
            s1.augment.contrast,
            s1.augment.saturation,
            s1.augment.p_blur,
            s1.augment.blur_sigma_max,
            s1.augment.p_elastic,
            s1.augment.elastic_alpha,
            s1.augment.elastic_sigma,
            s2.epochs,
            s2.lr0,
            s2.weight_decay,
            s2.batch_size,
            s2.tau,
            loss2,
            s2.focal_gamma,
            s2.focal_alpha,
            s2.refine.growth_rates.map(|g| g.to_string()).join(","),
            s2.refine.layers_per_block,
            s2.patch.margin,
            s2.patch.s_small,
            s2.patch.s_large,
            s2.patch.mask_dilation,
        )
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("bad value {v:?} for {what}"));
        macro_rules! parse {
            ($ty:ty, $what:expr) => {
                v.parse::<$ty>().map_err(|_| bad($what))?
            };
        }
        match key.trim() {
            "preset" => {
                *self = match v {
                    "full" => TrainConfig::full(),
                    "desk" => TrainConfig::desk(),
                    _ => return Err(bad("preset (full|desk)")),
                }
            }
            "seed" => self.seed = parse!(u64, "seed"),
            "boundary_width" => self.boundary_width = parse!(usize, "boundary_width"),
            "stain_norm" => self.stain_norm = parse!(bool, "stain_norm"),
            "val_fraction" => self.val_fraction = parse!(f64, "val_fraction"),
            "stage1.epochs" => self.stage1.epochs = parse!(usize, "epochs"),
            "stage1.lr0" => self.stage1.lr0 = parse!(f64, "lr0"),
            "stage1.first_period" => self.stage1.first_period = parse!(usize, "first_period"),
            "stage1.weight_decay" => self.stage1.weight_decay = parse!(f64, "weight_decay"),
            "stage1.batch_size" => self.stage1.batch_size = parse!(usize, "batch_size"),
            "stage1.tafe.block_depths" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad("block_depths")))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(bad("block_depths (4 entries)"));
                }
                self.stage1.tafe.block_depths = [parts[0], parts[1], parts[2], parts[3]];
            }
            "stage1.tafe.growth_rate" => self.stage1.tafe.growth_rate = parse!(usize, "growth_rate"),
            "stage1.tafe.proj_channels" => {
                self.stage1.tafe.proj_channels = parse!(usize, "proj_channels")
            }
            "stage1.loss.st_gamma" => self.stage1.loss.st_gamma = parse!(f64, "st_gamma"),
            "stage1.loss.dice_weight" => self.stage1.loss.dice_weight = parse!(f64, "dice_weight"),
            "stage1.loss.dice_eps" => self.stage1.loss.dice_eps = parse!(f64, "dice_eps"),
            "stage1.loss.aux_weight" => self.stage1.loss.aux_weight = parse!(f64, "aux_weight"),
            "stage1.post.seg_thresh" => self.stage1.post.seg_thresh = parse!(f32, "seg_thresh"),
            "stage1.post.bnd_thresh" => self.stage1.post.bnd_thresh = parse!(f32, "bnd_thresh"),
            "stage1.post.min_area" => self.stage1.post.min_area = parse!(usize, "min_area"),
            "stage1.post.dilation_radius" => {
                self.stage1.post.dilation_radius = parse!(usize, "dilation_radius")
            }
            "stage1.post.connectivity" => {
                self.stage1.post.connectivity = match v {
                    "4" => Connectivity::Four,
                    "8" => Connectivity::Eight,
                    _ => return Err(bad("connectivity (4|8)")),
                }
            }
            "stage1.augment.crop_size" => self.stage1.augment.crop_size = parse!(usize, "crop_size"),
            "stage1.augment.p_hflip" => self.stage1.augment.p_hflip = parse!(f64, "p_hflip"),
            "stage1.augment.p_vflip" => self.stage1.augment.p_vflip = parse!(f64, "p_vflip"),
            "stage1.augment.brightness" => self.stage1.augment.brightness = parse!(f64, "brightness"),
            "stage1.augment.contrast" => self.stage1.augment.contrast = parse!(f64, "contrast"),
            "stage1.augment.saturation" => self.stage1.augment.saturation = parse!(f64, "saturation"),
            "stage1.augment.p_blur" => self.stage1.augment.p_blur = parse!(f64, "p_blur"),
            "stage1.augment.blur_sigma_max" => {
                self.stage1.augment.blur_sigma_max = parse!(f64, "blur_sigma_max")
            }
            "stage1.augment.p_elastic" => self.stage1.augment.p_elastic = parse!(f64, "p_elastic"),
            "stage1.augment.elastic_alpha" => {
                self.stage1.augment.elastic_alpha = parse!(f64, "elastic_alpha")
            }
            "stage1.augment.elastic_sigma" => {
                self.stage1.augment.elastic_sigma = parse!(f64, "elastic_sigma")
            }
            "stage2.epochs" => self.stage2.epochs = parse!(usize, "epochs"),
            "stage2.lr0" => self.stage2.lr0 = parse!(f64, "lr0"),
            "stage2.weight_decay" => self.stage2.weight_decay = parse!(f64, "weight_decay"),
            "stage2.batch_size" => self.stage2.batch_size = parse!(usize, "batch_size"),
            "stage2.tau" => self.stage2.tau = parse!(f64, "tau"),
            "stage2.loss" => {
                self.stage2.loss = match v {
                    "focal" => Stage2Loss::Focal,
                    "cross_entropy" | "cross-entropy" => Stage2Loss::CrossEntropy,
                    _ => return Err(bad("stage2.loss (focal|cross_entropy)")),
                }
            }
            "stage2.focal_gamma" => self.stage2.focal_gamma = parse!(f64, "focal_gamma"),
            "stage2.focal_alpha" => self.stage2.focal_alpha = parse!(f64, "focal_alpha"),
            "stage2.refine.growth_rates" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad("growth_rates")))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(bad("growth_rates (4 entries)"));
                }
                self.stage2.refine.growth_rates = [parts[0], parts[1], parts[2], parts[3]];
            }
            "stage2.refine.layers_per_block" => {
                self.stage2.refine.layers_per_block = parse!(usize, "layers_per_block")
            }
            "stage2.patch.margin" => self.stage2.patch.margin = parse!(usize, "margin"),
            "stage2.patch.s_small" => self.stage2.patch.s_small = parse!(usize, "s_small"),
            "stage2.patch.s_large" => self.stage2.patch.s_large = parse!(usize, "s_large"),
            "stage2.patch.mask_dilation" => {
                self.stage2.patch.mask_dilation = parse!(usize, "mask_dilation")
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a config file body over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig::desk();
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        let full = TrainConfig::full();
        let back_full = TrainConfig::from_text(&full.to_text()).unwrap();
        assert_eq!(full, back_full);
    }

    #[test]
    fn schedule_guard_enforced() {
        let mut cfg = TrainConfig::desk();
        cfg.stage1.epochs = 50; // not tiled by doubling periods of 20
        assert!(cfg.validate().is_err());
        cfg.stage1.first_period = 50;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut cfg = TrainConfig::desk();
        assert!(cfg.set("stage1.nonsense", "1").is_err());
        assert!(cfg.set("stage2.tau", "chicken").is_err());
        assert!(cfg.set("stage2.loss", "hinge").is_err());
        assert!(cfg.set("stage2.loss", "cross_entropy").is_ok());
        assert_eq!(cfg.stage2.loss, Stage2Loss::CrossEntropy);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let mut cfg = TrainConfig::desk();
        cfg.apply_text("# comment\n\nseed = 9  # trailing\nstage2.tau = 0.3\n")
            .unwrap();
        assert_eq!(cfg.seed, 9);
        assert!((cfg.stage2.tau - 0.3).abs() < 1e-12);
    }
}
