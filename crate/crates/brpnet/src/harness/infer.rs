//! End-to-end inference: stage-1 probabilities, boundary-subtraction
//! proposals, optional stage-2 refinement, assembly.

use std::path::Path;

use crate::core::{InstanceMap, ProbabilityPair, RgbImage};
use crate::patching::extract_patch;
use crate::proposals::{propose, proposals_from_map};
use crate::refine::{assemble, refine_batch, RefineNet};
use crate::tafe::TafeNet;
use crate::{Error, Result};

use super::ckpt::{load_stage1, load_stage2, Normalization};
use super::config::TrainConfig;
use super::{image_tensor, prob_pair};

/// Loaded pipeline: stage-1 net plus optional stage-2 nets and the config
/// they were trained with.
pub struct Pipeline {
    pub tafe: TafeNet<f32>,
    pub norm: Normalization,
    pub cfg: TrainConfig,
    pub stage2: Option<(RefineNet<f32>, RefineNet<f32>)>,
}

impl Pipeline {
    pub fn load(
        stage1: &Path,
        stage2_small: Option<&Path>,
        stage2_large: Option<&Path>,
    ) -> Result<Pipeline> {
        let (tafe, norm, cfg) = load_stage1(stage1)?;
        let stage2 = match (stage2_small, stage2_large) {
            (Some(s), Some(l)) => {
                let (small, cfg2) = load_stage2(s)?;
                let (large, _) = load_stage2(l)?;
                if cfg2.stage2.patch != cfg.stage2.patch {
                    // Stage-2 nets were trained with their own patch params;
                    // those govern extraction.
                    return Ok(Pipeline {
                        tafe,
                        norm,
                        cfg: TrainConfig {
                            stage2: cfg2.stage2.clone(),
                            ..cfg
                        },
                        stage2: Some((small, large)),
                    });
                }
                Some((small, large))
            }
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "provide both stage-2 checkpoints or neither".into(),
                ))
            }
        };
        Ok(Pipeline {
            tafe,
            norm,
            cfg,
            stage2,
        })
    }

    /// Stage-1 probability maps for one raw image.
    pub fn probabilities(&self, img: &RgbImage) -> Result<ProbabilityPair> {
        let normalized = self.norm.apply(img)?;
        let out = self.tafe.infer(&image_tensor(&normalized))?;
        prob_pair(&out)
    }

    /// Full pipeline on one image. `use_stage2 = false` returns the stage-1
    /// proposals directly (single-stage ablation path).
    pub fn infer_image(&self, img: &RgbImage, use_stage2: bool) -> Result<(InstanceMap, ProbabilityPair)> {
        self.infer_with_radius(img, use_stage2, self.cfg.stage1.post.dilation_radius)
    }

    /// Same, overriding the post-processing dilation radius (sweeps).
    pub fn infer_with_radius(
        &self,
        img: &RgbImage,
        use_stage2: bool,
        radius: usize,
    ) -> Result<(InstanceMap, ProbabilityPair)> {
        let normalized = self.norm.apply(img)?;
        let out = self.tafe.infer(&image_tensor(&normalized))?;
        let pp = prob_pair(&out)?;
        let proposal_map = self.proposals_at(&pp, radius)?;
        let result = if use_stage2 {
            self.refine_map(&normalized, &pp, &proposal_map)?
        } else {
            proposal_map
        };
        Ok((result, pp))
    }

    /// Stage-1-only and two-stage maps from a single stage-1 forward pass.
    pub fn infer_both(&self, img: &RgbImage, radius: usize) -> Result<(InstanceMap, InstanceMap)> {
        let normalized = self.norm.apply(img)?;
        let out = self.tafe.infer(&image_tensor(&normalized))?;
        let pp = prob_pair(&out)?;
        let proposal_map = self.proposals_at(&pp, radius)?;
        let refined = self.refine_map(&normalized, &pp, &proposal_map)?;
        Ok((proposal_map, refined))
    }

    fn proposals_at(&self, pp: &ProbabilityPair, radius: usize) -> Result<InstanceMap> {
        let mut post = self.cfg.stage1.post.clone();
        post.dilation_radius = radius;
        propose(pp, &post)
    }

    fn refine_map(
        &self,
        normalized: &RgbImage,
        pp: &ProbabilityPair,
        proposal_map: &InstanceMap,
    ) -> Result<InstanceMap> {
        let Some((small, large)) = &self.stage2 else {
            return Ok(proposal_map.clone());
        };
        let proposals = proposals_from_map(proposal_map);
        if proposals.is_empty() {
            return Ok(InstanceMap::zeros(proposal_map.h(), proposal_map.w()));
        }
        let records: Vec<_> = proposals
            .iter()
            .map(|p| extract_patch(normalized, pp, p, &self.cfg.stage2.patch))
            .collect::<Result<_>>()?;
        let refined = refine_batch(&records, small, large, &self.cfg.stage2.patch)?;
        let paired: Vec<_> = refined
            .into_iter()
            .zip(records.iter().map(|r| r.window))
            .collect();
        Ok(assemble(&paired, (proposal_map.h(), proposal_map.w())))
    }
}
