//! Hyper-parameter sweeps: dilation radius re-runs post-processing on frozen
//! stage-1 outputs; tau and stage-2 loss retrain stage 2 per value.

use std::path::Path;

use crate::data::Sample;
use crate::metrics;
use crate::{Error, Result};

use super::config::{Stage2Loss, TrainConfig};
use super::infer::Pipeline;
use super::train2::train_stage2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    DilationRadius,
    Tau,
    Stage2Loss,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilation_radius" => Ok(SweepParam::DilationRadius),
            "tau" => Ok(SweepParam::Tau),
            "stage2_loss" => Ok(SweepParam::Stage2Loss),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep param {other:?} (dilation_radius|tau|stage2_loss)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub aji_stage1: f64,
    pub aji_full: f64,
}

/// Mean stage-1-only and two-stage AJI over an evaluation set (one stage-1
/// forward per image).
pub fn eval_pipeline(pipeline: &Pipeline, eval: &[Sample], radius: usize) -> Result<(f64, f64)> {
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    for s in eval {
        let (stage1_map, full_map) = pipeline.infer_both(&s.image, radius)?;
        s1 += metrics::aji(&s.instances, &stage1_map)?;
        s2 += metrics::aji(&s.instances, &full_map)?;
    }
    let n = eval.len().max(1) as f64;
    Ok((s1 / n, s2 / n))
}

/// Runs the sweep and returns one row per value. `train` is needed only for
/// the retraining sweeps (tau, stage2_loss).
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    param: SweepParam,
    values: &[String],
    train: &[Sample],
    eval: &[Sample],
    stage1_ckpt: &Path,
    stage2_small: Option<&Path>,
    stage2_large: Option<&Path>,
    cfg: &TrainConfig,
    work_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    match param {
        SweepParam::DilationRadius => {
            let pipeline = Pipeline::load(stage1_ckpt, stage2_small, stage2_large)?;
            for v in values {
                let radius: usize = v
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad radius {v:?}")))?;
                let (aji_stage1, aji_full) = eval_pipeline(&pipeline, eval, radius)?;
                rows.push(SweepRow {
                    value: v.clone(),
                    aji_stage1,
                    aji_full,
                });
            }
        }
        SweepParam::Tau | SweepParam::Stage2Loss => {
            for v in values {
                let mut run_cfg = cfg.clone();
                match param {
                    SweepParam::Tau => {
                        run_cfg.stage2.tau = v
                            .parse()
                            .map_err(|_| Error::InvalidArgument(format!("bad tau {v:?}")))?;
                    }
                    SweepParam::Stage2Loss => {
                        run_cfg.stage2.loss = match v.as_str() {
                            "focal" => Stage2Loss::Focal,
                            "cross_entropy" | "cross-entropy" => Stage2Loss::CrossEntropy,
                            _ => {
                                return Err(Error::InvalidArgument(format!(
                                    "bad stage2 loss {v:?}"
                                )))
                            }
                        };
                    }
                    SweepParam::DilationRadius => unreachable!(),
                }
                let out_dir = work_dir.join(format!("sweep_{v}"));
                let artifacts = train_stage2(train, stage1_ckpt, &run_cfg, &out_dir)?;
                let pipeline = Pipeline::load(
                    stage1_ckpt,
                    Some(&artifacts.small_checkpoint),
                    Some(&artifacts.large_checkpoint),
                )?;
                let (aji_stage1, aji_full) =
                    eval_pipeline(&pipeline, eval, run_cfg.stage1.post.dilation_radius)?;
                rows.push(SweepRow {
                    value: v.clone(),
                    aji_stage1,
                    aji_full,
                });
            }
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("value\taji_stage1\taji_full\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            r.value, r.aji_stage1, r.aji_full
        ));
    }
    out
}
