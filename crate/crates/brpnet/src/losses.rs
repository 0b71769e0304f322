//! Training losses: smooth truncated, soft dice and focal, plus the stage-1
//! combination with deep supervision. The pure functions here are the
//! reference semantics; the tape ops in [`crate::nn`] share the same
//! per-pixel kernels, so both routes evaluate identically.

use std::rc::Rc;

use crate::core::Grid;
use crate::nn::{Elem, Tape, Tensor, Var};
use crate::tafe::{TafeGraphOut, TafeOutput};
use crate::{Error, Result};

/// Loss hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Truncation threshold of the smooth truncated loss, in (0,1).
    pub st_gamma: f64,
    /// Weight of the soft dice term.
    pub dice_weight: f64,
    pub dice_eps: f64,
    /// Focal loss focusing exponent.
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight of the mean auxiliary (deep-supervision) loss per task.
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            st_gamma: 0.1,
            dice_weight: 0.5,
            dice_eps: 1e-5,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            aux_weight: 0.25,
        }
    }
}

/// Per-pixel kernels shared by the pure losses and the autodiff ops.
pub(crate) mod kernel {
    use crate::nn::Elem;

    const CLAMP_LO: f64 = 1e-7;

    /// Smooth truncated loss of a correct-class probability: -ln p_t above
    /// the threshold, the C1 quadratic continuation below it.
    pub fn st_value<T: Elem>(pt: T, gamma: T) -> T {
        if pt >= gamma {
            -pt.ln()
        } else {
            let r = pt / gamma;
            -gamma.ln() + (T::ONE - r * r) / T::from_f64(2.0)
        }
    }

    /// d(st_value)/d(p_t); equals -1/gamma from both sides at the threshold.
    pub fn st_dpt<T: Elem>(pt: T, gamma: T) -> T {
        if pt >= gamma {
            -T::ONE / pt
        } else {
            -pt / (gamma * gamma)
        }
    }

    /// Focal loss of a correct-class probability, clamped before the log.
    pub fn focal_value<T: Elem>(pt: T, gamma_f: T, alpha: T) -> T {
        let q = pt
            .maxv(T::from_f64(CLAMP_LO))
            .minv(T::from_f64(1.0 - CLAMP_LO));
        -alpha * (T::ONE - q).powf(gamma_f) * q.ln()
    }

    /// d(focal_value)/d(p_t); zero in the clamped regions.
    pub fn focal_dpt<T: Elem>(pt: T, gamma_f: T, alpha: T) -> T {
        let lo = T::from_f64(CLAMP_LO);
        let hi = T::from_f64(1.0 - CLAMP_LO);
        if pt < lo || pt > hi {
            return T::ZERO;
        }
        let one_m = T::ONE - pt;
        let term = -gamma_f * one_m.powf(gamma_f - T::ONE) * pt.ln() + one_m.powf(gamma_f) / pt;
        -alpha * term
    }
}

fn check_shapes(probs: &Grid<f32>, targets: &Grid<u8>, context: &'static str) -> Result<()> {
    if !probs.same_shape(targets) {
        return Err(Error::shape(context, probs.shape(), targets.shape()));
    }
    Ok(())
}

#[inline]
fn pt_of(p: f64, t: u8) -> f64 {
    if t != 0 {
        p
    } else {
        1.0 - p
    }
}

/// Smooth truncated loss, pixel mean.
pub fn smooth_truncated_loss(probs: &Grid<f32>, targets: &Grid<u8>, gamma: f64) -> Result<f64> {
    check_shapes(probs, targets, "smooth_truncated_loss")?;
    assert!((0.0..1.0).contains(&gamma) && gamma > 0.0, "gamma must be in (0,1)");
    let mut acc = 0.0f64;
    for (&p, &t) in probs.data().iter().zip(targets.data()) {
        acc += kernel::st_value(pt_of(p as f64, t), gamma);
    }
    Ok(acc / probs.data().len() as f64)
}

/// Soft dice loss: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).
pub fn soft_dice_loss(probs: &Grid<f32>, targets: &Grid<u8>, eps: f64) -> Result<f64> {
    check_shapes(probs, targets, "soft_dice_loss")?;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    let mut sum_pt = 0.0f64;
    for (&p, &t) in probs.data().iter().zip(targets.data()) {
        sum_p += p as f64;
        sum_t += t as f64;
        sum_pt += p as f64 * t as f64;
    }
    Ok(1.0 - (2.0 * sum_pt + eps) / (sum_p + sum_t + eps))
}

/// Focal loss, pixel mean, probabilities clamped to [1e-7, 1-1e-7].
pub fn focal_loss(probs: &Grid<f32>, targets: &Grid<u8>, gamma_f: f64, alpha: f64) -> Result<f64> {
    check_shapes(probs, targets, "focal_loss")?;
    let mut acc = 0.0f64;
    for (&p, &t) in probs.data().iter().zip(targets.data()) {
        acc += kernel::focal_value(pt_of(p as f64, t), gamma_f, alpha);
    }
    Ok(acc / probs.data().len() as f64)
}

fn task_loss(probs: &Grid<f32>, target: &Grid<u8>, aux: &[Grid<f32>], cfg: &LossConfig) -> Result<f64> {
    let main = smooth_truncated_loss(probs, target, cfg.st_gamma)?
        + cfg.dice_weight * soft_dice_loss(probs, target, cfg.dice_eps)?;
    let mut aux_sum = 0.0;
    for a in aux {
        aux_sum += smooth_truncated_loss(a, target, cfg.st_gamma)?
            + cfg.dice_weight * soft_dice_loss(a, target, cfg.dice_eps)?;
    }
    let aux_mean = if aux.is_empty() {
        0.0
    } else {
        aux_sum / aux.len() as f64
    };
    Ok(main + cfg.aux_weight * aux_mean)
}

/// Full stage-1 loss: for each task, ST + dice_weight*Dice on the main head
/// plus aux_weight times the mean of the same combination over the aux heads.
pub fn stage1_loss(
    out: &TafeOutput,
    seg_gt: &Grid<u8>,
    bnd_gt: &Grid<u8>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(task_loss(&out.seg_prob, seg_gt, &out.aux_seg, cfg)?
        + task_loss(&out.bnd_prob, bnd_gt, &out.aux_bnd, cfg)?)
}

/// Binary mask as a [1, h, w] tensor for loss targets.
pub fn mask_tensor<T: Elem>(mask: &Grid<u8>) -> Tensor<T> {
    Tensor::from_vec(
        &[1, mask.h(), mask.w()],
        mask.data()
            .iter()
            .map(|&v| if v != 0 { T::ONE } else { T::ZERO })
            .collect(),
    )
}

/// Tape-side stage-1 loss; same composition as [`stage1_loss`].
pub fn stage1_loss_graph<T: Elem>(
    tape: &mut Tape<T>,
    out: &TafeGraphOut<T>,
    seg_gt: &Rc<Tensor<T>>,
    bnd_gt: &Rc<Tensor<T>>,
    cfg: &LossConfig,
) -> Var<T> {
    let mut parts: Vec<(Var<T>, T)> = Vec::new();
    let gamma = T::from_f64(cfg.st_gamma);
    let eps = T::from_f64(cfg.dice_eps);
    let dice_w = T::from_f64(cfg.dice_weight);
    for (main, aux, gt) in [
        (&out.seg, &out.aux_seg, seg_gt),
        (&out.bnd, &out.aux_bnd, bnd_gt),
    ] {
        let st = tape.st_loss(main, gt, gamma);
        let dice = tape.dice_loss(main, gt, eps);
        parts.push((st, T::ONE));
        parts.push((dice, dice_w));
        if !aux.is_empty() {
            let aw = T::from_f64(cfg.aux_weight / aux.len() as f64);
            for a in aux.iter() {
                let st = tape.st_loss(a, gt, gamma);
                let dice = tape.dice_loss(a, gt, eps);
                parts.push((st, aw));
                parts.push((dice, aw * dice_w));
            }
        }
    }
    tape.weighted_sum(&parts)
}
