//! Proposal-to-patch conversion for stage 2: square crop with margin, size
//! classification, probability masking around the proposal, bilinear resize
//! to the class target size.

use crate::core::{resize_bilinear, Grid, ProbabilityPair, Proposal, RgbImage};
use crate::nn::Tensor;
use crate::{Error, Result};

/// Patch extraction knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchParams {
    /// Minimal margin around the proposal box, pixels.
    pub margin: usize,
    /// Small/large split threshold and small target side S_S.
    pub s_small: usize,
    /// Large target side S_L.
    pub s_large: usize,
    /// Chebyshev dilation of the proposal mask before probability masking.
    pub mask_dilation: usize,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            margin: 12,
            s_small: 48,
            s_large: 176,
            mask_dilation: 2,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.s_small == 0 || self.s_large == 0 || self.margin == 0 {
            return Err(Error::InvalidArgument("patch params must be positive".into()));
        }
        if self.s_small >= self.s_large {
            return Err(Error::InvalidArgument(format!(
                "s_small {} must be < s_large {}",
                self.s_small, self.s_large
            )));
        }
        if self.s_small % 8 != 0 || self.s_large % 8 != 0 {
            return Err(Error::InvalidArgument(
                "patch target sides must be divisible by 8".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    Small,
    Large,
}

/// Square crop window in source coordinates; may extend past the image and
/// is zero-padded at extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub r0: i64,
    pub c0: i64,
    pub side: usize,
}

/// One unit of stage-2 work: the 5-channel resized crop around a proposal.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub proposal_id: u32,
    pub window: Window,
    pub size_class: SizeClass,
    /// [5, S, S]: R, G, B, masked seg prob, masked bnd prob.
    pub input: Tensor<f32>,
    /// window side / target side.
    pub scale: f64,
}

/// Square window of side max(bbox) + 2*margin around the proposal box,
/// shifted to maximize overlap with the image.
pub fn crop_window(proposal: &Proposal, image_shape: (usize, usize), margin: usize) -> Window {
    let (h, w) = image_shape;
    let side = proposal.bbox.h.max(proposal.bbox.w) + 2 * margin;
    let place = |b0: usize, blen: usize, extent: usize| -> i64 {
        let ideal = b0 as i64 + (blen as i64 - side as i64) / 2;
        if side <= extent {
            ideal.clamp(0, (extent - side) as i64)
        } else {
            -((side - extent) as i64) / 2
        }
    };
    Window {
        r0: place(proposal.bbox.r0, proposal.bbox.h, h),
        c0: place(proposal.bbox.c0, proposal.bbox.w, w),
        side,
    }
}

/// Small iff the window side is at most S_S.
pub fn classify_size(side: usize, params: &PatchParams) -> SizeClass {
    if side <= params.s_small {
        SizeClass::Small
    } else {
        SizeClass::Large
    }
}

pub fn target_side(class: SizeClass, params: &PatchParams) -> usize {
    match class {
        SizeClass::Small => params.s_small,
        SizeClass::Large => params.s_large,
    }
}

/// Whether full-image pixel (r, c) lies within Chebyshev `dilation` of the
/// proposal mask.
fn in_dilated_proposal(proposal: &Proposal, r: i64, c: i64, dilation: usize) -> bool {
    let d = dilation as i64;
    for dr in -d..=d {
        for dc in -d..=d {
            let (pr, pc) = (r + dr, c + dc);
            if pr < 0 || pc < 0 {
                continue;
            }
            if proposal.contains(pr as usize, pc as usize) {
                return true;
            }
        }
    }
    false
}

/// Zeroes probabilities outside the proposal mask dilated by `mask_dilation`
/// (full-image form of the stage-2 masking).
pub fn mask_probabilities(
    pp: &ProbabilityPair,
    proposal: &Proposal,
    mask_dilation: usize,
) -> ProbabilityPair {
    let (h, w) = pp.shape();
    let mut seg = Grid::filled(h, w, 0.0f32);
    let mut bnd = Grid::filled(h, w, 0.0f32);
    for r in 0..h {
        for c in 0..w {
            if in_dilated_proposal(proposal, r as i64, c as i64, mask_dilation) {
                seg.set(r, c, pp.seg.get(r, c));
                bnd.set(r, c, pp.bnd.get(r, c));
            }
        }
    }
    ProbabilityPair { seg, bnd }
}

/// Crops one channel on the window with zero padding.
fn crop_channel(
    get: impl Fn(usize, usize) -> f32,
    shape: (usize, usize),
    window: &Window,
) -> Grid<f32> {
    let (h, w) = shape;
    let mut out = Grid::filled(window.side, window.side, 0.0f32);
    for r in 0..window.side {
        let sr = window.r0 + r as i64;
        if sr < 0 || sr as usize >= h {
            continue;
        }
        for c in 0..window.side {
            let sc = window.c0 + c as i64;
            if sc < 0 || sc as usize >= w {
                continue;
            }
            out.set(r, c, get(sr as usize, sc as usize));
        }
    }
    out
}

/// Builds the 5-channel patch for one proposal: image RGB plus the two
/// probability maps masked to the dilated proposal, all resized to the size
/// class target.
pub fn extract_patch(
    img: &RgbImage,
    pp: &ProbabilityPair,
    proposal: &Proposal,
    params: &PatchParams,
) -> Result<PatchRecord> {
    if proposal.area() == 0 {
        return Err(Error::InvalidArgument(format!(
            "proposal {} has an empty mask",
            proposal.id
        )));
    }
    if (img.h(), img.w()) != pp.shape() {
        return Err(Error::shape("extract_patch", (img.h(), img.w()), pp.shape()));
    }
    let window = crop_window(proposal, (img.h(), img.w()), params.margin);
    let class = classify_size(window.side, params);
    let s = target_side(class, params);
    let shape = (img.h(), img.w());

    let mut channels: Vec<Grid<f32>> = Vec::with_capacity(5);
    for ch in 0..3 {
        channels.push(crop_channel(|r, c| img.pixel(r, c)[ch], shape, &window));
    }
    for source in [&pp.seg, &pp.bnd] {
        let masked = crop_channel(
            |r, c| {
                if in_dilated_proposal(proposal, r as i64, c as i64, params.mask_dilation) {
                    source.get(r, c)
                } else {
                    0.0
                }
            },
            shape,
            &window,
        );
        channels.push(masked);
    }

    let mut data = Vec::with_capacity(5 * s * s);
    for ch in channels {
        let resized = resize_bilinear(&ch, s, s);
        data.extend_from_slice(resized.data());
    }
    Ok(PatchRecord {
        proposal_id: proposal.id,
        window,
        size_class: class,
        input: Tensor::from_vec(&[5, s, s], data),
        scale: window.side as f64 / s as f64,
    })
}

/// Debug dump: the five channels of a patch side by side as one grayscale
/// PNG strip, each channel min-max scaled.
pub fn dump_patch_strip(path: &std::path::Path, record: &PatchRecord) -> Result<()> {
    let (ch, s, _) = record.input.dims3();
    let mut strip = vec![0u8; s * ch * s];
    for c in 0..ch {
        let plane = &record.input.data()[c * s * s..(c + 1) * s * s];
        let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-6);
        for r in 0..s {
            for x in 0..s {
                strip[r * ch * s + c * s + x] =
                    (((plane[r * s + x] - lo) / span) * 255.0).round() as u8;
            }
        }
    }
    let buf: image::ImageBuffer<image::Luma<u8>, Vec<u8>> =
        image::ImageBuffer::from_raw((ch * s) as u32, s as u32, strip).expect("strip size");
    buf.save(path).map_err(|e| Error::image(path, e))
}
