//! Dataset IO, stain/intensity normalization, augmentation and the synthetic
//! nucleus generator that makes desk-scale end-to-end runs possible.

mod augment;
mod io;
mod stain;
mod synth;

pub use augment::{augment, gaussian_blur_grid, AugmentConfig};
pub use io::{
    load_dataset, load_image, load_instance_map, save_image, save_instance_map, save_predictions,
};
pub use stain::{
    apply_stain_stats, channel_stats, stain_normalize, stain_stats, zscore_normalize, StainStats,
};
pub use synth::synth_generate;

use crate::core::{BoundaryMask, InstanceMap, RgbImage, SemanticMask};

/// One training/eval example: image, instance ground truth and the derived
/// stage-1 targets at a chosen boundary width.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    pub image: RgbImage,
    pub instances: InstanceMap,
    pub boundary_width: usize,
    pub seg: SemanticMask,
    pub bnd: BoundaryMask,
}

impl Sample {
    pub fn new(stem: String, image: RgbImage, instances: InstanceMap, boundary_width: usize) -> Self {
        assert_eq!(
            (image.h(), image.w()),
            (instances.h(), instances.w()),
            "image/instance shape mismatch"
        );
        let instances = instances.relabel_contiguous();
        let seg = instances.to_semantic();
        let bnd = instances.to_boundary(boundary_width);
        Sample {
            stem,
            image,
            instances,
            boundary_width,
            seg,
            bnd,
        }
    }

    /// Re-derives the targets at a different boundary width.
    pub fn with_boundary_width(&self, width: usize) -> Sample {
        Sample::new(
            self.stem.clone(),
            self.image.clone(),
            self.instances.clone(),
            width,
        )
    }
}
