//! Domain types: images, instance maps, masks, probability pairs, proposals.

use super::grid::{BBox, Grid};
use crate::{Error, Result};

/// RGB image with real-valued channels in [0, 1], HWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    h: usize,
    w: usize,
    /// h*w*3 values, pixel-interleaved (r, g, b).
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 8x8, got {h}x{w}"
            )));
        }
        if data.len() != h * w * 3 {
            return Err(Error::shape("RgbImage::new", data.len(), h * w * 3));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Ok(RgbImage { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        RgbImage { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.w + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.w + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// One channel as a grid (0 = r, 1 = g, 2 = b).
    pub fn channel(&self, ch: usize) -> Grid<f32> {
        assert!(ch < 3);
        Grid::from_vec(
            self.h,
            self.w,
            (0..self.h * self.w).map(|i| self.data[i * 3 + ch]).collect(),
        )
    }
}

/// Binary nucleus-vs-background mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask(pub Grid<u8>);

/// Binary instance-boundary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMask(pub Grid<u8>);

impl SemanticMask {
    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }
}

impl BoundaryMask {
    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }
}

/// Label map: 0 = background, k = instance k.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMap(pub Grid<u32>);

impl InstanceMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        InstanceMap(Grid::filled(h, w, 0))
    }

    pub fn grid(&self) -> &Grid<u32> {
        &self.0
    }

    pub fn grid_mut(&mut self) -> &mut Grid<u32> {
        &mut self.0
    }

    pub fn h(&self) -> usize {
        self.0.h()
    }

    pub fn w(&self) -> usize {
        self.0.w()
    }

    /// Largest label present (0 for an empty map). Equals the instance count
    /// once labels are contiguous.
    pub fn max_label(&self) -> u32 {
        self.0.data().iter().copied().max().unwrap_or(0)
    }

    /// Renames labels to {1..N} in row-major first-occurrence order. The
    /// pixel partition is unchanged.
    pub fn relabel_contiguous(&self) -> InstanceMap {
        let mut mapping: Vec<u32> = vec![0; self.max_label() as usize + 1];
        let mut next = 0u32;
        let mut out = Grid::filled(self.h(), self.w(), 0u32);
        for (i, &v) in self.0.data().iter().enumerate() {
            if v == 0 {
                continue;
            }
            if mapping[v as usize] == 0 {
                next += 1;
                mapping[v as usize] = next;
            }
            out.data_mut()[i] = mapping[v as usize];
        }
        InstanceMap(out)
    }

    /// Foreground indicator: 1 wherever the label is nonzero.
    pub fn to_semantic(&self) -> SemanticMask {
        SemanticMask(self.0.map(|v| u8::from(v > 0)))
    }

    /// Instance-boundary mask: a pixel of instance k is boundary iff some
    /// in-image pixel within Chebyshev distance `width` is not part of k
    /// (background or another instance). Computed per instance, so the
    /// interface between two touching instances is boundary on both sides.
    pub fn to_boundary(&self, width: usize) -> BoundaryMask {
        assert!(width >= 1, "boundary width must be >= 1");
        let (h, w) = self.0.shape();
        let r = width as i64;
        let mut out = Grid::filled(h, w, 0u8);
        for (row, col, v) in self.0.iter_pixels() {
            if v == 0 {
                continue;
            }
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    if let Some(q) = self.0.get_signed(row as i64 + dr, col as i64 + dc) {
                        if q != v {
                            out.set(row, col, 1);
                            break 'scan;
                        }
                    }
                }
            }
        }
        BoundaryMask(out)
    }

    /// Per-instance pixel counts, indexed by label (index 0 = background).
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.max_label() as usize + 1];
        for &v in self.0.data() {
            areas[v as usize] += 1;
        }
        areas
    }
}

/// Aligned semantic-segmentation and boundary probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityPair {
    pub seg: Grid<f32>,
    pub bnd: Grid<f32>,
}

impl ProbabilityPair {
    pub fn new(seg: Grid<f32>, bnd: Grid<f32>) -> Result<Self> {
        if !seg.same_shape(&bnd) {
            return Err(Error::shape("ProbabilityPair::new", seg.shape(), bnd.shape()));
        }
        let in_range = |g: &Grid<f32>| g.data().iter().all(|&v| (0.0..=1.0).contains(&v));
        if !in_range(&seg) || !in_range(&bnd) {
            return Err(Error::InvalidArgument(
                "probability values must lie in [0,1]".into(),
            ));
        }
        Ok(ProbabilityPair { seg, bnd })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.seg.shape()
    }
}

/// One connected candidate instance: mask over its bounding box plus id.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub id: u32,
    pub bbox: BBox,
    /// Binary mask of shape (bbox.h, bbox.w).
    pub mask: Grid<u8>,
}

impl Proposal {
    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0).count()
    }

    /// Whether the full-image pixel (r, c) belongs to the proposal.
    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.bbox.contains(r, c) && self.mask.get(r - self.bbox.r0, c - self.bbox.c0) != 0
    }
}
