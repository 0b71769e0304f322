//! Stage-1 post-processing: binarize the probability pair, subtract the
//! boundary from the semantic mask, split into connected components, drop
//! tiny components and grow each survivor back by a per-instance dilation.

use crate::core::{BBox, BoundaryMask, Grid, InstanceMap, ProbabilityPair, Proposal, SemanticMask};
use crate::{Error, Result};

/// Knobs of the boundary-subtraction post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocParams {
    pub seg_thresh: f32,
    pub bnd_thresh: f32,
    pub min_area: usize,
    pub dilation_radius: usize,
    pub connectivity: Connectivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Default for PostprocParams {
    fn default() -> Self {
        PostprocParams {
            seg_thresh: 0.5,
            bnd_thresh: 0.5,
            min_area: 20,
            dilation_radius: 2,
            connectivity: Connectivity::Four,
        }
    }
}

/// seg AND NOT bnd.
pub fn subtract_boundary(seg: &SemanticMask, bnd: &BoundaryMask) -> Result<SemanticMask> {
    if !seg.grid().same_shape(bnd.grid()) {
        return Err(Error::shape(
            "subtract_boundary",
            seg.grid().shape(),
            bnd.grid().shape(),
        ));
    }
    let data = seg
        .grid()
        .data()
        .iter()
        .zip(bnd.grid().data())
        .map(|(&s, &b)| u8::from(s != 0 && b == 0))
        .collect();
    Ok(SemanticMask(Grid::from_vec(
        seg.grid().h(),
        seg.grid().w(),
        data,
    )))
}

/// Maximal connected foreground components, labeled 1..N in row-major
/// first-occurrence order.
pub fn connected_components(mask: &SemanticMask, connectivity: Connectivity) -> InstanceMap {
    let (h, w) = mask.grid().shape();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut next = 0u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let neighbors: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for r in 0..h {
        for c in 0..w {
            if mask.grid().get(r, c) == 0 || labels.get(r, c) != 0 {
                continue;
            }
            next += 1;
            labels.set(r, c, next);
            stack.push((r, c));
            while let Some((cr, cc)) = stack.pop() {
                for &(dr, dc) in neighbors {
                    let (nr, nc) = (cr as i64 + dr, cc as i64 + dc);
                    if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.grid().get(nr, nc) != 0 && labels.get(nr, nc) == 0 {
                        labels.set(nr, nc, next);
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }
    InstanceMap(labels)
}

/// Removes instances with fewer than `min_area` pixels and relabels.
pub fn remove_small(m: &InstanceMap, min_area: usize) -> InstanceMap {
    let areas = m.areas();
    let out = m.grid().map(|v| {
        if v != 0 && areas[v as usize] < min_area {
            0
        } else {
            v
        }
    });
    InstanceMap(out).relabel_contiguous()
}

/// Grows every instance: each background pixel within Chebyshev distance
/// `radius` of an instance joins the nearest one (ties to the lower id);
/// instance pixels are never reassigned.
pub fn dilate_instances(m: &InstanceMap, radius: usize) -> InstanceMap {
    if radius == 0 {
        return m.clone();
    }
    let r = radius as i64;
    let mut out = m.grid().clone();
    for (row, col, v) in m.grid().iter_pixels() {
        if v != 0 {
            continue;
        }
        // (distance, id) lexicographic minimum over the Chebyshev window.
        let mut best: Option<(i64, u32)> = None;
        for d in 1..=r {
            // Ring at Chebyshev distance d; the first ring with a hit wins,
            // with the lowest label breaking ties inside the ring.
            let mut ring_best: Option<u32> = None;
            for dr in -d..=d {
                for dc in -d..=d {
                    if dr.abs().max(dc.abs()) != d {
                        continue;
                    }
                    if let Some(q) = m.grid().get_signed(row as i64 + dr, col as i64 + dc) {
                        if q != 0 && ring_best.map_or(true, |b| q < b) {
                            ring_best = Some(q);
                        }
                    }
                }
            }
            if let Some(id) = ring_best {
                best = Some((d, id));
                break;
            }
        }
        if let Some((_, id)) = best {
            out.set(row, col, id);
        }
    }
    InstanceMap(out)
}

/// Full post-processing chain from probability maps to instance proposals.
pub fn propose(pp: &ProbabilityPair, params: &PostprocParams) -> Result<InstanceMap> {
    let seg = SemanticMask(pp.seg.map(|v| u8::from(v > params.seg_thresh)));
    let bnd = BoundaryMask(pp.bnd.map(|v| u8::from(v > params.bnd_thresh)));
    let core = subtract_boundary(&seg, &bnd)?;
    let components = connected_components(&core, params.connectivity);
    let kept = remove_small(&components, params.min_area);
    Ok(dilate_instances(&kept, params.dilation_radius))
}

/// The instances of a label map as standalone [`Proposal`] values, ascending id.
pub fn proposals_from_map(m: &InstanceMap) -> Vec<Proposal> {
    let m = m.relabel_contiguous();
    let n = m.max_label() as usize;
    let mut boxes: Vec<Option<BBox>> = vec![None; n];
    for (r, c, v) in m.grid().iter_pixels() {
        if v == 0 {
            continue;
        }
        let b = &mut boxes[v as usize - 1];
        *b = Some(match *b {
            None => BBox { r0: r, c0: c, h: 1, w: 1 },
            Some(bb) => {
                let r0 = bb.r0.min(r);
                let c0 = bb.c0.min(c);
                let r1 = (bb.r0 + bb.h - 1).max(r);
                let c1 = (bb.c0 + bb.w - 1).max(c);
                BBox {
                    r0,
                    c0,
                    h: r1 - r0 + 1,
                    w: c1 - c0 + 1,
                }
            }
        });
    }
    let mut out = Vec::with_capacity(n);
    for (i, bbox) in boxes.into_iter().enumerate() {
        let bbox = bbox.expect("relabeled map has no empty labels");
        let id = i as u32 + 1;
        let mut mask = Grid::filled(bbox.h, bbox.w, 0u8);
        for r in 0..bbox.h {
            for c in 0..bbox.w {
                if m.grid().get(bbox.r0 + r, bbox.c0 + c) == id {
                    mask.set(r, c, 1);
                }
            }
        }
        out.push(Proposal { id, bbox, mask });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&[u8]]) -> SemanticMask {
        let h = rows.len();
        let w = rows[0].len();
        SemanticMask(Grid::from_vec(
            h,
            w,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        ))
    }

    #[test]
    fn subtract_boundary_pointwise() {
        let seg = mask_from(&[&[1, 1, 0], &[1, 1, 1]]);
        let bnd = BoundaryMask(Grid::from_vec(2, 3, vec![0, 1, 0, 1, 0, 1]));
        let out = subtract_boundary(&seg, &bnd).unwrap();
        assert_eq!(out.grid().data(), &[1, 0, 0, 0, 1, 0]);

        let zero = BoundaryMask(Grid::filled(2, 3, 0u8));
        assert_eq!(subtract_boundary(&seg, &zero).unwrap(), seg);

        let all = BoundaryMask(Grid::filled(2, 3, 1u8));
        assert!(subtract_boundary(&seg, &all)
            .unwrap()
            .grid()
            .data()
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn components_respect_connectivity() {
        // Two squares touching only diagonally.
        let m = mask_from(&[
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
        ]);
        assert_eq!(connected_components(&m, Connectivity::Four).max_label(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).max_label(), 1);

        let separated = mask_from(&[&[1, 1, 0, 1], &[1, 1, 0, 1]]);
        assert_eq!(
            connected_components(&separated, Connectivity::Four).max_label(),
            2
        );
        let full = mask_from(&[&[1, 1], &[1, 1]]);
        assert_eq!(connected_components(&full, Connectivity::Four).max_label(), 1);
    }

    #[test]
    fn remove_small_filters_by_area() {
        let m = connected_components(
            &mask_from(&[
                &[1, 1, 0, 1, 0, 0],
                &[1, 1, 0, 1, 0, 1],
                &[0, 0, 0, 1, 0, 0],
            ]),
            Connectivity::Four,
        );
        // Areas: 4, 3, 1.
        let kept = remove_small(&m, 4);
        assert_eq!(kept.max_label(), 1);
        let all = remove_small(&m, 0);
        assert_eq!(all.max_label(), 3);
        // Survivor set equals a brute-force filter by area.
        let areas = m.areas();
        let survivors: Vec<u32> = (1..=m.max_label())
            .filter(|&id| areas[id as usize] >= 2)
            .collect();
        assert_eq!(remove_small(&m, 2).max_label() as usize, survivors.len());
    }

    #[test]
    fn dilate_radius_zero_is_identity() {
        let m = InstanceMap(Grid::from_vec(2, 2, vec![0, 1, 0, 0]));
        assert_eq!(dilate_instances(&m, 0), m);
    }

    #[test]
    fn dilate_square_grows_to_block() {
        // Single 2x2 instance at (2,2) in a 6x6 grid; radius 1 -> 4x4 block.
        let mut g = Grid::filled(6, 6, 0u32);
        for r in 2..4 {
            for c in 2..4 {
                g.set(r, c, 1);
            }
        }
        let out = dilate_instances(&InstanceMap(g), 1);
        for (r, c, v) in out.grid().iter_pixels() {
            let inside = (1..5).contains(&r) && (1..5).contains(&c);
            assert_eq!(v == 1, inside, "at ({r},{c})");
        }
    }

    #[test]
    fn dilate_keeps_instances_disjoint_with_brute_force_assignment() {
        // Two instances 3 px apart, radius 1: grown maps stay disjoint and
        // match an independent per-pixel nearest-instance computation.
        let mut g = Grid::filled(5, 8, 0u32);
        g.set(2, 1, 1);
        g.set(2, 2, 1);
        g.set(2, 5, 2);
        g.set(2, 6, 2);
        let m = InstanceMap(g);
        let out = dilate_instances(&m, 1);
        for (r, c, v) in out.grid().iter_pixels() {
            // Brute force: Chebyshev distance to each instance.
            let mut d1 = i64::MAX;
            let mut d2 = i64::MAX;
            for (rr, cc, q) in m.grid().iter_pixels() {
                let d = (rr as i64 - r as i64).abs().max((cc as i64 - c as i64).abs());
                if q == 1 {
                    d1 = d1.min(d);
                }
                if q == 2 {
                    d2 = d2.min(d);
                }
            }
            let expect = if m.grid().get(r, c) != 0 {
                m.grid().get(r, c)
            } else if d1.min(d2) > 1 {
                0
            } else if d1 <= d2 {
                1
            } else {
                2
            };
            assert_eq!(v, expect, "at ({r},{c})");
        }
    }

    #[test]
    fn dilate_preserves_label_set() {
        let mut g = Grid::filled(6, 6, 0u32);
        g.set(1, 1, 1);
        g.set(4, 4, 2);
        let out = dilate_instances(&InstanceMap(g), 2);
        let mut labels: Vec<u32> = out.grid().data().iter().copied().filter(|&v| v > 0).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, vec![1, 2]);
    }

    #[test]
    fn propose_empty_when_seg_below_threshold() {
        let pp = ProbabilityPair::new(Grid::filled(8, 8, 0.2f32), Grid::filled(8, 8, 0.0f32))
            .unwrap();
        let out = propose(&pp, &PostprocParams::default()).unwrap();
        assert_eq!(out.max_label(), 0);
    }

    #[test]
    fn propose_hand_built_two_nucleus_fixture() {
        // 12x12 pair: two 4x4 nuclei separated by a column, exact probability
        // maps, width-1 boundaries, radius 1, min_area 0.
        let mut gt = Grid::filled(12, 12, 0u32);
        for r in 2..6 {
            for c in 2..6 {
                gt.set(r, c, 1);
            }
            for c in 7..11 {
                gt.set(r, c, 2);
            }
        }
        let gt = InstanceMap(gt);
        let seg = gt.to_semantic();
        let bnd = gt.to_boundary(1);
        let pp = ProbabilityPair::new(
            seg.grid().map(|v| v as f32),
            bnd.grid().map(|v| v as f32),
        )
        .unwrap();
        let params = PostprocParams {
            min_area: 0,
            dilation_radius: 1,
            ..PostprocParams::default()
        };
        let out = propose(&pp, &params).unwrap();
        assert_eq!(out.max_label(), 2);
        // The recovered partition equals the ground truth exactly.
        assert_eq!(out.grid().data(), gt.grid().data());
    }

    #[test]
    fn propose_monotone_seed_regions() {
        // Raising seg probabilities never deletes an existing component's
        // seed region (the post-subtraction foreground only grows).
        let mut seg = Grid::filled(8, 8, 0.0f32);
        for r in 2..5 {
            for c in 2..5 {
                seg.set(r, c, 0.9);
            }
        }
        let bnd = Grid::filled(8, 8, 0.0f32);
        let seg_up = seg.map(|v| if v == 0.0 { 0.8 } else { v });
        let before = {
            let s = SemanticMask(seg.map(|v| u8::from(v > 0.5)));
            let b = BoundaryMask(bnd.map(|v| u8::from(v > 0.5)));
            subtract_boundary(&s, &b).unwrap()
        };
        let after = {
            let s = SemanticMask(seg_up.map(|v| u8::from(v > 0.5)));
            let b = BoundaryMask(bnd.map(|v| u8::from(v > 0.5)));
            subtract_boundary(&s, &b).unwrap()
        };
        for i in 0..before.grid().data().len() {
            assert!(after.grid().data()[i] >= before.grid().data()[i]);
        }
    }

    #[test]
    fn proposals_from_map_masks_and_boxes() {
        let mut g = Grid::filled(5, 6, 0u32);
        g.set(0, 0, 3);
        g.set(0, 1, 3);
        for r in 2..5 {
            g.set(r, 4, 8);
        }
        let props = proposals_from_map(&InstanceMap(g));
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].id, 1);
        assert_eq!(props[0].bbox, BBox { r0: 0, c0: 0, h: 1, w: 2 });
        assert_eq!(props[0].area(), 2);
        assert_eq!(props[1].bbox, BBox { r0: 2, c0: 4, h: 3, w: 1 });
        assert!(props[1].contains(3, 4));
        assert!(!props[1].contains(3, 3));
    }
}
