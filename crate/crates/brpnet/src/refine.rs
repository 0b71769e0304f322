//! Stage-2 proposal-wise segmentation: two identical dense-block
//! encoder-decoder networks (one per size class), IoU-based label
//! construction for training, and paste-back assembly of the final
//! instance map.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::core::{resize_bilinear, resize_nearest, Grid, InstanceMap, Proposal};
use crate::nn::{
    BnMode, BnReluConv, Conv2d, DenseBlock, Elem, ParamRef, Tape, Tensor, TensorCell, Transition,
    Var,
};
use crate::patching::{PatchParams, PatchRecord, SizeClass, Window};
use crate::{Error, Result};

/// Architecture of one proposal-wise segmentation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineNetConfig {
    pub growth_rates: [usize; 4],
    pub layers_per_block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for RefineNetConfig {
    fn default() -> Self {
        RefineNetConfig {
            growth_rates: [16, 32, 64, 128],
            layers_per_block: 4,
            in_channels: 5,
            out_channels: 1,
        }
    }
}

impl RefineNetConfig {
    /// Reduced config for desk-scale runs.
    pub fn desk() -> Self {
        RefineNetConfig {
            growth_rates: [4, 8, 16, 32],
            layers_per_block: 2,
            ..RefineNetConfig::default()
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "kind = refine\ngrowth_rates = {}\nlayers_per_block = {}\nin_channels = {}\nout_channels = {}\n",
            self.growth_rates.map(|g| g.to_string()).join(","),
            self.layers_per_block,
            self.in_channels,
            self.out_channels
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RefineNetConfig::default();
        let mut seen = false;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "growth_rates" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad growth {p}"))))
                        .collect::<Result<_>>()?;
                    if parts.len() != 4 {
                        return Err(Error::Config("growth_rates needs 4 entries".into()));
                    }
                    cfg.growth_rates = [parts[0], parts[1], parts[2], parts[3]];
                    seen = true;
                }
                "layers_per_block" => {
                    cfg.layers_per_block =
                        v.parse().map_err(|_| Error::Config("bad layers_per_block".into()))?
                }
                "in_channels" => {
                    cfg.in_channels = v.parse().map_err(|_| Error::Config("bad in_channels".into()))?
                }
                "out_channels" => {
                    cfg.out_channels = v.parse().map_err(|_| Error::Config("bad out_channels".into()))?
                }
                _ => {}
            }
        }
        if !seen {
            return Err(Error::Config("incomplete refine config".into()));
        }
        Ok(cfg)
    }
}

/// Encoder of four dense blocks with 2× downsampling after blocks 1-3 and a
/// mirrored decoder with skip connections from the matching scales.
pub struct RefineNet<T: Elem> {
    pub cfg: RefineNetConfig,
    stem: Conv2d<T>,
    blocks: Vec<DenseBlock<T>>,
    transitions: Vec<Transition<T>>,
    dec_units: Vec<BnReluConv<T>>,
    head: Conv2d<T>,
    /// Channels at each encoder stage, used to wire the decoder.
    skip_channels: [usize; 3],
}

impl<T: Elem> RefineNet<T> {
    pub fn new(cfg: &RefineNetConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let rng = &mut rng;
        let l = cfg.layers_per_block;
        let c0 = 2 * cfg.growth_rates[0];
        let stem = Conv2d::new(rng, cfg.in_channels, c0, 3);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut ch = c0;
        let mut block_out = [0usize; 4];
        for i in 0..4 {
            blocks.push(DenseBlock::new(rng, ch, l, cfg.growth_rates[i]));
            ch += l * cfg.growth_rates[i];
            block_out[i] = ch;
            if i < 3 {
                transitions.push(Transition::new(rng, ch));
                ch /= 2;
            }
        }
        let skip_channels = [block_out[2], block_out[1], block_out[0]];
        let mut dec_units = Vec::new();
        let mut cur = block_out[3];
        for &skip in &skip_channels {
            dec_units.push(BnReluConv::new(rng, cur + skip, skip, 3));
            cur = skip;
        }
        let head = Conv2d::new(rng, cur, cfg.out_channels, 1);
        RefineNet {
            cfg: cfg.clone(),
            stem,
            blocks,
            transitions,
            dec_units,
            head,
            skip_channels,
        }
    }

    /// Probability map of the same spatial size as the input.
    ///
    /// Batch norm always uses the current patch's statistics: patches are
    /// processed one at a time and vary widely in content, so running-buffer
    /// normalization at eval would not match what training optimized.
    /// `train` only controls running-buffer updates.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, train: bool) -> Result<Var<T>> {
        let (c, h, w) = x.val.dims3();
        if c != self.cfg.in_channels {
            return Err(Error::InvalidArgument(format!(
                "refine net expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Indivisible { h, w, divisor: 8 });
        }
        let mode = BnMode::BatchStats {
            update_running: train,
        };
        let mut cur = self.stem.forward(tape, x);
        let mut skips: Vec<Var<T>> = Vec::with_capacity(3);
        for i in 0..4 {
            cur = self.blocks[i].forward_mode(tape, &cur, mode);
            if i < 3 {
                skips.push(cur.clone());
                cur = self.transitions[i].forward_mode(tape, &cur, mode);
            }
        }
        for (unit, skip) in self.dec_units.iter().zip(skips.iter().rev()) {
            let (_, sh, sw) = skip.val.dims3();
            let up = tape.upsample_bilinear(&cur, sh, sw);
            let cat = tape.concat_c(&[&up, skip]);
            cur = unit.forward_mode(tape, &cat, mode);
        }
        let logits = self.head.forward(tape, &cur);
        Ok(tape.sigmoid(&logits))
    }

    /// Inference on one patch without gradient tracking.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Grid<f32>> {
        let mut tape = Tape::new(false);
        let out = self.forward(&mut tape, &Var::constant(input.clone()), false)?;
        let (_, h, w) = out.val.dims3();
        Ok(Grid::from_vec(
            h,
            w,
            out.val.data().iter().map(|&v| v.to_f64() as f32).collect(),
        ))
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        for t in &self.transitions {
            p.extend(t.params());
        }
        for u in &self.dec_units {
            p.extend(u.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn state(&self) -> Vec<(String, ParamRef<T>)> {
        let mut s = self.stem.state("stem");
        for (i, b) in self.blocks.iter().enumerate() {
            s.extend(b.state(&format!("block{i}")));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            s.extend(t.state(&format!("trans{i}")));
        }
        for (i, u) in self.dec_units.iter().enumerate() {
            s.extend(u.state(&format!("dec{i}")));
        }
        s.extend(self.head.state("head"));
        s
    }

    pub fn buffers(&self) -> Vec<(String, TensorCell<T>)> {
        let mut s = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            s.extend(b.buffers(&format!("block{i}")));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            s.extend(t.buffers(&format!("trans{i}")));
        }
        for (i, u) in self.dec_units.iter().enumerate() {
            s.extend(u.buffers(&format!("dec{i}")));
        }
        s
    }

    pub fn skip_channels(&self) -> [usize; 3] {
        self.skip_channels
    }
}

/// Training-label construction result for one proposal.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub proposal_id: u32,
    pub matched_gt_id: Option<u32>,
    pub iou: f64,
    /// Binary S×S label aligned with the proposal's patch.
    pub label: Grid<u8>,
}

/// Matches a proposal against every GT instance by IoU. Strictly above `tau`
/// the label is the matched instance restricted to the window (nearest
/// resize to `target` pixels); otherwise the proposal counts as a false
/// positive and the label stays all-zero.
pub fn match_proposal(
    proposal: &Proposal,
    gt: &InstanceMap,
    tau: f64,
    window: &Window,
    target: usize,
) -> MatchResult {
    let areas = gt.areas();
    let n = gt.max_label() as usize;
    let mut inter = vec![0u64; n + 1];
    let mut p_area = 0u64;
    for r in 0..proposal.bbox.h {
        for c in 0..proposal.bbox.w {
            if proposal.mask.get(r, c) == 0 {
                continue;
            }
            p_area += 1;
            let label = gt.grid().get(proposal.bbox.r0 + r, proposal.bbox.c0 + c);
            if label > 0 {
                inter[label as usize] += 1;
            }
        }
    }
    let mut best_id = 0u32;
    let mut best_iou = 0.0f64;
    for id in 1..=n {
        if inter[id] == 0 {
            continue;
        }
        let union = p_area + areas[id] as u64 - inter[id];
        let v = inter[id] as f64 / union as f64;
        if v > best_iou {
            best_iou = v;
            best_id = id as u32;
        }
    }
    let matched = best_iou > tau;
    let label = if matched {
        let mut win_label = Grid::filled(window.side, window.side, 0u8);
        for r in 0..window.side {
            for c in 0..window.side {
                let v = gt
                    .grid()
                    .get_signed(window.r0 + r as i64, window.c0 + c as i64)
                    .unwrap_or(0);
                if v == best_id {
                    win_label.set(r, c, 1);
                }
            }
        }
        resize_nearest(&win_label, target, target)
    } else {
        Grid::filled(target, target, 0u8)
    };
    MatchResult {
        proposal_id: proposal.id,
        matched_gt_id: if matched { Some(best_id) } else { None },
        iou: best_iou,
        label,
    }
}

/// Runs each record through the network of its size class. Records must be
/// sized to the class target of `params`.
pub fn refine_batch<T: Elem>(
    records: &[PatchRecord],
    small: &RefineNet<T>,
    large: &RefineNet<T>,
    params: &PatchParams,
) -> Result<Vec<Grid<f32>>> {
    records
        .iter()
        .map(|rec| {
            let expect = crate::patching::target_side(rec.size_class, params);
            let (_, h, w) = rec.input.dims3();
            if (h, w) != (expect, expect) {
                return Err(Error::shape("refine_batch", (h, w), (expect, expect)));
            }
            let net = match rec.size_class {
                SizeClass::Small => small,
                SizeClass::Large => large,
            };
            net.infer(&rec.input.cast::<T>())
        })
        .collect()
}

/// Pastes refined probability maps back into one instance map: each map is
/// resized to its window, thresholded at 0.5, clipped to the image, and a
/// pixel claimed by several proposals goes to the higher probability (ties
/// to the lower proposal id). Proposals with empty refined masks vanish.
pub fn assemble(
    refined: &[(Grid<f32>, Window)],
    image_shape: (usize, usize),
) -> InstanceMap {
    let (h, w) = image_shape;
    let mut best_prob = Grid::filled(h, w, 0.0f32);
    let mut labels = Grid::filled(h, w, 0u32);
    for (i, (prob, window)) in refined.iter().enumerate() {
        let id = i as u32 + 1;
        let native = resize_bilinear(prob, window.side, window.side);
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
                let p = native.get(r, c);
                if p > 0.5 && p > best_prob.get(sr as usize, sc as usize) {
                    best_prob.set(sr as usize, sc as usize, p);
                    labels.set(sr as usize, sc as usize, id);
                }
            }
        }
    }
    InstanceMap(labels).relabel_contiguous()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::BBox;
    use crate::metrics;
    use crate::nn::gradcheck;
    use std::rc::Rc;

    fn toy_cfg() -> RefineNetConfig {
        RefineNetConfig {
            growth_rates: [1, 1, 2, 2],
            layers_per_block: 1,
            in_channels: 2,
            out_channels: 1,
        }
    }

    #[test]
    fn shape_contract_same_size_output() {
        let net = RefineNet::<f32>::new(&RefineNetConfig::desk(), 3);
        let x = Tensor::from_vec(
            &[5, 48, 48],
            (0..5 * 48 * 48).map(|i| (i % 9) as f32 / 9.0).collect(),
        );
        let out = net.infer(&x).unwrap();
        assert_eq!(out.shape(), (48, 48));
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // Indivisible side rejected.
        let bad = Tensor::<f32>::zeros(&[5, 44, 44]);
        assert!(net.infer(&bad).is_err());
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        // 16x16 keeps the coarsest plane at 2x2; an 8x8 input would make the
        // deepest upsampled plane constant, park batch-norm output exactly on
        // the ReLU kink (beta = 0 at init) and turn the comparison into a
        // subgradient-vs-average ambiguity rather than a gradient check.
        let net = RefineNet::<f64>::new(&toy_cfg(), 5);
        let x = Tensor::from_vec(
            &[2, 16, 16],
            (0..512).map(|i| ((i * 29 % 23) as f64 - 11.0) / 12.0).collect(),
        );
        let target = Rc::new(Tensor::from_vec(
            &[1, 16, 16],
            (0..256).map(|i| f64::from(i % 4 == 0)).collect(),
        ));
        let run = |grad: bool| -> (f64, Option<(Tape<f64>, Var<f64>)>) {
            let mut tape = Tape::new(grad);
            let p = net
                .forward(&mut tape, &Var::constant(x.clone()), true)
                .unwrap();
            let loss = tape.focal_loss(&p, &target, 2.0, 1.0);
            let v = loss.scalar_value();
            if grad {
                (v, Some((tape, loss)))
            } else {
                (v, None)
            }
        };
        let (_, st) = run(true);
        let (mut tape, root) = st.unwrap();
        tape.backward(&root);
        let params = net.params();
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.borrow().grad.data().to_vec())
            .collect();
        let mut f = || run(false).0;
        let report = gradcheck::check_all(&params, &analytic, 1e-6, &mut f);
        assert!(report.worst < 1e-4, "worst relative error {report:?}");
    }

    #[test]
    fn refine_batch_routes_by_class_and_is_permutation_invariant() {
        use crate::patching::{PatchParams, PatchRecord, SizeClass, Window};
        let params = PatchParams {
            margin: 6,
            s_small: 24,
            s_large: 48,
            mask_dilation: 2,
        };
        let small = RefineNet::<f32>::new(&RefineNetConfig::desk(), 1);
        let large = RefineNet::<f32>::new(&RefineNetConfig::desk(), 2);
        let mk = |side: usize, class: SizeClass, k: u64| PatchRecord {
            proposal_id: 0,
            window: Window { r0: 0, c0: 0, side },
            size_class: class,
            input: Tensor::from_vec(
                &[5, side, side],
                (0..5 * side * side)
                    .map(|i| ((i as u64 * k) % 17) as f32 / 17.0)
                    .collect(),
            ),
            scale: 1.0,
        };
        let a = mk(24, SizeClass::Small, 3);
        let b = mk(48, SizeClass::Large, 5);
        let fwd = refine_batch(&[a.clone(), b.clone()], &small, &large, &params).unwrap();
        let rev = refine_batch(&[b.clone(), a.clone()], &small, &large, &params).unwrap();
        // Shuffling the batch permutes outputs identically.
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        // Each record went through its own class network.
        let direct_small = small.infer(&a.input).unwrap();
        let direct_large = large.infer(&b.input).unwrap();
        assert_eq!(fwd[0], direct_small);
        assert_eq!(fwd[1], direct_large);
        // Repeated runs are bitwise identical.
        let again = refine_batch(&[a.clone(), b.clone()], &small, &large, &params).unwrap();
        assert_eq!(fwd, again);
        // Size/class mismatch rejected.
        let wrong = PatchRecord {
            size_class: SizeClass::Large,
            ..a
        };
        assert!(refine_batch(&[wrong], &small, &large, &params).is_err());
    }

    #[test]
    fn perfect_proposals_always_match_below_tau_one() {
        // Proposals taken directly from GT: every one matches for tau < 1.
        let samples = crate::data::synth_generate(4, (64, 64), 2.0, 0.3, 99);
        for s in &samples {
            for p in crate::proposals::proposals_from_map(&s.instances) {
                let win = crate::patching::crop_window(&p, (64, 64), 6);
                let m = match_proposal(&p, &s.instances, 0.99, &win, 24);
                assert!(m.matched_gt_id.is_some(), "unmatched perfect proposal");
                assert!((m.iou - 1.0).abs() < 1e-12);
            }
        }
    }

    fn square_map(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> InstanceMap {
        let mut g = Grid::filled(h, w, 0u32);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                g.set(r, c, 1);
            }
        }
        InstanceMap(g)
    }

    #[test]
    fn match_exact_and_below_threshold() {
        let gt = square_map(32, 32, 8, 8, 8);
        let prop = Proposal {
            id: 1,
            bbox: BBox { r0: 8, c0: 8, h: 8, w: 8 },
            mask: Grid::filled(8, 8, 1u8),
        };
        let win = Window { r0: 4, c0: 4, side: 16 };
        let m = match_proposal(&prop, &gt, 0.5, &win, 16);
        assert_eq!(m.matched_gt_id, Some(1));
        assert!((m.iou - 1.0).abs() < 1e-12);
        assert!(m.label.data().iter().any(|&v| v != 0));

        // IoU 0.3 < tau: unmatched, all-zero label.
        let weak = Proposal {
            id: 2,
            bbox: BBox { r0: 8, c0: 14, h: 8, w: 8 },
            // Overlap 8x2=16, union 64+64-16=112 -> ~0.143.
            mask: Grid::filled(8, 8, 1u8),
        };
        let m2 = match_proposal(&weak, &gt, 0.5, &win, 16);
        assert_eq!(m2.matched_gt_id, None);
        assert!(m2.label.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn match_is_strict_at_tau() {
        // |P|=3, |G|=3, inter=2 -> IoU = 2/(3+3-2) = 0.5 exactly.
        let mut g = Grid::filled(8, 8, 0u32);
        g.set(2, 2, 1);
        g.set(2, 3, 1);
        g.set(2, 4, 1);
        let gt = InstanceMap(g);
        let mut mask = Grid::filled(1, 3, 1u8);
        mask.set(0, 0, 1);
        let prop = Proposal {
            id: 1,
            bbox: BBox { r0: 2, c0: 3, h: 1, w: 3 },
            mask,
        };
        let win = Window { r0: 0, c0: 0, side: 8 };
        let m = match_proposal(&prop, &gt, 0.5, &win, 8);
        assert!((m.iou - 0.5).abs() < 1e-12);
        assert_eq!(m.matched_gt_id, None, "IoU == tau must stay unmatched");
    }

    #[test]
    fn assemble_identity_refinement_round_trips_rectangles() {
        // Refined map = resized proposal mask; paste-back reproduces the
        // proposal up to resize error (IoU >= 0.95).
        let gt = square_map(64, 64, 20, 12, 16);
        let props = crate::proposals::proposals_from_map(&gt);
        let win = crate::patching::crop_window(&props[0], (64, 64), 4);
        let mut winmask = Grid::filled(win.side, win.side, 0.0f32);
        for r in 0..win.side {
            for c in 0..win.side {
                let sr = win.r0 + r as i64;
                let sc = win.c0 + c as i64;
                if sr >= 0 && sc >= 0 && props[0].contains(sr as usize, sc as usize) {
                    winmask.set(r, c, 1.0);
                }
            }
        }
        let refined = resize_bilinear(&winmask, 32, 32);
        let out = assemble(&[(refined, win)], (64, 64));
        assert_eq!(out.max_label(), 1);
        let iou = metrics::aji(&gt, &out).unwrap();
        assert!(iou >= 0.95, "round-trip IoU {iou}");
    }

    #[test]
    fn assemble_drops_empty_and_resolves_contests() {
        let w1 = Window { r0: 0, c0: 0, side: 4 };
        let w2 = Window { r0: 0, c0: 2, side: 4 };
        // First map all below threshold: dropped.
        let dead = Grid::filled(4, 4, 0.2f32);
        // Two overlapping live maps with hand-set probabilities.
        let a = Grid::filled(4, 4, 0.8f32);
        let b = Grid::filled(4, 4, 0.9f32);
        let out = assemble(&[(dead, w1), (a, w1), (b, w2)], (4, 8));
        // Contested columns 2..4 go to the higher probability (b).
        assert_eq!(out.max_label(), 2);
        for r in 0..4 {
            assert_eq!(out.grid().get(r, 0), 1);
            assert_eq!(out.grid().get(r, 2), 2);
            assert_eq!(out.grid().get(r, 5), 2);
        }
        // Instances are pairwise disjoint by construction (label map), and
        // both survived.
        let areas = out.areas();
        assert_eq!(areas[1], 8);
        assert_eq!(areas[2], 16);

        // Equal probabilities: tie goes to the lower proposal id.
        let t1 = Grid::filled(4, 4, 0.8f32);
        let t2 = Grid::filled(4, 4, 0.8f32);
        let tie = assemble(&[(t1, w1), (t2, w2)], (4, 8));
        for r in 0..4 {
            assert_eq!(tie.grid().get(r, 2), 1, "tie must favor lower id");
        }
    }
}
