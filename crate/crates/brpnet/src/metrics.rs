//! Evaluation metrics: IoU, Aggregated Jaccard Index, detection F1 and the
//! two Dice variants, plus per-image report aggregation.

use crate::core::{Grid, InstanceMap, SemanticMask};
use crate::{Error, Result};

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn iou(a: &Grid<u8>, b: &Grid<u8>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("iou", a.shape(), b.shape()));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let x = x != 0;
        let y = y != 0;
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Pairwise overlap table between the instances of two label maps.
struct Overlap {
    ng: usize,
    np: usize,
    /// inter[(g-1) * np + (p-1)] = |G_g ∩ P_p|
    inter: Vec<u64>,
    gt_areas: Vec<u64>,
    pred_areas: Vec<u64>,
}

impl Overlap {
    fn build(gt: &InstanceMap, pred: &InstanceMap) -> Result<Overlap> {
        if !gt.grid().same_shape(pred.grid()) {
            return Err(Error::shape("metrics", gt.grid().shape(), pred.grid().shape()));
        }
        let gt = gt.relabel_contiguous();
        let pred = pred.relabel_contiguous();
        let ng = gt.max_label() as usize;
        let np = pred.max_label() as usize;
        let mut inter = vec![0u64; ng * np];
        let mut gt_areas = vec![0u64; ng];
        let mut pred_areas = vec![0u64; np];
        for (&g, &p) in gt.grid().data().iter().zip(pred.grid().data()) {
            if g > 0 {
                gt_areas[g as usize - 1] += 1;
            }
            if p > 0 {
                pred_areas[p as usize - 1] += 1;
            }
            if g > 0 && p > 0 {
                inter[(g as usize - 1) * np + (p as usize - 1)] += 1;
            }
        }
        Ok(Overlap {
            ng,
            np,
            inter,
            gt_areas,
            pred_areas,
        })
    }

    fn inter(&self, g: usize, p: usize) -> u64 {
        self.inter[g * self.np + p]
    }

    fn union(&self, g: usize, p: usize) -> u64 {
        self.gt_areas[g] + self.pred_areas[p] - self.inter(g, p)
    }
}

/// Aggregated Jaccard Index.
///
/// Each GT instance (ascending id) picks the prediction with maximal IoU over
/// all predictions (ties to the lower pred id), contributing the pair's
/// intersection and union; predictions never chosen add their full area to
/// the denominator. 1.0 when both maps are empty.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let ov = Overlap::build(gt, pred)?;
    if ov.ng == 0 && ov.np == 0 {
        return Ok(1.0);
    }
    let mut num = 0u64;
    let mut den = 0u64;
    let mut used = vec![false; ov.np];
    for g in 0..ov.ng {
        if ov.np == 0 {
            den += ov.gt_areas[g];
            continue;
        }
        let mut best = 0usize;
        for p in 1..ov.np {
            // IoU(g,p) > IoU(g,best) compared exactly in cross-multiplied form.
            if ov.inter(g, p) * ov.union(g, best) > ov.inter(g, best) * ov.union(g, p) {
                best = p;
            }
        }
        num += ov.inter(g, best);
        den += ov.union(g, best);
        used[best] = true;
    }
    for p in 0..ov.np {
        if !used[p] {
            den += ov.pred_areas[p];
        }
    }
    Ok(if den == 0 { 1.0 } else { num as f64 / den as f64 })
}

/// How predictions are matched to GT instances for detection F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Criterion {
    /// Greedy one-to-one matching by descending IoU among pairs with IoU >= 0.5.
    IouHalf,
    /// A prediction matches the (unused) GT instance containing its centroid.
    Centroid,
}

impl std::str::FromStr for F1Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(F1Criterion::IouHalf),
            "centroid" => Ok(F1Criterion::Centroid),
            other => Err(Error::InvalidArgument(format!(
                "unknown f1 criterion {other:?} (expected iou|centroid)"
            ))),
        }
    }
}

/// Detection F1 with counts. `iou_thresh` applies to the IoU criterion.
pub fn detection_f1(
    gt: &InstanceMap,
    pred: &InstanceMap,
    iou_thresh: f64,
    criterion: F1Criterion,
) -> Result<(f64, usize, usize, usize)> {
    let ov = Overlap::build(gt, pred)?;
    if ov.ng == 0 && ov.np == 0 {
        return Ok((1.0, 0, 0, 0));
    }
    let tp = match criterion {
        F1Criterion::IouHalf => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for g in 0..ov.ng {
                for p in 0..ov.np {
                    let i = ov.inter(g, p);
                    if i == 0 {
                        continue;
                    }
                    let v = i as f64 / ov.union(g, p) as f64;
                    if v >= iou_thresh {
                        pairs.push((v, g, p));
                    }
                }
            }
            pairs.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut gt_used = vec![false; ov.ng];
            let mut pred_used = vec![false; ov.np];
            let mut tp = 0usize;
            for (_, g, p) in pairs {
                if !gt_used[g] && !pred_used[p] {
                    gt_used[g] = true;
                    pred_used[p] = true;
                    tp += 1;
                }
            }
            tp
        }
        F1Criterion::Centroid => centroid_matches(gt, pred),
    };
    let fp = ov.np - tp;
    let fn_ = ov.ng - tp;
    let f1 = if 2 * tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok((f1, tp, fp, fn_))
}

fn centroid_matches(gt: &InstanceMap, pred: &InstanceMap) -> usize {
    let gt = gt.relabel_contiguous();
    let pred = pred.relabel_contiguous();
    let np = pred.max_label() as usize;
    let ng = gt.max_label() as usize;
    let mut sums = vec![(0u64, 0u64, 0u64); np]; // (sum_r, sum_c, count)
    for (r, c, v) in pred.grid().iter_pixels() {
        if v > 0 {
            let s = &mut sums[v as usize - 1];
            s.0 += r as u64;
            s.1 += c as u64;
            s.2 += 1;
        }
    }
    let mut gt_used = vec![false; ng];
    let mut tp = 0usize;
    for (sr, sc, n) in sums {
        if n == 0 {
            continue;
        }
        let r = ((sr as f64 / n as f64).round() as usize).min(gt.h() - 1);
        let c = ((sc as f64 / n as f64).round() as usize).min(gt.w() - 1);
        let label = gt.grid().get(r, c);
        if label > 0 && !gt_used[label as usize - 1] {
            gt_used[label as usize - 1] = true;
            tp += 1;
        }
    }
    tp
}

/// Overall semantic Dice: 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
pub fn dice1(gt: &SemanticMask, pred: &SemanticMask) -> Result<f64> {
    let (a, b) = (gt.grid(), pred.grid());
    if !a.same_shape(b) {
        return Err(Error::shape("dice1", a.shape(), b.shape()));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += u64::from(x != 0 && y != 0);
        total += u64::from(x != 0) + u64::from(y != 0);
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Ensemble Dice: each GT instance is matched to the prediction with maximal
/// pixel overlap (ties to the lower id) and contributes the pair Dice, or 0
/// when nothing overlaps it; the result is the mean over GT instances.
pub fn dice2(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let ov = Overlap::build(gt, pred)?;
    if ov.ng == 0 {
        return Ok(if ov.np == 0 { 1.0 } else { 0.0 });
    }
    let mut sum = 0.0f64;
    for g in 0..ov.ng {
        let mut best = 0u64;
        let mut best_p = None;
        for p in 0..ov.np {
            if ov.inter(g, p) > best {
                best = ov.inter(g, p);
                best_p = Some(p);
            }
        }
        if let Some(p) = best_p {
            sum += 2.0 * best as f64 / (ov.gt_areas[g] + ov.pred_areas[p]) as f64;
        }
    }
    Ok(sum / ov.ng as f64)
}

/// Metrics for a single image.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub stem: String,
    pub aji: f64,
    pub f1: f64,
    pub dice1: f64,
    pub dice2: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Per-image rows plus unweighted-mean aggregates.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    pub aji: f64,
    pub f1: f64,
    pub dice1: f64,
    pub dice2: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> MetricReport {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricReport {
            aji: mean(|r| r.aji),
            f1: mean(|r| r.f1),
            dice1: mean(|r| r.dice1),
            dice2: mean(|r| r.dice2),
            tp: rows.iter().map(|r| r.tp).sum(),
            fp: rows.iter().map(|r| r.fp).sum(),
            fn_: rows.iter().map(|r| r.fn_).sum(),
            rows,
        }
    }

    /// All four metrics for one (gt, pred) pair.
    pub fn score_pair(
        stem: &str,
        gt: &InstanceMap,
        pred: &InstanceMap,
        criterion: F1Criterion,
    ) -> Result<ImageMetrics> {
        let (f1, tp, fp, fn_) = detection_f1(gt, pred, 0.5, criterion)?;
        Ok(ImageMetrics {
            stem: stem.to_string(),
            aji: aji(gt, pred)?,
            f1,
            dice1: dice1(&gt.to_semantic(), &pred.to_semantic())?,
            dice2: dice2(gt, pred)?,
            tp,
            fp,
            fn_,
        })
    }
}
