//! Matching-free set loss: visibility BCE over valid queries plus L1 and
//! GIoU box terms over visible queries.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::{FusionPrediction, GroundTruth, GroundTruthRow};
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 5.0, giou: 2.0 }
    }
}

/// Loss terms of one sample, already scaled: `bce` is divided by the
/// batch's valid-query count.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub bce: Var,
    pub l1: Option<Var>,
    pub giou: Option<Var>,
}

/// GIoU of normalized (cx, cy, w, h) boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let c = |x: [f64; 4]| (x[0] - x[2] / 2.0, x[1] - x[3] / 2.0, x[0] + x[2] / 2.0, x[1] + x[3] / 2.0);
    let (ax1, ay1, ax2, ay2) = c(a);
    let (bx1, by1, bx2, by2) = c(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

fn bce(v: bool, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if v {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Per-row (1 - GIoU) of [n, 4] box variables, summed.
fn giou_term(g: &mut Graph, pred: Var, target: Var) -> Var {
    let corners = |g: &mut Graph, b: Var| {
        let c = g.slice_cols(b, 0, 2);
        let s = g.slice_cols(b, 2, 2);
        let half = g.scale(s, 0.5);
        (g.sub(c, half), g.add(c, half), s)
    };
    let (p1, p2, ps) = corners(g, pred);
    let (t1, t2, ts) = corners(g, target);
    let lo = g.maximum(p1, t1);
    let hi = g.minimum(p2, t2);
    let span = g.sub(hi, lo);
    let overlap = g.relu(span);
    let area = |g: &mut Graph, s: Var| {
        let w = g.slice_cols(s, 0, 1);
        let h = g.slice_cols(s, 1, 1);
        g.mul(w, h)
    };
    let inter = area(g, overlap);
    let pa = area(g, ps);
    let ta = area(g, ts);
    let both = g.add(pa, ta);
    let union = g.sub(both, inter);
    let hull_lo = g.minimum(p1, t1);
    let hull_hi = g.maximum(p2, t2);
    let hull_span = g.sub(hull_hi, hull_lo);
    let hull = area(g, hull_span);
    let iou = g.div(inter, union);
    let gap = g.sub(hull, union);
    let gap_frac = g.div(gap, hull);
    let gi = g.sub(iou, gap_frac);
    let n = g.shape(gi)[0] as f64;
    let s = g.sum(gi);
    // sum of (1 - giou) = n - sum(giou)
    let neg = g.scale(s, -1.0);
    g.add_scalar(neg, n)
}

/// Builds one sample's loss from [n, 4] boxes and [n, 1] visibility.
/// Rows with `mask` false are ignored entirely; box terms only read
/// visible rows.
pub fn sample_loss(
    g: &mut Graph,
    boxes: Var,
    visibility: Var,
    gt: &GroundTruthRow,
    mask: &[bool],
    n_valid_batch: usize,
    weights: LossWeights,
) -> Result<LossVars> {
    gt.validate()?;
    let n = g.shape(boxes)[0];
    if gt.visible.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} predictions, {} masks, {} ground-truth rows",
            mask.len(),
            gt.visible.len()
        )));
    }
    let is_valid = |i: usize| mask[i];
    let visible_at = |i: usize| gt.visible[i];
    let pos: Vec<usize> = (0..n).filter(|&i| is_valid(i) && visible_at(i)).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| is_valid(i) && !visible_at(i)).collect();
    if n_valid_batch == 0 {
        return Err(Error::InvalidInput("batch has no valid queries".into()));
    }

    let mut bce_sum: Option<Var> = None;
    let mut push = |g: &mut Graph, v: Var| {
        bce_sum = Some(match bce_sum {
            Some(acc) => g.add(acc, v),
            None => v,
        });
    };
    if !pos.is_empty() {
        let p = g.gather_rows(visibility, &pos);
        let p = g.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
        let l = g.log(p);
        let s = g.sum(l);
        push(g, s);
    }
    if !neg.is_empty() {
        let p = g.gather_rows(visibility, &neg);
        let p = g.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
        let q = g.scale(p, -1.0);
        let q = g.add_scalar(q, 1.0);
        let l = g.log(q);
        let s = g.sum(l);
        push(g, s);
    }
    let bce = match bce_sum {
        Some(s) => g.scale(s, -1.0 / n_valid_batch as f64),
        None => g.input_raw(vec![1], vec![0.0]),
    };

    let mut total = bce;
    let (mut l1_var, mut giou_var) = (None, None);
    if !pos.is_empty() {
        let target: Vec<f64> = pos
            .iter()
            .flat_map(|&i| gt.boxes[i].expect("validated"))
            .collect();
        let t = g.input_raw(vec![pos.len(), 4], target);
        let p = g.gather_rows(boxes, &pos);
        if weights.l1 != 0.0 {
            let d = g.sub(p, t);
            let a = g.abs(d);
            let s = g.sum(a);
            let l = g.scale(s, weights.l1);
            total = g.add(total, l);
            l1_var = Some(l);
        }
        if weights.giou != 0.0 {
            let s = giou_term(g, p, t);
            let l = g.scale(s, weights.giou);
            total = g.add(total, l);
            giou_var = Some(l);
        }
    }
    Ok(LossVars {
        total,
        bce,
        l1: l1_var,
        giou: giou_var,
    })
}

/// Mean visibility BCE over valid queries.
pub fn mean_bce(pred: &FusionPrediction, gt: &GroundTruth, mask: &[Vec<bool>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, row) in mask.iter().enumerate() {
        for (i, valid) in row.iter().enumerate() {
            if *valid {
                sum += bce(gt.v[s][i], pred.visibility[s][i]);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Batch loss evaluated on fixed predictions.
pub fn fusion_loss(
    pred: &FusionPrediction,
    gt: &GroundTruth,
    mask: &[Vec<bool>],
    weights: LossWeights,
) -> Result<f64> {
    let b = mask.len();
    if pred.boxes.len() != b || pred.visibility.len() != b || gt.v.len() != b || gt.boxes.len() != b {
        return Err(Error::ShapeMismatch("batch sizes differ".into()));
    }
    let n_valid: usize = mask.iter().flatten().filter(|m| **m).count();
    if n_valid == 0 {
        return Ok(0.0);
    }
    let empty = ParamSet::new();
    let mut total = 0.0;
    for s in 0..b {
        let n = mask[s].len();
        if pred.boxes[s].len() != n || pred.visibility[s].len() != n {
            return Err(Error::ShapeMismatch(format!("sample {s} prediction width")));
        }
        let row = GroundTruthRow {
            visible: gt.v[s].iter().zip(&mask[s]).map(|(v, m)| *v && *m).collect(),
            boxes: gt.boxes[s].clone(),
        };
        let mut g = Graph::new(&empty);
        let bx = g.input_raw(vec![n, 4], pred.boxes[s].iter().flatten().copied().collect());
        let vs = g.input_raw(vec![n, 1], pred.visibility[s].clone());
        let l = sample_loss(&mut g, bx, vs, &row, &mask[s], n_valid, weights)?;
        total += g.scalar(l.total);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: bool, p: f64, pred_box: [f64; 4], gt_box: Option<[f64; 4]>) -> (FusionPrediction, GroundTruth) {
        (
            FusionPrediction {
                boxes: vec![vec![pred_box]],
                visibility: vec![vec![p]],
            },
            GroundTruth {
                v: vec![vec![v]],
                boxes: vec![vec![gt_box]],
            },
        )
    }

    #[test]
    fn invisible_half_confidence_is_ln2() {
        let (p, g) = single(false, 0.5, [0.5, 0.5, 0.1, 0.1], None);
        let l = fusion_loss(&p, &g, &[vec![true]], LossWeights::default()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let b = [0.4, 0.6, 0.2, 0.1];
        let (p, g) = single(true, 1.0 - BCE_EPS, b, Some(b));
        let l = fusion_loss(&p, &g, &[vec![true]], LossWeights::default()).unwrap();
        assert!(l <= bce(true, 1.0 - BCE_EPS) + 1e-15);
        assert!(l < 2e-7);
    }

    #[test]
    fn invisible_boxes_do_not_matter() {
        let mask = vec![vec![true, true, false]];
        let gt = GroundTruth {
            v: vec![vec![true, false, false]],
            boxes: vec![vec![Some([0.5, 0.5, 0.2, 0.2]), None, None]],
        };
        let mut pred = FusionPrediction {
            boxes: vec![vec![[0.45, 0.5, 0.2, 0.25], [0.1, 0.2, 0.3, 0.4], [0.3, 0.3, 0.3, 0.3]]],
            visibility: vec![vec![0.7, 0.2, 0.9]],
        };
        let w = LossWeights::default();
        let base = fusion_loss(&pred, &gt, &mask, w).unwrap();
        pred.boxes[0][1] = [0.9, 0.9, 0.05, 0.01];
        pred.boxes[0][2] = [0.01, 0.01, 0.5, 0.5];
        pred.visibility[0][2] = 0.01;
        assert_eq!(fusion_loss(&pred, &gt, &mask, w).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn bce_only_decomposition() {
        let mask = vec![vec![true, true, true], vec![true, false, false]];
        let gt = GroundTruth {
            v: vec![vec![true, false, true], vec![false, false, false]],
            boxes: vec![
                vec![Some([0.5, 0.5, 0.2, 0.2]), None, Some([0.2, 0.3, 0.1, 0.1])],
                vec![None, None, None],
            ],
        };
        let pred = FusionPrediction {
            boxes: vec![vec![[0.4, 0.5, 0.1, 0.2]; 3], vec![[0.5; 4]; 3]],
            visibility: vec![vec![0.8, 0.3, 0.55], vec![0.1, 0.9, 0.9]],
        };
        let zero = LossWeights { l1: 0.0, giou: 0.0 };
        let l = fusion_loss(&pred, &gt, &mask, zero).unwrap();
        assert!((l - mean_bce(&pred, &gt, &mask)).abs() < 1e-12);
    }

    #[test]
    fn giou_reference_values() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert_eq!(giou(a, a), 1.0);
        // unit squares side by side: no overlap, hull area 2
        let l = [0.5, 0.5, 1.0, 1.0];
        let r = [1.5, 0.5, 1.0, 1.0];
        assert!(giou(l, r).abs() < 1e-15);
        // nested boxes: GIoU equals IoU
        let outer = [0.5, 0.5, 0.4, 0.4];
        let inner = [0.5, 0.5, 0.2, 0.2];
        assert!((giou(outer, inner) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn graph_giou_matches_closed_form() {
        let empty = ParamSet::new();
        let pairs = [
            ([0.5, 0.5, 0.2, 0.2], [0.55, 0.45, 0.3, 0.1]),
            ([0.2, 0.2, 0.1, 0.1], [0.8, 0.7, 0.2, 0.3]),
            ([0.5, 0.5, 0.4, 0.4], [0.5, 0.5, 0.2, 0.2]),
        ];
        for (a, b) in pairs {
            let mut g = Graph::new(&empty);
            let pa = g.input_raw(vec![1, 4], a.to_vec());
            let pb = g.input_raw(vec![1, 4], b.to_vec());
            let t = giou_term(&mut g, pa, pb);
            assert!((g.scalar(t) - (1.0 - giou(a, b))).abs() < 1e-14);
        }
    }

    #[test]
    fn visible_without_box_is_rejected() {
        let (p, g) = single(true, 0.5, [0.5; 4], None);
        assert!(fusion_loss(&p, &g, &[vec![true]], LossWeights::default()).is_err());
    }
}
