//! Detection to marker assignment and association metrics.

use std::collections::{HashMap, HashSet};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::camera::{polar_to_body, BoundingBox};
use crate::chartdb::BuoyQuery;
use crate::error::{Error, Result};
use crate::geo::BodyFramePoint;

/// Width of the distance bins reported by [`evaluate`], meters.
pub const DISTANCE_BIN_M: f64 = 50.0;

/// Dense cost matrix. Entries are `>= 0` or `+∞` (never matched).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    col_ids: Vec<String>,
}

impl CostMatrix {
    /// Columns are labelled by their index.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let ids = (0..cols).map(|j| j.to_string()).collect();
        Self::with_ids(rows, data, ids)
    }

    pub fn with_ids(rows: usize, data: Vec<f64>, col_ids: Vec<String>) -> Result<Self> {
        let cols = col_ids.len();
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} cost matrix",
                data.len()
            )));
        }
        if let Some(c) = data.iter().find(|c| !(**c >= 0.0)) {
            return Err(Error::InvalidInput(format!("cost {c} is negative or NaN")));
        }
        Ok(Self {
            rows,
            cols,
            data,
            col_ids,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred_index: usize,
    pub marker_index: usize,
    pub marker_id: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssociationResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_markers: Vec<String>,
}

impl AssociationResult {
    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.cost).sum()
    }
}

/// Lexicographic cost: number of gated pairs first, then the finite sum.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lex {
    gated: i64,
    value: f64,
}

impl Lex {
    const ZERO: Lex = Lex {
        gated: 0,
        value: 0.0,
    };
    const MAX: Lex = Lex {
        gated: i64::MAX / 4,
        value: 0.0,
    };

    fn of(c: f64) -> Lex {
        if c.is_finite() {
            Lex { gated: 0, value: c }
        } else {
            Lex {
                gated: 1,
                value: 0.0,
            }
        }
    }

    fn lt(self, o: Lex) -> bool {
        self.gated < o.gated || (self.gated == o.gated && self.value < o.value)
    }
}

impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex {
            gated: self.gated + o.gated,
            value: self.value + o.value,
        }
    }
}

impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex {
            gated: self.gated - o.gated,
            value: self.value - o.value,
        }
    }
}

/// Shortest augmenting path Hungarian method for `n <= m`. Returns the
/// column of every row.
fn solve_rows_le_cols(n: usize, m: usize, cost: impl Fn(usize, usize) -> Lex) -> Vec<usize> {
    let mut u = vec![Lex::ZERO; n + 1];
    let mut v = vec![Lex::ZERO; m + 1];
    // p[j]: row (1-based) assigned to column j, 0 = free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![Lex::MAX; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = Lex::MAX;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur.lt(minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j].lt(delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-cost assignment. Among all assignments it first maximises the
/// number of finite pairs, then minimises their total cost; `+∞` pairs are
/// never reported. Ties resolve deterministically by scan order.
pub fn hungarian(costs: &CostMatrix) -> AssociationResult {
    let (r, c) = (costs.rows, costs.cols);
    let mut row_to_col: Vec<Option<usize>> = vec![None; r];
    if r > 0 && c > 0 {
        if r <= c {
            let a = solve_rows_le_cols(r, c, |i, j| Lex::of(costs.get(i, j)));
            for (i, j) in a.into_iter().enumerate() {
                row_to_col[i] = Some(j);
            }
        } else {
            let a = solve_rows_le_cols(c, r, |j, i| Lex::of(costs.get(i, j)));
            for (j, i) in a.into_iter().enumerate() {
                row_to_col[i] = Some(j);
            }
        }
    }
    let mut result = AssociationResult::default();
    let mut col_used = vec![false; c];
    for (i, j) in row_to_col.into_iter().enumerate() {
        match j {
            Some(j) if costs.get(i, j).is_finite() => {
                col_used[j] = true;
                result.pairs.push(MatchedPair {
                    pred_index: i,
                    marker_index: j,
                    marker_id: costs.col_ids[j].clone(),
                    cost: costs.get(i, j),
                });
            }
            _ => result.unmatched_preds.push(i),
        }
    }
    result.unmatched_markers = col_used
        .iter()
        .enumerate()
        .filter(|(_, used)| !**used)
        .map(|(j, _)| costs.col_ids[j].clone())
        .collect();
    result
}

/// Euclidean body-frame distances; pairs farther than `gate` become `+∞`.
pub fn build_cost_matrix(
    preds: &[BodyFramePoint],
    markers: &[BuoyQuery],
    gate: f64,
) -> Result<CostMatrix> {
    if !(gate > 0.0) {
        return Err(Error::InvalidInput(format!("gate {gate} must be positive")));
    }
    let marker_points = markers
        .iter()
        .map(|m| polar_to_body(m.polar.dist(), m.polar.bearing()))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(preds.len() * markers.len());
    for p in preds {
        for m in &marker_points {
            let d = p.distance_2d(m);
            data.push(if d > gate { f64::INFINITY } else { d });
        }
    }
    CostMatrix::with_ids(
        preds.len(),
        data,
        markers.iter().map(|m| m.marker_id.clone()).collect(),
    )
}

/// Intersection over union. Both boxes must use the same units.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // areas from the same corner differences, so identical boxes give exactly 1
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU minus the fraction of the enclosing box not covered by the union.
pub fn generalized_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enclosing - union) / enclosing
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPair {
    pub marker_id: String,
    pub bbox: BoundingBox,
    /// Chart distance of the predicted marker, used for distance binning of
    /// false positives that have no ground truth.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPair {
    pub marker_id: String,
    pub bbox: BoundingBox,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameEval {
    pub predictions: Vec<PredictedPair>,
    pub ground_truth: Vec<GroundTruthPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    /// Ground-truth pairs in the bin.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_iou: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_thresh: f64,
    pub per_distance_bins: Vec<DistanceBin>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn bins_csv(&self) -> String {
        let mut out = String::from("lo,hi,tp,fp,fn,f1,support\n");
        for b in &self.per_distance_bins {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                b.lo, b.hi, b.tp, b.fp, b.fn_, b.f1, b.support
            ));
        }
        out
    }
}

fn f1_score(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let r = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Scores predicted (marker, box) pairs against ground truth. A prediction is
/// a true positive when its marker is labelled in the frame and the boxes
/// overlap with IoU >= `iou_thresh`; each ground-truth pair is consumed once.
pub fn evaluate(frames: &[FrameEval], iou_thresh: f64, d_max: f64) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidInput(format!(
            "iou threshold {iou_thresh} outside [0, 1]"
        )));
    }
    if !(d_max > 0.0) {
        return Err(Error::InvalidInput(format!("d_max {d_max} must be positive")));
    }
    let n_bins = ((d_max / DISTANCE_BIN_M).ceil() as usize).max(1);
    let bin_of = |d: f64| ((d.max(0.0) / DISTANCE_BIN_M) as usize).min(n_bins - 1);
    let mut bins = vec![(0usize, 0usize, 0usize, 0usize); n_bins]; // tp, fp, fn, support
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut iou_sum = 0.0;

    for (k, frame) in frames.iter().enumerate() {
        let mut gt: HashMap<&str, &GroundTruthPair> = HashMap::new();
        for g in &frame.ground_truth {
            if gt.insert(g.marker_id.as_str(), g).is_some() {
                return Err(Error::InconsistentGroundTruth(format!(
                    "marker `{}` labelled twice in frame {k}",
                    g.marker_id
                )));
            }
            bins[bin_of(g.distance)].3 += 1;
        }
        let mut consumed: HashSet<&str> = HashSet::new();
        for p in &frame.predictions {
            let hit = gt
                .get(p.marker_id.as_str())
                .filter(|_| !consumed.contains(p.marker_id.as_str()));
            match hit {
                Some(g) if box_iou(&p.bbox, &g.bbox) >= iou_thresh => {
                    consumed.insert(g.marker_id.as_str());
                    tp += 1;
                    iou_sum += box_iou(&p.bbox, &g.bbox);
                    bins[bin_of(g.distance)].0 += 1;
                }
                _ => {
                    fp += 1;
                    let d = gt
                        .get(p.marker_id.as_str())
                        .map(|g| g.distance)
                        .or(p.distance)
                        .unwrap_or(0.0);
                    bins[bin_of(d)].1 += 1;
                }
            }
        }
        for g in &frame.ground_truth {
            if !consumed.contains(g.marker_id.as_str()) {
                fn_ += 1;
                bins[bin_of(g.distance)].2 += 1;
            }
        }
    }

    let (precision, recall, f1) = f1_score(tp, fp, fn_);
    let per_distance_bins = bins
        .iter()
        .enumerate()
        .map(|(i, &(btp, bfp, bfn, support))| DistanceBin {
            lo: i as f64 * DISTANCE_BIN_M,
            hi: if i + 1 == n_bins {
                d_max
            } else {
                (i + 1) as f64 * DISTANCE_BIN_M
            },
            tp: btp,
            fp: bfp,
            fn_: bfn,
            f1: f1_score(btp, bfp, bfn).2,
            support,
        })
        .collect();
    Ok(EvalReport {
        precision,
        recall,
        f1,
        mean_iou: if tp > 0 { iou_sum / tp as f64 } else { 0.0 },
        tp,
        fp,
        fn_,
        iou_thresh,
        per_distance_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::PolarOffset;
    use approx::assert_relative_eq;

    const INF: f64 = f64::INFINITY;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::pixels(cx, cy, w, h).unwrap()
    }

    #[test]
    fn two_by_two() {
        let r = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap());
        let pairs: Vec<_> = r.pairs.iter().map(|p| (p.pred_index, p.marker_index)).collect();
        assert_eq!(pairs, [(0, 0), (1, 1)]);
        assert_eq!(r.total_cost(), 2.0);
    }

    #[test]
    fn single_entry() {
        let r = hungarian(&CostMatrix::from_rows(&[vec![5.0]]).unwrap());
        assert_eq!(r.pairs.len(), 1);
        assert_eq!((r.pairs[0].pred_index, r.pairs[0].marker_index), (0, 0));
    }

    #[test]
    fn gating_leaves_both_sides_unmatched() {
        let r = hungarian(&CostMatrix::from_rows(&[vec![1.0, INF], vec![INF, INF]]).unwrap());
        assert_eq!(r.pairs.len(), 1);
        assert_eq!((r.pairs[0].pred_index, r.pairs[0].marker_index), (0, 0));
        assert_eq!(r.unmatched_preds, [1]);
        assert_eq!(r.unmatched_markers, ["1"]);
    }

    #[test]
    fn prefers_more_finite_pairs() {
        // matching (0,0) alone is cheaper but leaves row 1 without its only finite option
        let r = hungarian(&CostMatrix::from_rows(&[vec![1.0, 9.0], vec![2.0, INF]]).unwrap());
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.total_cost(), 11.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0]]).unwrap();
        let r = hungarian(&wide);
        assert_eq!(r.pairs[0].marker_index, 1);
        assert_eq!(r.unmatched_markers, ["0", "2"]);
        let tall = CostMatrix::from_rows(&[vec![4.0], vec![1.0], vec![3.0]]).unwrap();
        let r = hungarian(&tall);
        assert_eq!(r.pairs[0].pred_index, 1);
        assert_eq!(r.unmatched_preds, [0, 2]);
    }

    #[test]
    fn empty_matrices() {
        let r = hungarian(&CostMatrix::new(0, 3, vec![]).unwrap());
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_markers.len(), 3);
        let r = hungarian(&CostMatrix::new(2, 0, vec![]).unwrap());
        assert_eq!(r.unmatched_preds, [0, 1]);
    }

    #[test]
    fn rejects_negative_costs() {
        assert!(CostMatrix::from_rows(&[vec![-1.0]]).is_err());
        assert!(CostMatrix::from_rows(&[vec![f64::NAN]]).is_err());
    }

    fn query(id: &str, dist: f64, bearing: f64) -> BuoyQuery {
        BuoyQuery {
            marker_id: id.into(),
            polar: PolarOffset::new(dist, bearing).unwrap(),
        }
    }

    #[test]
    fn cost_matrix_examples() {
        let preds = [BodyFramePoint::new(100.0, 0.0, 0.0)];
        let m = build_cost_matrix(&preds, &[query("a", 100.0, 0.0)], 100.0).unwrap();
        assert!(m.get(0, 0).abs() < 1e-12);
        let far = [query("b", 100.0, std::f64::consts::FRAC_PI_2)];
        let m = build_cost_matrix(&preds, &far, 200.0).unwrap();
        assert_relative_eq!(m.get(0, 0), 100.0 * 2f64.sqrt(), epsilon = 1e-9);
        let m = build_cost_matrix(&preds, &far, 100.0).unwrap();
        assert!(m.get(0, 0).is_infinite());
        let m = build_cost_matrix(&[], &far, 100.0).unwrap();
        assert_eq!((m.rows(), m.cols()), (0, 1));
        assert!(build_cost_matrix(&preds, &far, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(5.0, 0.0, 1.0, 1.0)), 0.0);
        // overlap 0.5, union 1.5
        assert_relative_eq!(box_iou(&a, &bx(0.5, 0.0, 1.0, 1.0)), 1.0 / 3.0);
    }

    #[test]
    fn giou_examples() {
        let a = bx(0.5, 0.5, 1.0, 1.0);
        assert_eq!(generalized_iou(&a, &a), 1.0);
        // touching unit boxes: enclosing area 2, union 2
        assert_eq!(generalized_iou(&a, &bx(1.5, 0.5, 1.0, 1.0)), 0.0);
        // nested: GIoU equals IoU
        let inner = bx(0.5, 0.5, 0.5, 0.5);
        assert_relative_eq!(generalized_iou(&a, &inner), box_iou(&a, &inner));
        // far apart: approaches -1
        assert!(generalized_iou(&a, &bx(100.0, 100.0, 1.0, 1.0)) < -0.99);
    }

    fn gt(id: &str, b: BoundingBox, d: f64) -> GroundTruthPair {
        GroundTruthPair {
            marker_id: id.into(),
            bbox: b,
            distance: d,
        }
    }

    fn pred(id: &str, b: BoundingBox) -> PredictedPair {
        PredictedPair {
            marker_id: id.into(),
            bbox: b,
            distance: None,
        }
    }

    #[test]
    fn perfect_predictions() {
        let b = bx(10.0, 10.0, 4.0, 4.0);
        let f = FrameEval {
            predictions: vec![pred("a", b)],
            ground_truth: vec![gt("a", b, 120.0)],
        };
        let r = evaluate(&[f], 0.5, 1000.0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.mean_iou), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.per_distance_bins.len(), 20);
        assert_eq!(r.per_distance_bins[2].support, 1);
    }

    #[test]
    fn two_of_three_with_one_wrong() {
        let (a, b, c) = (bx(10.0, 10.0, 4.0, 4.0), bx(30.0, 10.0, 4.0, 4.0), bx(50.0, 10.0, 4.0, 4.0));
        let f = FrameEval {
            predictions: vec![pred("a", a), pred("b", b), pred("x", c)],
            ground_truth: vec![gt("a", a, 100.0), gt("b", b, 200.0), gt("c", c, 300.0)],
        };
        let r = evaluate(&[f], 0.5, 1000.0).unwrap();
        assert_relative_eq!(r.precision, 2.0 / 3.0);
        assert_relative_eq!(r.recall, 2.0 / 3.0);
        assert_relative_eq!(r.f1, 2.0 / 3.0);
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 1));
    }

    #[test]
    fn no_predictions() {
        let f = FrameEval {
            predictions: vec![],
            ground_truth: vec![gt("a", bx(1.0, 1.0, 1.0, 1.0), 10.0)],
        };
        let r = evaluate(&[f], 0.5, 1000.0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.mean_iou), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn low_iou_and_duplicates_are_false_positives() {
        let a = bx(10.0, 10.0, 4.0, 4.0);
        let f = FrameEval {
            predictions: vec![pred("a", bx(13.0, 10.0, 4.0, 4.0)), pred("a", a), pred("a", a)],
            ground_truth: vec![gt("a", a, 100.0)],
        };
        let r = evaluate(&[f], 0.5, 1000.0).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 2, 0));
    }

    #[test]
    fn rejects_duplicate_ground_truth() {
        let a = bx(10.0, 10.0, 4.0, 4.0);
        let f = FrameEval {
            predictions: vec![],
            ground_truth: vec![gt("a", a, 1.0), gt("a", a, 1.0)],
        };
        assert!(matches!(
            evaluate(&[f], 0.5, 1000.0),
            Err(Error::InconsistentGroundTruth(_))
        ));
    }

    #[test]
    fn bins_csv_has_one_row_per_bin() {
        let r = evaluate(&[], 0.5, 1000.0).unwrap();
        assert_eq!(r.bins_csv().lines().count(), 21);
        let json = r.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
