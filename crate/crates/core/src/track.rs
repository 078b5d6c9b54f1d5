//! Two-stage IoU tracker with per-track distance smoothing, association
//! confidence and online correction of the pixel scale and heading bias.
//!
//! The tracker has no motion model: charted buoys barely move between
//! consecutive frames, so the last box is the prediction.

use serde::{Deserialize, Serialize};

use crate::assoc::{box_iou, hungarian, CostMatrix};
use crate::camera::BoundingBox;
use crate::error::{Error, Result};
use crate::geo::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    /// Detections at or above this score seed tracks and match first.
    pub s_high: f64,
    /// Detections below this score are ignored.
    pub s_low: f64,
    /// Minimum IoU for a detection/track pair.
    pub iou_min: f64,
    /// Tracks unmatched for more than this many frames are dropped.
    pub max_age: u32,
    /// Distance smoothing factor.
    pub ema_beta: f64,
    pub delta_up: f64,
    pub delta_down: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            s_high: 0.5,
            s_low: 0.1,
            iou_min: 0.1,
            max_age: 30,
            ema_beta: 0.9,
            delta_up: 0.2,
            delta_down: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub last_box: BoundingBox,
    /// Frames since the track was created, including the creation frame.
    pub age: u32,
    /// Frames with a matched detection.
    pub hits: u32,
    /// Consecutive frames without a detection.
    pub misses: u32,
    pub dist_ema: Option<f64>,
    pub match_confidence: f64,
    pub associated_marker: Option<String>,
}

impl Track {
    fn spawn(track_id: u64, bbox: BoundingBox) -> Self {
        Self {
            track_id,
            last_box: bbox,
            age: 1,
            hits: 1,
            misses: 0,
            dist_ema: None,
            match_confidence: 0.0,
            associated_marker: None,
        }
    }

    /// The first observation initialises the average directly.
    pub fn update_distance_ema(&mut self, new_dist: f64, beta: f64) -> Result<f64> {
        if !(new_dist >= 0.0 && new_dist.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "distance {new_dist} must be >= 0"
            )));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidInput(format!("beta {beta} outside [0, 1)")));
        }
        let ema = match self.dist_ema {
            None => new_dist,
            Some(prev) => beta * prev + (1.0 - beta) * new_dist,
        };
        self.dist_ema = Some(ema);
        Ok(ema)
    }

    pub fn update_confidence(&mut self, matched_same_marker: bool, delta_up: f64, delta_down: f64) {
        if matched_same_marker {
            self.match_confidence = (self.match_confidence + delta_up).min(1.0);
        } else {
            self.match_confidence = (self.match_confidence - delta_down).max(0.0);
            if self.match_confidence == 0.0 {
                self.associated_marker = None;
            }
        }
    }

    /// Feeds the marker matched to this track in the current frame. An
    /// unassociated track adopts the marker; otherwise the confidence rises
    /// when the marker repeats and falls when it changes or is missing.
    pub fn observe_marker(&mut self, marker: Option<&str>, params: &TrackerParams) {
        match (&self.associated_marker, marker) {
            (None, Some(m)) => {
                self.associated_marker = Some(m.to_string());
                self.update_confidence(true, params.delta_up, params.delta_down);
            }
            (None, None) => {}
            (Some(cur), m) => {
                let same = m == Some(cur.as_str());
                self.update_confidence(same, params.delta_up, params.delta_down);
            }
        }
    }
}

/// Per-stream tracker state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Tracker {
    params: TrackerParams,
    tracks: Vec<Track>,
    next_id: u64,
    frame: u64,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 1,
            frame: 0,
        }
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track_mut(&mut self, track_id: u64) -> Option<&mut Track> {
        self.tracks.iter_mut().find(|t| t.track_id == track_id)
    }

    /// IoU association of `track_idx` with `det_idx`; returns matched pairs.
    fn match_stage(
        &self,
        track_idx: &[usize],
        dets: &[BoundingBox],
        det_idx: &[usize],
    ) -> Vec<(usize, usize)> {
        if track_idx.is_empty() || det_idx.is_empty() {
            return Vec::new();
        }
        let mut data = Vec::with_capacity(track_idx.len() * det_idx.len());
        for &t in track_idx {
            for &d in det_idx {
                let iou = box_iou(&self.tracks[t].last_box, &dets[d]);
                data.push(if iou >= self.params.iou_min {
                    1.0 - iou
                } else {
                    f64::INFINITY
                });
            }
        }
        let m = CostMatrix::new(track_idx.len(), det_idx.len(), data).expect("costs in [0, 1]");
        hungarian(&m)
            .pairs
            .iter()
            .map(|p| (track_idx[p.pred_index], det_idx[p.marker_index]))
            .collect()
    }

    /// Advances one frame. Returns, per detection, the id of the track it was
    /// assigned to (`None` for ignored low-score detections).
    pub fn step(&mut self, dets: &[BoundingBox]) -> Vec<Option<u64>> {
        self.frame += 1;
        let p = self.params;
        let high: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= p.s_high).collect();
        let low: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].score >= p.s_low && dets[i].score < p.s_high)
            .collect();

        let all_tracks: Vec<usize> = (0..self.tracks.len()).collect();
        let first = self.match_stage(&all_tracks, dets, &high);
        let mut track_matched = vec![false; self.tracks.len()];
        let mut assigned: Vec<Option<u64>> = vec![None; dets.len()];
        for &(t, d) in &first {
            track_matched[t] = true;
            assigned[d] = Some(self.tracks[t].track_id);
        }
        let remaining: Vec<usize> = all_tracks.iter().copied().filter(|&t| !track_matched[t]).collect();
        let second = self.match_stage(&remaining, dets, &low);
        for &(t, d) in &second {
            track_matched[t] = true;
            assigned[d] = Some(self.tracks[t].track_id);
        }

        for (t, track) in self.tracks.iter_mut().enumerate() {
            track.age += 1;
            if track_matched[t] {
                track.hits += 1;
                track.misses = 0;
            } else {
                track.misses += 1;
            }
        }
        for &(t, d) in first.iter().chain(&second) {
            self.tracks[t].last_box = dets[d];
        }

        for &d in &high {
            if assigned[d].is_none() {
                let id = self.next_id;
                self.next_id += 1;
                self.tracks.push(Track::spawn(id, dets[d]));
                assigned[d] = Some(id);
            }
        }
        self.tracks.retain(|t| t.misses <= p.max_age);
        assigned
    }

    /// One JSON line describing the current tracks.
    pub fn dump_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            frame: u64,
            tracks: &'a [Track],
        }
        Ok(serde_json::to_string(&Line {
            frame: self.frame,
            tracks: &self.tracks,
        })?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Ratio of the configured pixel scale to the true one; bearings are
    /// corrected as `atan(f_s_correction * tan(raw))`.
    pub f_s_correction: f64,
    /// Heading bias, radians, added to corrected bearings.
    pub b_h: f64,
    pub update_count: u64,
}

impl Default for CalibrationState {
    fn default() -> Self {
        Self {
            f_s_correction: 1.0,
            b_h: 0.0,
            update_count: 0,
        }
    }
}

impl CalibrationState {
    pub const F_S_RANGE: (f64, f64) = (0.5, 2.0);
    pub const B_H_LIMIT_DEG: f64 = 10.0;

    /// Applies the current corrections to a bearing computed with the
    /// configured intrinsics.
    pub fn correct_bearing(&self, raw: f64) -> f64 {
        (self.f_s_correction * raw.tan()).atan() + self.b_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationObservation {
    /// Bearing from the box with configured intrinsics, no correction.
    pub observed_bearing: f64,
    /// Bearing of the associated chart marker.
    pub chart_bearing: f64,
    /// Box center column minus the principal point, pixels.
    pub pixel_offset: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub beta: f64,
    /// Observations from less confident tracks are skipped.
    pub c_min: f64,
    /// Scale updates need |pixel offset| > off_center_frac * image_w.
    pub off_center_frac: f64,
    pub image_w: u32,
}

impl CalibrationParams {
    pub fn for_image_width(image_w: u32) -> Self {
        Self {
            beta: 0.9,
            c_min: 0.8,
            off_center_frac: 0.1,
            image_w,
        }
    }
}

/// Exponential-average update of both corrections from confidently matched
/// observations.
pub fn calibrate(
    state: &CalibrationState,
    observations: &[CalibrationObservation],
    params: &CalibrationParams,
) -> CalibrationState {
    let mut s = *state;
    let beta = params.beta;
    let (lo, hi) = CalibrationState::F_S_RANGE;
    let b_lim = CalibrationState::B_H_LIMIT_DEG.to_radians();
    for o in observations {
        if o.confidence < params.c_min
            || !o.observed_bearing.is_finite()
            || !o.chart_bearing.is_finite()
        {
            continue;
        }
        if o.pixel_offset.abs() > params.off_center_frac * params.image_w as f64 {
            let chart_rel = wrap_angle(o.chart_bearing - s.b_h).unwrap_or(0.0);
            let ratio = chart_rel.tan() / o.observed_bearing.tan();
            if ratio.is_finite() && ratio > 0.0 {
                s.f_s_correction = (beta * s.f_s_correction + (1.0 - beta) * ratio).clamp(lo, hi);
            }
        }
        let corrected = (s.f_s_correction * o.observed_bearing.tan()).atan();
        let resid = wrap_angle(o.chart_bearing - corrected).unwrap_or(0.0);
        s.b_h = (beta * s.b_h + (1.0 - beta) * resid).clamp(-b_lim, b_lim);
        s.update_count += 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn bx(cx: f64, cy: f64, score: f64) -> BoundingBox {
        BoundingBox::pixels(cx, cy, 10.0, 10.0).unwrap().with_score(score)
    }

    #[test]
    fn overlapping_detection_keeps_id() {
        let mut t = Tracker::new(TrackerParams::default());
        let a = t.step(&[bx(50.0, 50.0, 0.9)]);
        // shift by 0.5 px: IoU ~0.9
        let b = t.step(&[bx(50.5, 50.0, 0.9)]);
        assert_eq!(a, b);
        assert_eq!(t.tracks().len(), 1);
        assert_eq!(t.tracks()[0].hits, 2);
    }

    #[test]
    fn dropout_retains_track() {
        let mut t = Tracker::new(TrackerParams {
            max_age: 5,
            ..Default::default()
        });
        t.step(&[bx(50.0, 50.0, 0.9)]);
        t.step(&[]);
        let tr = &t.tracks()[0];
        assert_eq!((tr.age, tr.hits, tr.misses), (2, 1, 1));
        for _ in 0..5 {
            t.step(&[]);
        }
        assert!(t.tracks().is_empty());
    }

    #[test]
    fn low_score_detections_only_extend_tracks() {
        let mut t = Tracker::new(TrackerParams::default());
        assert_eq!(t.step(&[bx(10.0, 10.0, 0.3)]), [None]);
        assert!(t.tracks().is_empty());
        let id = t.step(&[bx(10.0, 10.0, 0.9)])[0];
        let again = t.step(&[bx(11.0, 10.0, 0.3), bx(80.0, 10.0, 0.05)]);
        assert_eq!(again, [id, None]);
        assert_eq!(t.tracks()[0].hits, 2);
    }

    #[test]
    fn crossing_boxes_keep_identities() {
        // Two boxes approach each other horizontally; per frame each box
        // overlaps its own previous position more than the other's.
        let mut t = Tracker::new(TrackerParams::default());
        let first = t.step(&[bx(30.0, 40.0, 0.9), bx(50.0, 42.0, 0.9)]);
        for k in 1..=8 {
            let (l, r) = (30.0 + 2.0 * k as f64, 50.0 - 2.0 * k as f64);
            let a = bx(l, 40.0, 0.9);
            let b = bx(r, 42.0, 0.9);
            // oracle: own-track IoU dominates
            let own = box_iou(&a, &bx(l - 2.0, 40.0, 0.9));
            let other = box_iou(&a, &bx(r + 2.0, 42.0, 0.9));
            if own <= other {
                break;
            }
            let ids = t.step(&[b, a]);
            assert_eq!(ids, [first[1], first[0]], "frame {k}");
        }
    }

    #[test]
    fn ids_never_reused_and_steps_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<Vec<BoundingBox>> = (0..60)
            .map(|_| {
                (0..rng.random_range(0..5))
                    .map(|_| bx(rng.random_range(5.0..90.0), rng.random_range(5.0..50.0), rng.random()))
                    .collect()
            })
            .collect();
        let run = || {
            let mut t = Tracker::new(TrackerParams {
                max_age: 2,
                ..Default::default()
            });
            let mut seen = std::collections::HashSet::new();
            let mut out = Vec::new();
            for f in &frames {
                out.push(t.step(f));
                for tr in t.tracks() {
                    if tr.age == 1 {
                        assert!(seen.insert(tr.track_id), "id reused");
                    }
                    assert!(tr.hits <= tr.age);
                }
            }
            (out, t.dump_jsonl().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn distance_ema() {
        let mut tr = Track::spawn(1, bx(0.0, 0.0, 1.0));
        assert_eq!(tr.update_distance_ema(100.0, 0.9).unwrap(), 100.0);
        assert_relative_eq!(tr.update_distance_ema(200.0, 0.9).unwrap(), 110.0);
        for _ in 0..300 {
            tr.update_distance_ema(42.0, 0.9).unwrap();
        }
        assert!((tr.dist_ema.unwrap() - 42.0).abs() < 1e-6);
        assert!(tr.update_distance_ema(-1.0, 0.9).is_err());
    }

    #[test]
    fn confidence_rules() {
        let mut tr = Track::spawn(1, bx(0.0, 0.0, 1.0));
        assert_eq!(tr.match_confidence, 0.0);
        for _ in 0..10 {
            tr.update_confidence(true, 0.2, 0.1);
        }
        assert_eq!(tr.match_confidence, 1.0);

        let mut tr = Track::spawn(2, bx(0.0, 0.0, 1.0));
        tr.associated_marker = Some("m".into());
        for k in 0..20 {
            tr.update_confidence(k % 2 == 0, 0.2, 0.2);
            assert!(tr.match_confidence <= 0.2 + 1e-12);
        }
        assert!(tr.associated_marker.is_none());
    }

    #[test]
    fn observe_marker_adopts_and_reinforces() {
        let p = TrackerParams::default();
        let mut tr = Track::spawn(1, bx(0.0, 0.0, 1.0));
        tr.observe_marker(Some("a"), &p);
        tr.observe_marker(Some("a"), &p);
        assert_relative_eq!(tr.match_confidence, 0.4);
        tr.observe_marker(Some("b"), &p);
        assert_relative_eq!(tr.match_confidence, 0.3);
        assert_eq!(tr.associated_marker.as_deref(), Some("a"));
    }

    /// Observations from a camera whose configured pixel scale is
    /// `scale_error` times the true one and whose heading is off by `bias`.
    fn simulate(n: usize, bias: f64, scale_error: f64, seed: u64) -> Vec<CalibrationObservation> {
        let f_true = 83.0;
        let f_cfg = f_true * scale_error;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let theta: f64 = rng.random_range(-30f64..30.0).to_radians();
                let offset = -f_true * theta.tan();
                CalibrationObservation {
                    observed_bearing: -(offset / f_cfg).atan(),
                    chart_bearing: theta + bias,
                    pixel_offset: offset,
                    confidence: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_heading_bias() {
        let obs = simulate(50, 2f64.to_radians(), 1.0, 5);
        let s = calibrate(&CalibrationState::default(), &obs, &CalibrationParams::for_image_width(96));
        assert!((s.b_h.to_degrees() - 2.0).abs() < 0.1, "b_h {}", s.b_h.to_degrees());
        assert_eq!(s.update_count, 50);
    }

    #[test]
    fn zero_bias_is_a_fixed_point() {
        let obs = simulate(50, 0.0, 1.0, 6);
        let s = calibrate(&CalibrationState::default(), &obs, &CalibrationParams::for_image_width(96));
        assert!(s.b_h.to_degrees().abs() < 0.05);
        assert!((s.f_s_correction - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_scale_error() {
        let obs: Vec<_> = simulate(400, 0.0, 1.1, 7)
            .into_iter()
            .filter(|o| o.pixel_offset.abs() > 9.6)
            .take(100)
            .collect();
        assert_eq!(obs.len(), 100);
        let s = calibrate(&CalibrationState::default(), &obs, &CalibrationParams::for_image_width(96));
        assert!((s.f_s_correction - 1.1).abs() / 1.1 < 0.02, "corr {}", s.f_s_correction);
    }

    #[test]
    fn low_confidence_observations_skipped_and_clamps_hold() {
        let mut obs = simulate(30, 25f64.to_radians(), 3.0, 8);
        let params = CalibrationParams::for_image_width(96);
        let s = calibrate(&CalibrationState::default(), &obs, &params);
        assert!(s.b_h.abs() <= 10f64.to_radians() + 1e-15);
        assert!((0.5..=2.0).contains(&s.f_s_correction));
        for o in &mut obs {
            o.confidence = 0.5;
        }
        let s = calibrate(&CalibrationState::default(), &obs, &params);
        assert_eq!(s, CalibrationState::default());
    }

    #[test]
    fn residual_shrinks_with_calibration() {
        let obs = simulate(120, 2f64.to_radians(), 1.05, 9);
        let params = CalibrationParams::for_image_width(96);
        let mut state = CalibrationState::default();
        let mut last = f64::INFINITY;
        for chunk in obs.chunks(30) {
            let mean: f64 = chunk
                .iter()
                .map(|o| (o.chart_bearing - state.correct_bearing(o.observed_bearing)).abs())
                .sum::<f64>()
                / chunk.len() as f64;
            assert!(mean < last, "{mean} !< {last}");
            last = mean;
            state = calibrate(&state, chunk, &params);
        }
    }
}
