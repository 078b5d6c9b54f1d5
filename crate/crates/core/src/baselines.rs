//! The two geometric baselines: ray casting onto the water plane, and
//! distance estimates matched with Hungarian assignment under online
//! calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assoc::{build_cost_matrix, hungarian, FrameEval, GroundTruthPair, PredictedPair};
use crate::camera::{bearing_from_box, polar_to_body, project_point, raycast_to_water, BoundingBox, Calibration};
use crate::chartdb::{select_markers, ChartMarker, MarkerCategory, MarkerStore, SelectionParams};
use crate::datasetio::{Detection, FrameRecord};
use crate::error::Result;
use crate::geo::{body_to_geodetic, geodetic_to_body, BodyFramePoint, CameraPose, GeodeticPosition};
use crate::track::{
    calibrate, CalibrationObservation, CalibrationParams, CalibrationState, Tracker, TrackerParams,
};

/// Labeled pairs of a frame; distances are 2-D from the recorded pose.
pub fn ground_truth_pairs(record: &FrameRecord, store: &MarkerStore) -> Result<Vec<GroundTruthPair>> {
    let mut out = Vec::new();
    for l in &record.labels {
        let Some(id) = &l.marker_id else { continue };
        let Some(m) = store.get(id) else { continue };
        let b = geodetic_to_body(m.position, &record.pose)?;
        let [cx, cy, w, h] = l.bbox;
        out.push(GroundTruthPair {
            marker_id: id.clone(),
            bbox: BoundingBox::normalized(cx, cy, w, h)?,
            distance: b.x.hypot(b.y),
        });
    }
    Ok(out)
}

fn match_points(
    points: &[(usize, BodyFramePoint)],
    dets: &[BoundingBox],
    store: &MarkerStore,
    pose: &CameraPose,
    selection: &SelectionParams,
    gate: f64,
) -> Result<Vec<(usize, PredictedPair, f64)>> {
    let queries = select_markers(store, pose, selection);
    if points.is_empty() || queries.is_empty() {
        return Ok(Vec::new());
    }
    let pts: Vec<BodyFramePoint> = points.iter().map(|(_, p)| *p).collect();
    let costs = build_cost_matrix(&pts, &queries, gate)?;
    Ok(hungarian(&costs)
        .pairs
        .into_iter()
        .map(|p| {
            let (det, point) = points[p.pred_index];
            let chart_bearing = queries[p.marker_index].polar.bearing();
            (
                det,
                PredictedPair {
                    marker_id: p.marker_id,
                    bbox: dets[det],
                    distance: Some(point.x.hypot(point.y)),
                },
                chart_bearing,
            )
        })
        .collect())
}

/// Casts each detection onto the water plane with the recorded pose and
/// assigns the points to selected markers.
pub fn raycast_frame(
    pose: &CameraPose,
    detections: &[Detection],
    calib: &Calibration,
    store: &MarkerStore,
    selection: &SelectionParams,
    gate: f64,
) -> Result<Vec<PredictedPair>> {
    let extr = calib.extrinsics(pose.roll, pose.pitch);
    let boxes = detections.iter().map(Detection::bounding_box).collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        // rays at or above the horizon have no water intersection
        if let Ok(p) = raycast_to_water(b, &calib.intrinsics, &extr) {
            points.push((i, p));
        }
    }
    Ok(match_points(&points, &boxes, store, pose, selection, gate)?
        .into_iter()
        .map(|(_, p, _)| p)
        .collect())
}

/// Ray-casting evaluation over frames that carry detections.
pub fn raycast_eval(
    records: &[&FrameRecord],
    calib: &Calibration,
    store: &MarkerStore,
    selection: &SelectionParams,
    gate: f64,
) -> Result<Vec<FrameEval>> {
    records
        .iter()
        .map(|r| {
            let dets = r.detections.as_deref().unwrap_or(&[]);
            Ok(FrameEval {
                predictions: raycast_frame(&r.pose, dets, calib, store, selection, gate)?,
                ground_truth: ground_truth_pairs(r, store)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistMatchParams {
    pub gate: f64,
    pub selection: SelectionParams,
    pub tracker: TrackerParams,
    pub calibration: CalibrationParams,
    pub online_calibration: bool,
}

impl DistMatchParams {
    pub fn new(selection: SelectionParams, gate: f64, image_w: u32) -> Self {
        Self {
            gate,
            selection,
            tracker: TrackerParams::default(),
            calibration: CalibrationParams::for_image_width(image_w),
            online_calibration: true,
        }
    }
}

/// Distance-estimate baseline state for one video stream.
#[derive(Debug, Clone)]
pub struct DistMatch {
    params: DistMatchParams,
    calib: Calibration,
    tracker: Tracker,
    state: CalibrationState,
}

impl DistMatch {
    pub fn new(params: DistMatchParams, calib: Calibration) -> Self {
        Self {
            tracker: Tracker::new(params.tracker),
            params,
            calib,
            state: CalibrationState::default(),
        }
    }

    pub fn calibration_state(&self) -> &CalibrationState {
        &self.state
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    /// Processes one frame: tracks, smooths distances, corrects bearings,
    /// matches against the chart and feeds confident matches to calibration.
    pub fn step(&mut self, pose: &CameraPose, detections: &[Detection], store: &MarkerStore) -> Result<Vec<PredictedPair>> {
        let intr = self.calib.intrinsics;
        let boxes = detections.iter().map(Detection::bounding_box).collect::<Result<Vec<_>>>()?;
        let px: Vec<BoundingBox> = boxes.iter().map(|b| b.to_pixels(intr.image_w, intr.image_h)).collect();
        let ids = self.tracker.step(&px);
        let beta = self.params.tracker.ema_beta;
        let mut points = Vec::with_capacity(boxes.len());
        let mut raw_bearings = Vec::with_capacity(boxes.len());
        for (i, d) in detections.iter().enumerate() {
            let dist = match ids[i].and_then(|id| self.tracker.track_mut(id)) {
                Some(t) => t.update_distance_ema(d.dist, beta)?,
                None => d.dist,
            };
            let raw = bearing_from_box(&boxes[i], &intr);
            raw_bearings.push(raw);
            points.push((i, polar_to_body(dist, self.state.correct_bearing(raw))?));
        }
        let matched = match_points(&points, &boxes, store, pose, &self.params.selection, self.params.gate)?;
        let mut marker_of = vec![None; boxes.len()];
        for (det, pair, _) in &matched {
            marker_of[*det] = Some(pair.marker_id.clone());
        }
        let mut observations = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let Some(track) = id.and_then(|id| self.tracker.track_mut(id)) else {
                continue;
            };
            track.observe_marker(marker_of[i].as_deref(), &self.params.tracker);
            let confident = track.match_confidence;
            if let Some((_, _, chart_bearing)) = matched.iter().find(|(d, _, _)| *d == i) {
                observations.push(CalibrationObservation {
                    observed_bearing: raw_bearings[i],
                    chart_bearing: *chart_bearing,
                    pixel_offset: px[i].cx - intr.u0,
                    confidence: confident,
                });
            }
        }
        if self.params.online_calibration {
            self.state = calibrate(&self.state, &observations, &self.params.calibration);
        }
        Ok(matched.into_iter().map(|(_, p, _)| p).collect())
    }
}

/// Runs the distance baseline over frames in order as one stream.
pub fn distmatch_eval(records: &[&FrameRecord], calib: &Calibration, store: &MarkerStore, params: DistMatchParams) -> Result<(Vec<FrameEval>, CalibrationState)> {
    let mut dm = DistMatch::new(params, *calib);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let dets = r.detections.as_deref().unwrap_or(&[]);
        out.push(FrameEval {
            predictions: dm.step(&r.pose, dets, store)?,
            ground_truth: ground_truth_pairs(r, store)?,
        });
    }
    Ok((out, dm.state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSim {
    /// Recorded minus true heading, degrees.
    pub heading_bias_deg: f64,
    /// Configured over true pixel scale.
    pub scale_error: f64,
    pub frames: usize,
    pub seed: u64,
}

impl Default for CalibrationSim {
    fn default() -> Self {
        Self {
            heading_bias_deg: 2.0,
            scale_error: 1.1,
            frames: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSimResult {
    pub state: CalibrationState,
    /// Mean |chart − corrected bearing| of matched detections per quarter
    /// of the run, radians.
    pub residuals: Vec<f64>,
}

/// Closed-loop run of the distance baseline: a vessel swings its heading
/// among charted buoys while the camera reports bearings with a wrong pixel
/// scale and the pose carries a heading bias.
pub fn simulate_calibration(sim: &CalibrationSim, true_calib: &Calibration) -> Result<CalibrationSimResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let origin = GeodeticPosition::new(54.0, 10.0)?;
    let start = CameraPose::new(origin, 0.0, 0.0, 0.0, true_calib.mount[2], 0.0)?;
    let mut markers = Vec::new();
    for k in 0..8 {
        let az = (k as f64 * 45.0 + rng.random_range(-10.0..10.0)).to_radians();
        let dist = rng.random_range(120.0..350.0);
        let p = BodyFramePoint::new(dist * az.cos(), dist * az.sin(), 0.0);
        markers.push(ChartMarker {
            id: format!("S{k}"),
            position: body_to_geodetic(&p, &start)?,
            category: MarkerCategory::LateralRed,
            description: String::new(),
        });
    }
    let store = MarkerStore::from_markers(markers)?;

    let mut cfg = *true_calib;
    cfg.intrinsics.fs = true_calib.intrinsics.fs * sim.scale_error;
    let intr = true_calib.intrinsics;
    let extr = true_calib.extrinsics(0.0, 0.0);
    let selection = SelectionParams::for_camera(intr.horizontal_fov());
    let mut dm = DistMatch::new(DistMatchParams::new(selection, 40.0, intr.image_w), cfg);
    let noise = Normal::new(0.0, 0.03).expect("positive std");

    let mut residual_sums = vec![(0.0, 0usize); 4];
    for f in 0..sim.frames {
        // slow sweep through the full circle so every buoy crosses the view
        let heading = 0.9 * f as f64;
        let truth = CameraPose::new(origin, heading, 0.0, 0.0, true_calib.mount[2], f as f64)?;
        let recorded = CameraPose::new(origin, heading + sim.heading_bias_deg, 0.0, 0.0, truth.height(), f as f64)?;
        let mut dets = Vec::new();
        for m in store.iter() {
            let b = geodetic_to_body(m.position, &truth)?;
            if b.x <= 0.0 {
                continue;
            }
            let Some((u, v)) = project_point(&nalgebra::Vector3::new(b.x, b.y, 0.0), &intr, &extr) else {
                continue;
            };
            let dist = b.x.hypot(b.y);
            let r = 450.0 / dist;
            let Some(bb) = BoundingBox::pixels(u, v - r, 2.0 * r, 2.0 * r)?.clamp_to_image(intr.image_w, intr.image_h) else {
                continue;
            };
            // partly clipped boxes would shift the bearing
            if bb.w < 2.0 * r - 1e-9 {
                continue;
            }
            let n = bb.to_normalized(intr.image_w, intr.image_h);
            dets.push(Detection {
                class: 0,
                bbox: [n.cx, n.cy, n.w, n.h],
                score: 0.9,
                dist: dist * (1.0 + noise.sample(&mut rng)),
            });
        }
        let before = *dm.calibration_state();
        let pairs = dm.step(&recorded, &dets, &store)?;
        let queries = select_markers(&store, &recorded, &selection);
        let q = (4 * f / sim.frames.max(1)).min(3);
        for p in &pairs {
            let chart = queries.iter().find(|x| x.marker_id == p.marker_id).map(|x| x.polar.bearing());
            if let Some(chart) = chart {
                let raw = bearing_from_box(&p.bbox, &cfg.intrinsics);
                residual_sums[q].0 += (chart - before.correct_bearing(raw)).abs();
                residual_sums[q].1 += 1;
            }
        }
    }
    Ok(CalibrationSimResult {
        state: dm.state,
        residuals: residual_sums
            .into_iter()
            .map(|(s, n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::datasetio::{synthesize_frame, Split, SyntheticSceneSpec};

    fn calib() -> Calibration {
        Calibration {
            intrinsics: CameraIntrinsics::new(48.0, 27.0, 20.75, 4.0, 96, 54).unwrap(),
            mount: [0.0, 0.0, 4.0],
        }
    }

    #[test]
    fn raycast_is_exact_without_noise() {
        let spec = SyntheticSceneSpec {
            attitude_deg: 0.0,
            detector: crate::datasetio::DetectorNoise {
                miss_prob: 0.0,
                center_px: 0.0,
                size_frac: 0.0,
                dist_frac: 0.0,
            },
            ..Default::default()
        };
        let sel = spec.selection().unwrap();
        for i in 0..10 {
            let f = synthesize_frame(&spec, i, Split::Train).unwrap();
            let store = MarkerStore::from_markers(f.markers.clone()).unwrap();
            let dets = f.record.detections.clone().unwrap();
            let pairs = raycast_frame(&f.record.pose, &dets, &spec.calibration().unwrap(), &store, &sel, 10.0).unwrap();
            let gt = ground_truth_pairs(&f.record, &store).unwrap();
            assert_eq!(pairs.len(), gt.len());
            for g in &gt {
                let p = pairs.iter().find(|p| p.marker_id == g.marker_id).unwrap();
                assert!((p.distance.unwrap() - g.distance).abs() < 0.05 * g.distance);
            }
        }
    }

    #[test]
    fn distmatch_matches_exact_distances() {
        let c = calib();
        let spec = SyntheticSceneSpec {
            detector: crate::datasetio::DetectorNoise {
                dist_frac: 0.0,
                miss_prob: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let f = synthesize_frame(&spec, 3, Split::Train).unwrap();
        let store = MarkerStore::from_markers(f.markers.clone()).unwrap();
        let sel = spec.selection().unwrap();
        let mut dm = DistMatch::new(DistMatchParams::new(sel, 20.0, 96), c);
        let pairs = dm.step(&f.record.pose, f.record.detections.as_ref().unwrap(), &store).unwrap();
        let gt = ground_truth_pairs(&f.record, &store).unwrap();
        let mut got: Vec<_> = pairs.iter().map(|p| p.marker_id.clone()).collect();
        let mut want: Vec<_> = gt.iter().map(|p| p.marker_id.clone()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn no_injected_error_stays_calibrated() {
        let r = simulate_calibration(
            &CalibrationSim {
                heading_bias_deg: 0.0,
                scale_error: 1.0,
                frames: 200,
                seed: 1,
            },
            &calib(),
        )
        .unwrap();
        assert!(r.state.b_h.to_degrees().abs() < 0.05);
        assert!((r.state.f_s_correction - 1.0).abs() < 1e-3);
    }
}
