//! AdamW training loop with a step learning-rate drop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::loss::{sample_loss, LossWeights};
use super::model::FusionModel;
use super::params::ParamGroup;
use super::{GroundTruthRow, QueryRow, Sample};
use crate::assoc::{evaluate, EvalReport, FrameEval, GroundTruthPair, PredictedPair};
use crate::camera::BoundingBox;
use crate::error::{Error, Result};

/// Source of training samples. `sample` may augment using `rng`.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample>;
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Transformer learning rate.
    pub lr: f64,
    /// Backbone learning rate as a fraction of `lr`.
    pub backbone_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of `epochs` after which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Global gradient-norm clip, disabled when `None`.
    pub grad_clip: Option<f64>,
    pub loss_weights: LossWeights,
    pub v_thresh: f64,
    pub iou_thresh: f64,
    pub d_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr: 5e-4,
            backbone_lr_ratio: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_drop_fraction: 0.65,
            lr_drop_factor: 0.1,
            grad_clip: Some(1.0),
            loss_weights: LossWeights::default(),
            v_thresh: 0.5,
            iou_thresh: 0.5,
            d_max: 1000.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.backbone_lr_ratio >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..=1.0).contains(&self.lr_drop_fraction)
            && self.lr_drop_factor > 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid training config {self:?}")))
        }
    }

    /// Transformer learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop_epoch = (self.lr_drop_fraction * self.epochs as f64).round() as usize;
        if epoch >= drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub l1: f64,
    pub giou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(model: &FusionModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut FusionModel, grads: &[Vec<f64>], cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (k, p) in model.params_mut().iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Backbone => lr * cfg.backbone_lr_ratio,
                ParamGroup::Transformer => lr,
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w);
            }
        }
    }
}

/// Converts one sample's predictions to evaluation pairs.
pub fn frame_eval(
    queries: &QueryRow,
    gt: &GroundTruthRow,
    boxes: &[[f64; 4]],
    visibility: &[f64],
    v_thresh: f64,
) -> Result<FrameEval> {
    let mut out = FrameEval::default();
    for i in 0..queries.len() {
        let dist = queries.raw[i][0];
        if visibility[i] >= v_thresh {
            let [cx, cy, w, h] = boxes[i];
            out.predictions.push(PredictedPair {
                marker_id: queries.marker_ids[i].clone(),
                bbox: BoundingBox::normalized(cx, cy, w, h)?.with_score(visibility[i]),
                distance: Some(dist),
            });
        }
        if gt.visible[i] {
            let [cx, cy, w, h] = gt.boxes[i].expect("validated ground truth");
            out.ground_truth.push(GroundTruthPair {
                marker_id: queries.marker_ids[i].clone(),
                bbox: BoundingBox::normalized(cx, cy, w, h)?,
                distance: dist,
            });
        }
    }
    Ok(out)
}

/// Runs the model over every sample of `source` without augmentation.
pub fn evaluate_model(
    model: &FusionModel,
    source: &dyn SampleSource,
    v_thresh: f64,
    iou_thresh: f64,
    d_max: f64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut frames = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let s = source.sample(i, &mut rng)?;
        let batch = super::QueryBatch::from_rows(std::slice::from_ref(&s.queries));
        let pred = model.predict(std::slice::from_ref(&s.image), &batch)?;
        let (boxes, vis) = if s.queries.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (pred.boxes[0].clone(), pred.visibility[0].clone())
        };
        frames.push(frame_eval(&s.queries, &s.gt, &boxes, &vis, v_thresh)?);
    }
    evaluate(&frames, iou_thresh, d_max)
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
}

/// Forward and backward over one batch. Returns summed gradients, the
/// loss terms and per-sample predictions.
pub struct BatchResult {
    pub grads: Vec<Vec<f64>>,
    pub loss: f64,
    pub bce: f64,
    pub l1: f64,
    pub giou: f64,
    pub frames: Vec<FrameEval>,
}

pub fn batch_gradients(model: &FusionModel, batch: &[Sample], cfg: &TrainConfig) -> Result<BatchResult> {
    let n_valid: usize = batch.iter().map(|s| s.queries.len()).sum();
    let mut grads: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, p)| vec![0.0; p.value.len()])
        .collect();
    let mut res = BatchResult {
        grads: Vec::new(),
        loss: 0.0,
        bce: 0.0,
        l1: 0.0,
        giou: 0.0,
        frames: Vec::with_capacity(batch.len()),
    };
    for s in batch {
        if s.queries.is_empty() {
            res.frames.push(frame_eval(&s.queries, &s.gt, &[], &[], cfg.v_thresh)?);
            continue;
        }
        let mut g = Graph::new(model.params());
        let mask = vec![true; s.queries.len()];
        let out = model.forward(&mut g, &s.image, &s.queries.features, &s.queries.raw, &mask)?;
        let l = sample_loss(&mut g, out.boxes, out.visibility, &s.gt, &mask, n_valid, cfg.loss_weights)?;
        res.loss += g.scalar(l.total);
        res.bce += g.scalar(l.bce);
        res.l1 += l.l1.map_or(0.0, |v| g.scalar(v));
        res.giou += l.giou.map_or(0.0, |v| g.scalar(v));
        let boxes: Vec<[f64; 4]> = g
            .value(out.boxes)
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        res.frames.push(frame_eval(
            &s.queries,
            &s.gt,
            &boxes,
            g.value(out.visibility),
            cfg.v_thresh,
        )?);
        for (acc, gr) in grads.iter_mut().zip(g.backward(l.total)) {
            for (a, b) in acc.iter_mut().zip(&gr) {
                *a += b;
            }
        }
    }
    res.grads = grads;
    Ok(res)
}

/// Trains `model` in place. Each epoch visits the samples in a seeded
/// random order; metrics come from the training forward passes. One JSON
/// line per epoch goes to `log_sink` when given.
pub fn train(
    model: &mut FusionModel,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut loss, mut bce, mut l1, mut giou) = (0.0, 0.0, 0.0, 0.0);
        let mut frames = Vec::with_capacity(source.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| source.sample(i, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut r = batch_gradients(model, &batch, cfg)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: r.loss });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = r.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let f = clip / norm;
                    r.grads.iter_mut().flatten().for_each(|g| *g *= f);
                }
            }
            opt.step(model, &r.grads, cfg, lr);
            loss += r.loss;
            bce += r.bce;
            l1 += r.l1;
            giou += r.giou;
            frames.extend(r.frames);
        }
        let n_batches = source.len().div_ceil(cfg.batch_size) as f64;
        let report = evaluate(&frames, cfg.iou_thresh, cfg.d_max)?;
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss / n_batches,
            bce: bce / n_batches,
            l1: l1 / n_batches,
            giou: giou / n_batches,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            mean_iou: report.mean_iou,
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(sink, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome { log })
}

/// Checks the loss-trend rule: over every window of `window` epochs the
/// mean loss of the second half may exceed that of the first half by at
/// most `tolerance` (relative).
pub fn loss_trend_ok(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if losses.len() < window || window < 2 {
        return true;
    }
    losses.windows(window).all(|w| {
        let half = window / 2;
        let a = w[..half].iter().sum::<f64>() / half as f64;
        let b = w[half..].iter().sum::<f64>() / (window - half) as f64;
        b <= a * (1.0 + tolerance)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_at_fraction() {
        let cfg = TrainConfig {
            epochs: 100,
            lr: 1e-4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(64), 1e-4);
        assert!((cfg.lr_at(65) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn trend_rule() {
        let decreasing: Vec<f64> = (0..100).map(|i| 10.0 / (1.0 + i as f64)).collect();
        assert!(loss_trend_ok(&decreasing, 50, 0.05));
        let mut bumpy = decreasing.clone();
        for v in bumpy.iter_mut().skip(60) {
            *v *= 3.0;
        }
        assert!(!loss_trend_ok(&bumpy, 50, 0.05));
    }
}
