//! Central finite-difference check of the analytic model gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::loss::{sample_loss, LossWeights};
use super::model::FusionModel;
use super::params::ParamId;
use super::tensor::Tensor;
use super::{CrossAttentionKind, GroundTruthRow, QueryRow, Sample};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Parameters sampled per model.
    pub samples: usize,
    pub step: f64,
    /// Tolerance for models with bilinear sampling.
    pub tol_deformable: f64,
    pub tol_smooth: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-6,
            tol_deformable: 1e-4,
            tol_smooth: 1e-5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Draws rejected because a sampling point changed grid cell.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random images, queries and targets sized for `model`.
pub fn random_samples(model: &FusionModel, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = model.config().image_hw;
    (0..n)
        .map(|s| {
            let image = Tensor::new(
                vec![3, h, w],
                (0..3 * h * w).map(|_| rng.random::<f64>()).collect(),
            )
            .expect("shape");
            let k = 2 + s % 3;
            let raw: Vec<[f64; 2]> = (0..k)
                .map(|_| [rng.random_range(50.0..950.0), rng.random_range(-0.6..0.6)])
                .collect();
            let ids = (0..k).map(|i| format!("m{s}_{i}")).collect();
            let visible: Vec<bool> = (0..k).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
            let boxes = visible
                .iter()
                .map(|v| {
                    v.then(|| {
                        [
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.3..0.8),
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.05..0.3),
                        ]
                    })
                })
                .collect();
            Sample {
                image,
                queries: QueryRow::new(ids, raw, 1000.0).expect("matching lengths"),
                gt: GroundTruthRow { visible, boxes },
            }
        })
        .collect()
}

struct Eval {
    loss: f64,
    cells: Vec<(i64, i64)>,
}

fn evaluate_loss(model: &FusionModel, samples: &[Sample], weights: LossWeights) -> Result<Eval> {
    let n_valid = samples.iter().map(|s| s.queries.len()).sum();
    let mut loss = 0.0;
    let mut cells = Vec::new();
    for s in samples {
        let mut g = Graph::new(model.params());
        let mask = vec![true; s.queries.len()];
        let out = model.forward(&mut g, &s.image, &s.queries.features, &s.queries.raw, &mask)?;
        let l = sample_loss(&mut g, out.boxes, out.visibility, &s.gt, &mask, n_valid, weights)?;
        loss += g.scalar(l.total);
        cells.extend(g.sampling_cells());
    }
    Ok(Eval { loss, cells })
}

fn analytic(model: &FusionModel, samples: &[Sample], weights: LossWeights) -> Result<Vec<Vec<f64>>> {
    let n_valid = samples.iter().map(|s| s.queries.len()).sum();
    let mut grads: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, p)| vec![0.0; p.value.len()])
        .collect();
    for s in samples {
        let mut g = Graph::new(model.params());
        let mask = vec![true; s.queries.len()];
        let out = model.forward(&mut g, &s.image, &s.queries.features, &s.queries.raw, &mask)?;
        let l = sample_loss(&mut g, out.boxes, out.visibility, &s.gt, &mask, n_valid, weights)?;
        for (acc, gr) in grads.iter_mut().zip(g.backward(l.total)) {
            acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
        }
    }
    Ok(grads)
}

/// Compares analytic gradients with central differences for
/// `cfg.samples` parameters. Every parameter tensor is visited before any
/// is drawn twice. Draws whose perturbation moves a bilinear sampling
/// point into another grid cell are replaced.
pub fn gradcheck(model: &FusionModel, samples: &[Sample], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let weights = LossWeights::default();
    let grads = analytic(model, samples, weights)?;
    let tol = if model.config().cross_attention_kind == CrossAttentionKind::Deformable {
        cfg.tol_deformable
    } else {
        cfg.tol_smooth
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
    let mut work = model.clone();
    let base_cells = evaluate_loss(model, samples, weights)?.cells;

    let mut entries = Vec::with_capacity(cfg.samples);
    let mut skipped = 0;
    let mut round: Vec<ParamId> = Vec::new();
    let max_attempts = cfg.samples * 20;
    let mut attempts = 0;
    while entries.len() < cfg.samples && attempts < max_attempts {
        attempts += 1;
        if round.is_empty() {
            round = ids.clone();
            round.shuffle(&mut rng);
        }
        let id = round.pop().expect("non-empty round");
        let len = model.params().get(id).value.len();
        let index = rng.random_range(0..len);
        let orig = model.params().get(id).value.data()[index];

        work.params_mut().get_mut(id).value.data_mut()[index] = orig + cfg.step;
        let plus = evaluate_loss(&work, samples, weights)?;
        work.params_mut().get_mut(id).value.data_mut()[index] = orig - cfg.step;
        let minus = evaluate_loss(&work, samples, weights)?;
        work.params_mut().get_mut(id).value.data_mut()[index] = orig;

        if plus.cells != base_cells || minus.cells != base_cells {
            skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
        let a = grads[id.0][index];
        let rel_err = relative_error(a, numeric, cfg.floor);
        entries.push(GradCheckEntry {
            param: model.params().get(id).name.clone(),
            index,
            analytic: a,
            numeric,
            rel_err,
            tol,
            pass: rel_err <= tol,
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let passed = entries.len() == cfg.samples && entries.iter().all(|e| e.pass);
    Ok(GradCheckReport {
        entries,
        skipped_kinks: skipped,
        max_rel_err,
        passed,
    })
}
