//! Synthetic presets for the standard experiments and evaluation of the
//! fusion model against dataset labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assoc::{FrameEval, PredictedPair};
use crate::baselines::ground_truth_pairs;
use crate::camera::BoundingBox;
use crate::datasetio::{make_sample, Augment, Dataset, SampleOptions, SyntheticSceneSpec};
use crate::error::Result;
use crate::fusion::FusionModel;

/// Clean scenes for the memorization run.
pub fn overfit_spec(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed,
        ..Default::default()
    }
}

/// Pose jitter and unmapped buoys; `test_fraction` 0.2 gives 200/50 for
/// 250 frames.
pub fn benchmark_spec(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed,
        unmapped_prob: 0.2,
        pose_jitter_deg: [0.5, 0.5, 0.3],
        test_fraction: 0.2,
        ..Default::default()
    }
}

/// Sample options matching a synthetic spec.
pub fn sample_options(spec: &SyntheticSceneSpec) -> Result<SampleOptions> {
    let selection = spec.selection()?;
    Ok(SampleOptions {
        selection,
        d_max: selection.d_max,
    })
}

/// Runs the model on each frame; ground truth comes from the labels so that
/// every method is scored against the same pairs.
pub fn fusion_eval(
    model: &FusionModel,
    dataset: &Dataset,
    indices: &[usize],
    opts: &SampleOptions,
    v_thresh: f64,
) -> Result<Vec<FrameEval>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let record = &dataset.records[i];
        let image = dataset.load_image(record)?;
        let (sample, _) = make_sample(record, &image, &dataset.markers, opts, &Augment::default(), &mut rng)?;
        let q = &sample.queries;
        let predictions = model
            .infer(&sample.image, q, v_thresh)?
            .into_iter()
            .map(|p| {
                let [cx, cy, w, h] = p.bbox;
                let k = q.marker_ids.iter().position(|id| *id == p.marker_id).expect("query id");
                Ok(PredictedPair {
                    marker_id: p.marker_id,
                    bbox: BoundingBox::normalized(cx, cy, w, h)?.with_score(p.visibility),
                    distance: Some(q.raw[k][0]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FrameEval {
            predictions,
            ground_truth: ground_truth_pairs(record, &dataset.markers)?,
        });
    }
    Ok(out)
}
