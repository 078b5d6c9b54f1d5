//! Fusion transformer: chart markers as decoder queries over image features.

pub mod checkpoint;
pub mod embed;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, Var};
pub use loss::{fusion_loss, LossWeights};
pub use model::FusionModel;
pub use params::{ParamGroup, ParamId, ParamSet};
pub use tensor::Tensor;

pub const SAMPLING_POINT_CHOICES: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Mlp,
    LearnedDiscrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossAttentionKind {
    Dense,
    Deformable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub embedding_kind: EmbeddingKind,
    pub cross_attention_kind: CrossAttentionKind,
    pub sampling_points: usize,
    /// Input image (height, width).
    pub image_hw: (usize, usize),
    /// Backbone output (height, width).
    pub feature_map_hw: (usize, usize),
    /// Output channels of the three backbone convolutions.
    pub backbone_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            ffn_dim: 128,
            embedding_kind: EmbeddingKind::Mlp,
            cross_attention_kind: CrossAttentionKind::Dense,
            sampling_points: 4,
            image_hw: (54, 96),
            feature_map_hw: (6, 12),
            backbone_channels: [16, 32, 64],
        }
    }
}

pub const BACKBONE_KERNEL: usize = 4;
pub const BACKBONE_STRIDE: usize = 2;
pub const BACKBONE_PAD: usize = 1;

/// Spatial size after the three backbone convolutions.
pub fn backbone_output_hw(hw: (usize, usize)) -> Option<(usize, usize)> {
    let step = |n: usize| -> Option<usize> {
        let padded = n + 2 * BACKBONE_PAD;
        (padded >= BACKBONE_KERNEL).then(|| (padded - BACKBONE_KERNEL) / BACKBONE_STRIDE + 1)
    };
    let (mut h, mut w) = hw;
    for _ in 0..3 {
        h = step(h)?;
        w = step(w)?;
    }
    Some((h, w))
}

impl ModelConfig {
    /// Configuration whose feature map matches an image of the given size.
    pub fn for_image(image_h: usize, image_w: usize) -> Result<Self> {
        let feature_map_hw = backbone_output_hw((image_h, image_w))
            .ok_or_else(|| Error::InvalidInput(format!("image {image_w}x{image_h} too small")))?;
        Ok(Self {
            image_hw: (image_h, image_w),
            feature_map_hw,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("d_model, n_heads and ffn_dim must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if !SAMPLING_POINT_CHOICES.contains(&self.sampling_points) {
            return bad(format!(
                "sampling_points {} not in {SAMPLING_POINT_CHOICES:?}",
                self.sampling_points
            ));
        }
        if self.backbone_channels.contains(&0) {
            return bad("backbone channels must be positive".into());
        }
        match backbone_output_hw(self.image_hw) {
            Some(hw) if hw == self.feature_map_hw => Ok(()),
            got => bad(format!(
                "image {:?} yields feature map {got:?}, config says {:?}",
                self.image_hw, self.feature_map_hw
            )),
        }
    }

    pub fn memory_len(&self) -> usize {
        self.feature_map_hw.0 * self.feature_map_hw.1
    }
}

/// Queries of one sample. `features` are normalized (distance mapped
/// from [0, d_max] to [-1, 1], bearing / (pi / 4)); `raw` keeps meters
/// and radians for bucketed embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub marker_ids: Vec<String>,
    pub features: Vec<[f64; 2]>,
    pub raw: Vec<[f64; 2]>,
}

impl QueryRow {
    pub fn new(marker_ids: Vec<String>, raw: Vec<[f64; 2]>, d_max: f64) -> Result<Self> {
        if marker_ids.len() != raw.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids for {} queries",
                marker_ids.len(),
                raw.len()
            )));
        }
        if !(d_max > 0.0) {
            return Err(Error::InvalidInput(format!("d_max must be positive, got {d_max}")));
        }
        let features = raw
            .iter()
            .map(|[d, b]| [2.0 * d / d_max - 1.0, b / std::f64::consts::FRAC_PI_4])
            .collect();
        Ok(Self {
            marker_ids,
            features,
            raw,
        })
    }

    pub fn len(&self) -> usize {
        self.marker_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marker_ids.is_empty()
    }
}

/// Padded queries for a batch; `mask[s][i]` is true for real queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub features: Vec<Vec<[f64; 2]>>,
    pub raw: Vec<Vec<[f64; 2]>>,
    pub mask: Vec<Vec<bool>>,
    pub marker_ids: Vec<Vec<String>>,
}

impl QueryBatch {
    pub fn from_rows(rows: &[QueryRow]) -> Self {
        let n_max = rows.iter().map(QueryRow::len).max().unwrap_or(0);
        let pad = |v: &[[f64; 2]]| {
            let mut v = v.to_vec();
            v.resize(n_max, [0.0; 2]);
            v
        };
        Self {
            features: rows.iter().map(|r| pad(&r.features)).collect(),
            raw: rows.iter().map(|r| pad(&r.raw)).collect(),
            mask: rows
                .iter()
                .map(|r| (0..n_max).map(|i| i < r.len()).collect())
                .collect(),
            marker_ids: rows.iter().map(|r| r.marker_ids.clone()).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.mask.len()
    }

    pub fn n_max(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }
}

/// Per-query targets. Boxes are normalized (cx, cy, w, h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub visible: Vec<bool>,
    pub boxes: Vec<Option<[f64; 4]>>,
}

impl GroundTruthRow {
    pub fn validate(&self) -> Result<()> {
        if self.visible.len() != self.boxes.len() {
            return Err(Error::ShapeMismatch("visibility and box counts differ".into()));
        }
        if let Some(i) = (0..self.visible.len()).find(|&i| self.visible[i] && self.boxes[i].is_none())
        {
            return Err(Error::InconsistentGroundTruth(format!(
                "query {i} is visible but has no box"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub v: Vec<Vec<bool>>,
    pub boxes: Vec<Vec<Option<[f64; 4]>>>,
}

impl GroundTruth {
    /// Pads rows to `n_max` with invisible entries.
    pub fn from_rows(rows: &[GroundTruthRow], n_max: usize) -> Self {
        Self {
            v: rows
                .iter()
                .map(|r| {
                    let mut v = r.visible.clone();
                    v.resize(n_max, false);
                    v
                })
                .collect(),
            boxes: rows
                .iter()
                .map(|r| {
                    let mut b = r.boxes.clone();
                    b.resize(n_max, None);
                    b
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionPrediction {
    pub boxes: Vec<Vec<[f64; 4]>>,
    pub visibility: Vec<Vec<f64>>,
}

/// One inferred association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredPair {
    pub marker_id: String,
    pub bbox: [f64; 4],
    pub visibility: f64,
}

/// A training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Channel-major RGB image [3, H, W] scaled to [0, 1].
    pub image: Tensor,
    pub queries: QueryRow,
    pub gt: GroundTruthRow,
}
