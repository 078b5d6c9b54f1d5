//! Query embeddings: an MLP over normalized (dist, bearing) or two learned
//! lookup tables indexed by bucketed raw values.

use std::f64::consts::PI;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{he_uniform, normal, xavier_uniform, ParamGroup, ParamId, ParamSet};
use super::tensor::Tensor;

pub const DIST_BUCKETS: usize = 41;
pub const BEARING_BUCKETS: usize = 81;
const DIST_CLAMP_M: f64 = 1000.0;
const DIST_BUCKET_M: f64 = 25.0;
const BEARING_SCALE: f64 = 1000.0;
const BEARING_BUCKET: f64 = 12.5;

pub fn dist_bucket(dist: f64) -> usize {
    let d = if dist.is_nan() { 0.0 } else { dist.clamp(0.0, DIST_CLAMP_M) };
    ((d / DIST_BUCKET_M).floor() as usize).min(DIST_BUCKETS - 1)
}

/// Bearing in [-pi, pi) scaled to [0, 1000] and cut into 12.5-wide buckets.
pub fn bearing_bucket(bearing: f64) -> usize {
    let b = if bearing.is_nan() { 0.0 } else { bearing.clamp(-PI, PI) };
    let scaled = (b + PI) / (2.0 * PI) * BEARING_SCALE;
    ((scaled / BEARING_BUCKET).floor().max(0.0) as usize).min(BEARING_BUCKETS - 1)
}

/// Dense layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            group,
            he_uniform(vec![n_in, n_out], n_in, rng),
        );
        let b = params.add(format!("{name}.bias"), group, Tensor::zeros(vec![n_out]));
        Self { w, b }
    }

    /// Glorot-initialised layer for projections not followed by an activation.
    pub fn linear(
        params: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            group,
            xavier_uniform(vec![n_in, n_out], n_in, n_out, rng),
        );
        let b = params.add(format!("{name}.bias"), group, Tensor::zeros(vec![n_out]));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub enum QueryEmbedding {
    /// Input, hidden and output layer.
    Mlp([Dense; 3]),
    Learned { dist: ParamId, bearing: ParamId },
}

impl QueryEmbedding {
    pub fn mlp(params: &mut ParamSet, d_model: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Transformer;
        Self::Mlp([
            Dense::new(params, "query_embed.0", g, 2, d_model, rng),
            Dense::new(params, "query_embed.1", g, d_model, d_model, rng),
            Dense::new(params, "query_embed.2", g, d_model, d_model, rng),
        ])
    }

    pub fn learned(params: &mut ParamSet, d_model: usize, rng: &mut impl Rng) -> Self {
        let half = d_model / 2;
        let g = ParamGroup::Transformer;
        Self::Learned {
            dist: params.add("query_embed.dist", g, normal(vec![DIST_BUCKETS, half], 0.02, rng)),
            bearing: params.add(
                "query_embed.bearing",
                g,
                normal(vec![BEARING_BUCKETS, half], 0.02, rng),
            ),
        }
    }

    /// Embeds `n` queries. `mask` zeroes padded rows.
    pub fn apply(
        &self,
        g: &mut Graph,
        features: &[[f64; 2]],
        raw: &[[f64; 2]],
        mask: &[bool],
        d_model: usize,
    ) -> Var {
        let n = features.len();
        let out = match self {
            Self::Mlp(layers) => {
                let x = g.input_raw(vec![n, 2], features.iter().flatten().copied().collect());
                let h = layers[0].apply(g, x);
                let h = g.silu(h);
                let h = layers[1].apply(g, h);
                let h = g.silu(h);
                layers[2].apply(g, h)
            }
            Self::Learned { dist, bearing } => {
                let di: Vec<usize> = raw.iter().map(|r| dist_bucket(r[0])).collect();
                let bi: Vec<usize> = raw.iter().map(|r| bearing_bucket(r[1])).collect();
                let dt = g.param(*dist);
                let bt = g.param(*bearing);
                let de = g.gather_rows(dt, &di);
                let be = g.gather_rows(bt, &bi);
                g.concat_cols(&[de, be])
            }
        };
        let m = g.input_raw(
            vec![n, d_model],
            mask.iter()
                .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, d_model))
                .collect(),
        );
        g.mul(out, m)
    }
}
