use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::embed::{Dense, QueryEmbedding};
use super::graph::{Graph, Var};
use super::params::{he_uniform, ParamGroup, ParamId, ParamSet};
use super::tensor::Tensor;
use super::{
    CrossAttentionKind, EmbeddingKind, FusionPrediction, InferredPair, ModelConfig, QueryBatch,
    QueryRow, BACKBONE_KERNEL, BACKBONE_PAD, BACKBONE_STRIDE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            gamma: params.add(
                format!("{name}.gamma"),
                g,
                Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
            ),
            beta: params.add(format!("{name}.beta"), g, Tensor::zeros(vec![d])),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy)]
struct Mha {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
}

impl Mha {
    fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            q: Dense::linear(params, &format!("{name}.q"), g, d, d, rng),
            k: Dense::linear(params, &format!("{name}.k"), g, d, d, rng),
            v: Dense::linear(params, &format!("{name}.v"), g, d, d, rng),
            out: Dense::linear(params, &format!("{name}.out"), g, d, d, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    a: Dense,
    b: Dense,
}

impl Ffn {
    fn new(params: &mut ParamSet, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            a: Dense::new(params, &format!("{name}.0"), g, d, hidden, rng),
            b: Dense::new(params, &format!("{name}.1"), g, hidden, d, rng),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.a.apply(g, x);
        let h = g.silu(h);
        self.b.apply(g, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Mha,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Deformable {
    offsets: Dense,
    weights: Dense,
    value: Dense,
    out: Dense,
}

#[derive(Debug, Clone, Copy)]
enum Cross {
    Dense(Mha),
    Deformable(Deformable),
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Mha,
    norm1: Norm,
    cross: Cross,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

/// Intermediate values of one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// [n, 4] sigmoid boxes.
    pub boxes: Var,
    /// [n, 1] sigmoid visibility.
    pub visibility: Var,
    /// Encoder output [HW, d_model].
    pub memory: Var,
    /// Decoder output before the heads [n, d_model].
    pub decoded: Var,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParamSet,
    convs: [Conv; 3],
    input_proj: Dense,
    encoder: Vec<EncoderLayer>,
    embedding: QueryEmbedding,
    reference: Option<[Dense; 2]>,
    decoder: Vec<DecoderLayer>,
    box_head: [Dense; 3],
    vis_head: Dense,
    pos: Vec<f64>,
}

/// Fixed 2-D sinusoidal encoding [h*w, d]: the first half of the columns
/// encodes the row, the second half the column.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let freq = |i: usize| 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            let ye = (y + 1) as f64 / h as f64 * two_pi;
            let xe = (x + 1) as f64 / w as f64 * two_pi;
            for i in 0..half {
                let f = |e: f64| if i % 2 == 0 { (e / freq(i)).sin() } else { (e / freq(i)).cos() };
                row[i] = f(ye);
                row[half + i] = f(xe);
            }
        }
    }
    out
}

impl FusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let bb = ParamGroup::Backbone;
        let tr = ParamGroup::Transformer;

        let mut c_in = 3;
        let convs = std::array::from_fn(|i| {
            let c_out = config.backbone_channels[i];
            let fan_in = c_in * BACKBONE_KERNEL * BACKBONE_KERNEL;
            let conv = Conv {
                w: params.add(
                    format!("backbone.{i}.weight"),
                    bb,
                    he_uniform(vec![c_out, c_in, BACKBONE_KERNEL, BACKBONE_KERNEL], fan_in, &mut rng),
                ),
                b: params.add(format!("backbone.{i}.bias"), bb, Tensor::zeros(vec![c_out])),
            };
            c_in = c_out;
            conv
        });
        let input_proj = Dense::new(&mut params, "input_proj", tr, c_in, d, &mut rng);

        let encoder = (0..config.n_encoder_layers)
            .map(|l| EncoderLayer {
                attn: Mha::new(&mut params, &format!("encoder.{l}.attn"), d, &mut rng),
                norm1: Norm::new(&mut params, &format!("encoder.{l}.norm1"), d),
                ffn: Ffn::new(&mut params, &format!("encoder.{l}.ffn"), d, config.ffn_dim, &mut rng),
                norm2: Norm::new(&mut params, &format!("encoder.{l}.norm2"), d),
            })
            .collect();

        let embedding = match config.embedding_kind {
            EmbeddingKind::Mlp => QueryEmbedding::mlp(&mut params, d, &mut rng),
            EmbeddingKind::LearnedDiscrete => QueryEmbedding::learned(&mut params, d, &mut rng),
        };

        let deformable = config.cross_attention_kind == CrossAttentionKind::Deformable;
        let reference = deformable.then(|| {
            [
                Dense::new(&mut params, "reference.0", tr, 2, d, &mut rng),
                Dense::new(&mut params, "reference.1", tr, d, 2, &mut rng),
            ]
        });

        let hk = config.n_heads * config.sampling_points;
        let decoder = (0..config.n_decoder_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                let self_attn = Mha::new(&mut params, &format!("{name}.self_attn"), d, &mut rng);
                let norm1 = Norm::new(&mut params, &format!("{name}.norm1"), d);
                let cross = if deformable {
                    let offsets =
                        Dense::new(&mut params, &format!("{name}.cross.offsets"), tr, d, 2 * hk, &mut rng);
                    // small initial offsets keep sampling near the reference point
                    let w = &mut params.get_mut(offsets.w).value;
                    w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
                    Cross::Deformable(Deformable {
                        offsets,
                        weights: Dense::new(&mut params, &format!("{name}.cross.weights"), tr, d, hk, &mut rng),
                        value: Dense::new(&mut params, &format!("{name}.cross.value"), tr, d, d, &mut rng),
                        out: Dense::new(&mut params, &format!("{name}.cross.out"), tr, d, d, &mut rng),
                    })
                } else {
                    Cross::Dense(Mha::new(&mut params, &format!("{name}.cross"), d, &mut rng))
                };
                DecoderLayer {
                    self_attn,
                    norm1,
                    cross,
                    norm2: Norm::new(&mut params, &format!("{name}.norm2"), d),
                    ffn: Ffn::new(&mut params, &format!("{name}.ffn"), d, config.ffn_dim, &mut rng),
                    norm3: Norm::new(&mut params, &format!("{name}.norm3"), d),
                }
            })
            .collect();

        let box_head = [
            Dense::new(&mut params, "box_head.0", tr, d, d, &mut rng),
            Dense::new(&mut params, "box_head.1", tr, d, d, &mut rng),
            Dense::new(&mut params, "box_head.2", tr, d, 4, &mut rng),
        ];
        let vis_head = Dense::new(&mut params, "vis_head", tr, d, 1, &mut rng);
        let (fh, fw) = config.feature_map_hw;
        let pos = sine_position_encoding(fh, fw, d);

        Ok(Self {
            config,
            params,
            convs,
            input_proj,
            encoder,
            embedding,
            reference,
            decoder,
            box_head,
            vis_head,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: ParamSet) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for ((_, mine), (_, theirs)) in self.params.iter().zip(other.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params = other;
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = self.config.image_hw;
        if image.shape() != [3, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "image shape {:?}, model expects [3, {h}, {w}]",
                image.shape()
            )));
        }
        Ok(())
    }

    fn attention(&self, g: &mut Graph, m: &Mha, q_in: Var, k_in: Var, v_in: Var, mask: Option<&[bool]>) -> Var {
        let q = m.q.apply(g, q_in);
        let k = m.k.apply(g, k_in);
        let v = m.v.apply(g, v_in);
        let a = g.attention(q, k, v, self.config.n_heads, mask);
        m.out.apply(g, a)
    }

    /// Backbone and encoder: image [3, H, W] to memory [HW, d_model].
    pub fn encode(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let centered: Vec<f64> = image.data().iter().map(|v| v - 0.5).collect();
        let mut x = g.input_raw(image.shape().to_vec(), centered);
        for conv in &self.convs {
            let w = g.param(conv.w);
            let b = g.param(conv.b);
            x = g.conv2d(x, w, b, BACKBONE_STRIDE, BACKBONE_PAD);
            x = g.silu(x);
        }
        let shape = g.shape(x).to_vec();
        if (shape[1], shape[2]) != self.config.feature_map_hw {
            return Err(Error::ShapeMismatch(format!(
                "feature map {}x{}, config says {:?}",
                shape[1], shape[2], self.config.feature_map_hw
            )));
        }
        let flat = g.reshape(x, vec![shape[0], shape[1] * shape[2]]);
        let tokens = g.transpose(flat);
        let mut mem = self.input_proj.apply(g, tokens);
        let hw = self.config.memory_len();
        let pos = g.input_raw(vec![hw, self.config.d_model], self.pos.clone());
        for layer in &self.encoder {
            let qk = g.add(mem, pos);
            let a = self.attention(g, &layer.attn, qk, qk, mem, None);
            let r = g.add(mem, a);
            mem = layer.norm1.apply(g, r);
            let f = layer.ffn.apply(g, mem);
            let r = g.add(mem, f);
            mem = layer.norm2.apply(g, r);
        }
        Ok(mem)
    }

    /// Full forward pass for one sample's queries (valid rows plus any
    /// padding rows flagged false in `mask`).
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Tensor,
        features: &[[f64; 2]],
        raw: &[[f64; 2]],
        mask: &[bool],
    ) -> Result<ForwardOutput> {
        let n = features.len();
        if raw.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch("query features, raw values and mask differ in length".into()));
        }
        let d = self.config.d_model;
        let memory = self.encode(g, image)?;
        let mut x = self.embedding.apply(g, features, raw, mask, d);
        let hw = self.config.memory_len();
        let pos = g.input_raw(vec![hw, d], self.pos.clone());
        let mem_pos = g.add(memory, pos);

        let reference = self.reference.as_ref().map(|[a, b]| {
            let f = g.input_raw(vec![n, 2], features.iter().flatten().copied().collect());
            let h = a.apply(g, f);
            let h = g.silu(h);
            let r = b.apply(g, h);
            g.sigmoid(r)
        });

        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for layer in &self.decoder {
            let a = {
                let q = layer.self_attn.q.apply(g, x);
                let k = layer.self_attn.k.apply(g, x);
                let v = layer.self_attn.v.apply(g, x);
                let a = g.attention(q, k, v, self.config.n_heads, Some(mask));
                self_attention.push(a);
                layer.self_attn.out.apply(g, a)
            };
            let r = g.add(x, a);
            x = layer.norm1.apply(g, r);

            let c = match &layer.cross {
                Cross::Dense(m) => {
                    let q = m.q.apply(g, x);
                    let k = m.k.apply(g, mem_pos);
                    let v = m.v.apply(g, memory);
                    let a = g.attention(q, k, v, self.config.n_heads, None);
                    cross_attention.push(a);
                    m.out.apply(g, a)
                }
                Cross::Deformable(m) => {
                    let reference = reference.expect("deformable layers have reference points");
                    self.deformable(g, m, x, reference, memory)
                }
            };
            let r = g.add(x, c);
            x = layer.norm2.apply(g, r);
            let f = layer.ffn.apply(g, x);
            let r = g.add(x, f);
            x = layer.norm3.apply(g, r);
        }

        let h = self.box_head[0].apply(g, x);
        let h = g.silu(h);
        let h = self.box_head[1].apply(g, h);
        let h = g.silu(h);
        let h = self.box_head[2].apply(g, h);
        let boxes = g.sigmoid(h);
        let v = self.vis_head.apply(g, x);
        let visibility = g.sigmoid(v);
        Ok(ForwardOutput {
            boxes,
            visibility,
            memory,
            decoded: x,
            self_attention,
            cross_attention,
        })
    }

    fn deformable(&self, g: &mut Graph, m: &Deformable, x: Var, reference: Var, memory: Var) -> Var {
        let heads = self.config.n_heads;
        let k = self.config.sampling_points;
        let (fh, fw) = self.config.feature_map_hw;
        let hk = heads * k;
        let raw_offsets = m.offsets.apply(g, x);
        let scale_row = g.input_raw(
            vec![2 * hk],
            (0..hk).flat_map(|_| [1.0 / fw as f64, 1.0 / fh as f64]).collect(),
        );
        let offsets = g.mul_row(raw_offsets, scale_row);
        let repeated = g.concat_cols(&vec![reference; hk]);
        let loc = g.add(repeated, offsets);
        let logits = m.weights.apply(g, x);
        let weights = g.softmax_groups(logits, k);
        let value = m.value.apply(g, memory);
        let sampled = g.deform_sample(value, loc, weights, fh, fw, heads);
        m.out.apply(g, sampled)
    }

    /// Batched prediction. Rows beyond a sample's query count hold
    /// unspecified values.
    pub fn predict(&self, images: &[Tensor], queries: &QueryBatch) -> Result<FusionPrediction> {
        if images.len() != queries.batch_size() {
            return Err(Error::ShapeMismatch(format!(
                "{} images for {} query rows",
                images.len(),
                queries.batch_size()
            )));
        }
        let mut boxes = Vec::with_capacity(images.len());
        let mut visibility = Vec::with_capacity(images.len());
        for (s, image) in images.iter().enumerate() {
            if queries.n_max() == 0 {
                self.check_image(image)?;
                boxes.push(Vec::new());
                visibility.push(Vec::new());
                continue;
            }
            let mut g = Graph::new(&self.params);
            let out = self.forward(&mut g, image, &queries.features[s], &queries.raw[s], &queries.mask[s])?;
            boxes.push(
                g.value(out.boxes)
                    .chunks(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect(),
            );
            visibility.push(g.value(out.visibility).to_vec());
        }
        Ok(FusionPrediction { boxes, visibility })
    }

    /// Markers whose visibility reaches `v_thresh`, paired with their boxes.
    pub fn infer(&self, image: &Tensor, queries: &QueryRow, v_thresh: f64) -> Result<Vec<InferredPair>> {
        if queries.is_empty() {
            self.check_image(image)?;
            return Ok(Vec::new());
        }
        let rows = std::slice::from_ref(queries);
        let pred = self.predict(std::slice::from_ref(image), &QueryBatch::from_rows(rows))?;
        Ok(queries
            .marker_ids
            .iter()
            .zip(&pred.boxes[0])
            .zip(&pred.visibility[0])
            .filter(|(_, v)| **v >= v_thresh)
            .map(|((id, b), v)| InferredPair {
                marker_id: id.clone(),
                bbox: *b,
                visibility: *v,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: CrossAttentionKind) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            ffn_dim: 24,
            cross_attention_kind: kind,
            backbone_channels: [4, 6, 8],
            ..ModelConfig::for_image(32, 32).unwrap()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_memory_is_72_tokens() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.memory_len(), 72);
        let m = FusionModel::new(c, 1).unwrap();
        let mut g = Graph::new(m.params());
        let mem = m.encode(&mut g, &image(54, 96, 0)).unwrap();
        assert_eq!(g.shape(mem), [72, 64]);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = FusionModel::new(tiny(CrossAttentionKind::Dense), 1).unwrap();
        let mut g = Graph::new(m.params());
        assert!(m.encode(&mut g, &image(30, 32, 0)).is_err());
    }

    #[test]
    fn outputs_are_in_open_unit_interval() {
        for kind in [CrossAttentionKind::Dense, CrossAttentionKind::Deformable] {
            let m = FusionModel::new(tiny(kind), 3).unwrap();
            let rows = vec![
                QueryRow::new(vec!["a".into(), "b".into()], vec![[100.0, 0.1], [300.0, -0.2]], 1000.0).unwrap(),
                QueryRow::new(vec!["c".into()], vec![[50.0, 0.4]], 1000.0).unwrap(),
            ];
            let q = QueryBatch::from_rows(&rows);
            let p = m.predict(&[image(32, 32, 1), image(32, 32, 2)], &q).unwrap();
            assert_eq!(p.boxes.len(), 2);
            assert_eq!(p.boxes[0].len(), 2);
            assert_eq!(p.visibility[1].len(), 2);
            for v in p.boxes.iter().flatten().flatten().chain(p.visibility.iter().flatten()) {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn zero_queries_give_no_pairs() {
        let m = FusionModel::new(tiny(CrossAttentionKind::Dense), 1).unwrap();
        let q = QueryRow::new(vec![], vec![], 1000.0).unwrap();
        assert!(m.infer(&image(32, 32, 0), &q, 0.5).unwrap().is_empty());
    }

    #[test]
    fn encoder_is_deterministic_per_seed() {
        let a = FusionModel::new(tiny(CrossAttentionKind::Dense), 9).unwrap();
        let b = FusionModel::new(tiny(CrossAttentionKind::Dense), 9).unwrap();
        let img = image(32, 32, 4);
        let mut ga = Graph::new(a.params());
        let mut gb = Graph::new(b.params());
        let ma = a.encode(&mut ga, &img).unwrap();
        let mb = b.encode(&mut gb, &img).unwrap();
        assert_eq!(ga.value(ma), gb.value(mb));
    }
}
