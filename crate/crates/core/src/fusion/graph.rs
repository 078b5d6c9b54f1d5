//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read in place from a [`ParamSet`]; [`Graph::backward`] returns one
//! gradient buffer per parameter. Shape errors are programming errors and
//! panic.

use std::collections::HashMap;

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Min { a: Var, b: Var },
    Max { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, s: f64 },
    AddScalar { a: Var },
    Silu { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Log { a: Var },
    Abs { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum { a: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxGroups { a: Var, group: usize },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    DeformSample {
        value: Var,
        loc: Var,
        weights: Var,
        grid_h: usize,
        grid_w: usize,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// Empty for parameter nodes, whose values live in the [`ParamSet`].
    value: Vec<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += a @ b` for row-major a [m,k], b [k,n], c [m,n].
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row softmax over `scores`, with masked-out entries set to exactly zero.
/// A row with no valid entries becomes all zeros.
pub fn masked_softmax(scores: &mut [f64], mask: Option<&[bool]>) {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| valid(*j))
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        if valid(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Bilinear corners of a normalized location on a `h x w` grid with
/// zero padding: (flat index, weight) for in-range corners plus the
/// fractional offsets.
fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> ([(Option<usize>, f64); 4], f64, f64) {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let idx = |xi: f64, yi: f64| -> Option<usize> {
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
            Some(yi as usize * w + xi as usize)
        } else {
            None
        }
    };
    (
        [
            (idx(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (idx(x0 + 1.0, y0), fx * (1.0 - fy)),
            (idx(x0, y0 + 1.0), (1.0 - fx) * fy),
            (idx(x0 + 1.0, y0 + 1.0), fx * fy),
        ],
        fx,
        fy,
    )
}

/// Bilinear sample of column `c` of a row-major [h*w, d] grid.
pub fn bilinear_sample(grid: &[f64], d: usize, h: usize, w: usize, x: f64, y: f64, c: usize) -> f64 {
    let (corners, _, _) = bilinear_corners(x, y, h, w);
    corners
        .iter()
        .filter_map(|(i, wt)| i.map(|i| grid[i * d + c] * wt))
        .sum()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == shape.iter().product::<usize>());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).value.data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 2, "expected 2-D operand, got {s:?}");
        (s[0], s[1])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar");
        val[0]
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.data().to_vec(), Op::Input)
    }

    pub fn input_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.params.get(id).value.shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.dims2(x);
        let (k2, n) = self.dims2(w);
        assert_eq!(k, k2, "linear: {m}x{k} @ {k2}x{n}");
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), n);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        matmul_acc(self.value(x), self.value(w), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul: {m}x{k} @ {k2}x{n}");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul { a, b })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Min { a, b })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::max, Op::Max { a, b })
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (_, n) = self.dims2(a);
        assert_eq!(self.value(row).len(), n, "row broadcast width");
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|ar| ar.iter().zip(r).map(|(x, y)| f(*x, *y)))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, y| x + y, Op::AddRow { a, row })
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, |x, y| x * y, Op::MulRow { a, row })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale { a, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar { a })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(a).len(), "reshape size");
        let out = self.value(a).to_vec();
        self.push(shape, out, Op::Reshape { a })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims2(a);
        assert!(start + len <= n, "slice_cols out of range");
        let v = self.value(a);
        let out = (0..m)
            .flat_map(|i| v[i * n + start..i * n + start + len].iter().copied())
            .collect();
        self.push(vec![m, len], out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.dims2(*p);
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[i * w..(i + 1) * w]);
            }
        }
        self.push(
            vec![m, n],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.dims2(a);
        let v = self.value(a);
        let out = idx
            .iter()
            .flat_map(|&i| {
                assert!(i < m, "gather index {i} >= {m}");
                v[i * n..(i + 1) * n].iter().copied()
            })
            .collect();
        self.push(
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.dims2(x);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention. `key_mask[j] == false`
    /// removes key `j` from every softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let (n, d) = self.dims2(q);
        let (m, dk) = self.dims2(k);
        assert_eq!(d, dk, "attention q/k width");
        assert_eq!(self.dims2(v), (m, d), "attention value shape");
        assert_eq!(d % heads, 0, "heads must divide width");
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), m, "key mask length");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qv[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                }
                masked_softmax(row, key_mask);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, p) in row.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    for (o, x) in oi.iter_mut().zip(&vv[j * d + off..j * d + off + dh]) {
                        *o += p * x;
                    }
                }
            }
        }
        self.push(
            vec![n, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Attention weights [heads, n, m] recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax over consecutive groups of `group` columns.
    pub fn softmax_groups(&mut self, a: Var, group: usize) -> Var {
        let (_, n) = self.dims2(a);
        assert_eq!(n % group, 0, "group size must divide width");
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(group) {
            masked_softmax(chunk, None);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::SoftmaxGroups { a, group })
    }

    /// x [C, H, W], w [O, C, k, k], b [O] -> [O, Ho, Wo].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, c2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, c2, "conv channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wt = wv[((oc * c + ic) * kh + ki) * kw + kj];
                        for oy in 0..ho {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *ov += wt * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            vec![o, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Deformable sampling. `value` is a [grid_h * grid_w, d] feature grid,
    /// `loc` holds normalized (x, y) pairs [n, heads * points * 2] and
    /// `weights` [n, heads * points]. Head `h` reads columns
    /// `h*d/heads .. (h+1)*d/heads`. Returns [n, d].
    pub fn deform_sample(
        &mut self,
        value: Var,
        loc: Var,
        weights: Var,
        grid_h: usize,
        grid_w: usize,
        heads: usize,
    ) -> Var {
        let (hw, d) = self.dims2(value);
        assert_eq!(hw, grid_h * grid_w, "value grid size");
        let (n, wcols) = self.dims2(weights);
        assert_eq!(wcols % heads, 0);
        let points = wcols / heads;
        assert_eq!(self.dims2(loc), (n, wcols * 2), "location shape");
        let dh = d / heads;
        let (vv, lv, wv) = (self.value(value), self.value(loc), self.value(weights));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for h in 0..heads {
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for p in 0..points {
                    let col = h * points + p;
                    let a = wv[i * wcols + col];
                    let (x, y) = (lv[i * wcols * 2 + 2 * col], lv[i * wcols * 2 + 2 * col + 1]);
                    let (corners, _, _) = bilinear_corners(x, y, grid_h, grid_w);
                    for (idx, cw) in corners {
                        let Some(idx) = idx else { continue };
                        let f = a * cw;
                        let src = &vv[idx * d + h * dh..idx * d + (h + 1) * dh];
                        for (ov, sv) in o.iter_mut().zip(src) {
                            *ov += f * sv;
                        }
                    }
                }
            }
        }
        self.push(
            vec![n, d],
            out,
            Op::DeformSample {
                value,
                loc,
                weights,
                grid_h,
                grid_w,
                heads,
            },
        )
    }

    /// Grid cell of every bilinear sampling location in the tape, as
    /// (floor(px), floor(py)) pairs. A change between two evaluations means
    /// a sampling point crossed a cell boundary.
    pub fn sampling_cells(&self) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::DeformSample { loc, grid_h, grid_w, .. } = &node.op {
                for xy in self.value(*loc).chunks(2) {
                    let px = xy[0] * *grid_w as f64 - 0.5;
                    let py = xy[1] * *grid_h as f64 - 0.5;
                    out.push((px.floor() as i64, py.floor() as i64));
                }
            }
        }
        out
    }

    /// Gradients of the scalar `loss` with respect to every parameter, in
    /// parameter-id order. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Vec<Vec<f64>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in out[id.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        out
    }

    fn backward_op(&self, op: &Op, out_val: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! grad_of {
            ($v:expr) => {{
                let len = self.value($v).len();
                grads[$v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims2(*x);
                let n = self.dims2(*w).1;
                let (xv, wv) = (self.value(*x), self.value(*w));
                {
                    let gx = grad_of!(*x);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            gx[i * k + p] += dot(grow, &wv[p * n..(p + 1) * n]);
                        }
                    }
                }
                {
                    let gw = grad_of!(*w);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let xv = xv[i * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (a, b) in gw[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *a += xv * b;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = grad_of!(*b);
                    for row in g.chunks(n) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                if a == b {
                    // a @ a only arises for square inputs; accumulate both terms
                    let ga = grad_of!(*a);
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                ga[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    return;
                }
                {
                    let ga = grad_of!(*a);
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                let gb = grad_of!(*b);
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        for (a, b) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *a += x * b;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (dst, s) in [(*a, 1.0), (*b, 1.0)] {
                    let ga = grad_of!(dst);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Sub { a, b } => {
                for (dst, s) in [(*a, 1.0), (*b, -1.0)] {
                    let ga = grad_of!(dst);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                {
                    let ga = grad_of!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                let gb = grad_of!(*b);
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                {
                    let ga = grad_of!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                let gb = grad_of!(*b);
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::Min { a, b } | Op::Max { a, b } => {
                let is_min = matches!(op, Op::Min { .. });
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(&bv)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                {
                    let ga = grad_of!(*a);
                    for i in 0..g.len() {
                        if pick_a[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                let gb = grad_of!(*b);
                for i in 0..g.len() {
                    if !pick_a[i] {
                        gb[i] += g[i];
                    }
                }
            }
            Op::AddRow { a, row } => {
                let n = self.value(*row).len();
                {
                    let ga = grad_of!(*a);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let gr = grad_of!(*row);
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulRow { a, row } => {
                let n = self.value(*row).len();
                let (av, rv) = (self.value(*a).to_vec(), self.value(*row).to_vec());
                {
                    let ga = grad_of!(*a);
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * rv[i % n];
                    }
                }
                let gr = grad_of!(*row);
                for i in 0..g.len() {
                    gr[i % n] += g[i] * av[i];
                }
            }
            Op::Scale { a, s } => {
                let ga = grad_of!(*a);
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::AddScalar { a } => {
                let ga = grad_of!(*a);
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Silu { a } => {
                let av = self.value(*a).to_vec();
                let ga = grad_of!(*a);
                for i in 0..g.len() {
                    let s = sigmoid(av[i]);
                    ga[i] += g[i] * (s + av[i] * s * (1.0 - s));
                }
            }
            Op::Sigmoid { a } => {
                let ga = grad_of!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * out_val[i] * (1.0 - out_val[i]);
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a).to_vec();
                let ga = grad_of!(*a);
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Log { a } => {
                let av = self.value(*a).to_vec();
                let ga = grad_of!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
            Op::Abs { a } => {
                let av = self.value(*a).to_vec();
                let ga = grad_of!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else if av[i] < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::Clamp { a, lo, hi } => {
                let av = self.value(*a).to_vec();
                let ga = grad_of!(*a);
                for i in 0..g.len() {
                    if av[i] >= *lo && av[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sum { a } => {
                let ga = grad_of!(*a);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Transpose { a } => {
                let (m, n) = self.dims2(*a);
                let ga = grad_of!(*a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Reshape { a } => {
                let ga = grad_of!(*a);
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.dims2(*a);
                let len = g.len() / m.max(1);
                let ga = grad_of!(*a);
                for i in 0..m {
                    for j in 0..len {
                        ga[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts.iter().map(|p| self.dims2(*p).1).collect();
                let m = self.dims2(parts[0]).0;
                let n: usize = widths.iter().sum();
                let mut off = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    let gp = grad_of!(*p);
                    for i in 0..m {
                        for j in 0..*w {
                            gp[i * w + j] += g[i * n + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { a, idx } => {
                let n = self.dims2(*a).1;
                let ga = grad_of!(*a);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g[r * n + j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims2(*x);
                let gv = self.value(*gamma).to_vec();
                {
                    let gg = grad_of!(*gamma);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let gb = grad_of!(*beta);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                let gx = grad_of!(*x);
                for i in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = g[i * n + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[i * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = g[i * n + j] * gv[j];
                        gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = self.dims2(*q);
                let m = self.dims2(*k).0;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; m * d];
                let mut gvv = vec![0.0; m * d];
                let mut ds = vec![0.0; m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut weighted = 0.0;
                        for j in 0..m {
                            let dp = if p[j] == 0.0 {
                                0.0
                            } else {
                                dot(gi, &vv[j * d + off..j * d + off + dh])
                            };
                            ds[j] = dp;
                            weighted += dp * p[j];
                        }
                        for j in 0..m {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let s = p[j] * (ds[j] - weighted) * scale;
                            for c in 0..dh {
                                gvv[j * d + off + c] += p[j] * gi[c];
                                gq[i * d + off + c] += s * kv[j * d + off + c];
                                gk[j * d + off + c] += s * qv[i * d + off + c];
                            }
                        }
                    }
                }
                for (dst, src) in [(*q, gq), (*k, gk), (*v, gvv)] {
                    let gd = grad_of!(dst);
                    gd.iter_mut().zip(&src).for_each(|(x, y)| *x += y);
                }
            }
            Op::SoftmaxGroups { a, group } => {
                let ga = grad_of!(*a);
                for (c, (pg, gg)) in out_val.chunks(*group).zip(g.chunks(*group)).enumerate() {
                    let w: f64 = pg.iter().zip(gg).map(|(p, d)| p * d).sum();
                    for j in 0..*group {
                        ga[c * group + j] += pg[j] * (gg[j] - w);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd + 2 * pad - kw) / stride + 1;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
                    gb[oc] += gplane.iter().sum::<f64>();
                    for ic in 0..c {
                        let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                        let gxin = &mut gx[ic * h * wd..(ic + 1) * h * wd];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let widx = ((oc * c + ic) * kh + ki) * kw + kj;
                                let wt = wv[widx];
                                let mut gw_acc = 0.0;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ki) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let base = iy as usize * wd;
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kj) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let go = gplane[oy * wo + ox];
                                        gw_acc += go * xin[base + ix as usize];
                                        gxin[base + ix as usize] += go * wt;
                                    }
                                }
                                gw[widx] += gw_acc;
                            }
                        }
                    }
                }
                for (dst, src) in [(*x, gx), (*w, gw), (*b, gb)] {
                    let gd = grad_of!(dst);
                    gd.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
            }
            Op::DeformSample {
                value,
                loc,
                weights,
                grid_h,
                grid_w,
                heads,
            } => {
                let (_, d) = self.dims2(*value);
                let (n, wcols) = self.dims2(*weights);
                let points = wcols / heads;
                let dh = d / heads;
                let (vv, lv, wv) = (self.value(*value), self.value(*loc), self.value(*weights));
                let mut gval = vec![0.0; vv.len()];
                let mut gloc = vec![0.0; lv.len()];
                let mut gwt = vec![0.0; wv.len()];
                let (gh, gwd) = (*grid_h as f64, *grid_w as f64);
                for i in 0..n {
                    for h in 0..*heads {
                        let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        for p in 0..points {
                            let col = h * points + p;
                            let a = wv[i * wcols + col];
                            let li = i * wcols * 2 + 2 * col;
                            let (corners, fx, fy) = bilinear_corners(lv[li], lv[li + 1], *grid_h, *grid_w);
                            // <go, value at corner>
                            let mut proj = [0.0; 4];
                            for (ci, (idx, _)) in corners.iter().enumerate() {
                                if let Some(idx) = idx {
                                    proj[ci] = dot(go, &vv[idx * d + h * dh..idx * d + (h + 1) * dh]);
                                }
                            }
                            gwt[i * wcols + col] +=
                                corners.iter().zip(&proj).map(|((_, cw), pr)| cw * pr).sum::<f64>();
                            let dpx = (1.0 - fy) * (proj[1] - proj[0]) + fy * (proj[3] - proj[2]);
                            let dpy = (1.0 - fx) * (proj[2] - proj[0]) + fx * (proj[3] - proj[1]);
                            gloc[li] += a * dpx * gwd;
                            gloc[li + 1] += a * dpy * gh;
                            for (idx, cw) in corners {
                                let Some(idx) = idx else { continue };
                                let f = a * cw;
                                for (dst, gv) in gval[idx * d + h * dh..idx * d + (h + 1) * dh].iter_mut().zip(go) {
                                    *dst += f * gv;
                                }
                            }
                        }
                    }
                }
                for (dst, src) in [(*value, gval), (*loc, gloc), (*weights, gwt)] {
                    let gd = grad_of!(dst);
                    gd.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
