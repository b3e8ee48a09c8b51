//! A small reverse-mode automatic differentiation tape.
//!
//! Every op works on whole matrices; the attention, pooling, convolution and
//! loss ops are fused with hand-written backward passes so a training batch
//! builds a few hundred nodes rather than millions.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParameterStore};
use crate::tensor::{axpy, dot, matmul_at_into, matmul_bt_into, matmul_into, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Padded batch of sequences laid out as `batch * max_len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub causal: bool,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>, max_len: usize, causal: bool) -> Self {
        debug_assert!(lengths.iter().all(|&l| l <= max_len));
        Self { max_len, lengths, causal }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.lengths.len() * self.max_len
    }

    /// Row index of the last real slot of sequence `b`.
    pub fn last_row(&self, b: usize) -> usize {
        b * self.max_len + self.lengths[b].saturating_sub(1)
    }
}

/// Geometry of a 2-D convolution over `in_c × in_h × in_w` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                img[(c * self.in_h + iy as usize) * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            img[(c * self.in_h + iy as usize) * self.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Dropout { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { src: Var, idx: Vec<Option<usize>> },
    ConcatCols(Vec<Var>),
    RowDot(Var, Var),
    Attention { qkv: Var, layout: SeqLayout, heads: usize, probs: Vec<f64> },
    AttnPool { h: Var, query: Var, layout: SeqLayout, weights: Vec<f64> },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    AvgPool { x: Var, channels: usize, spatial: usize },
    SoftmaxCe { logits: Var, labels: Vec<Option<usize>>, probs: Vec<f64>, scale: f64 },
    BceLogits { scores: Var, positive: Vec<bool>, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(Var, ParamId)>,
    bound: HashMap<(ParamId, bool), Var>,
    grad_enabled: bool,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl Graph {
    /// Inference graph: dropout is a no-op.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            training: false,
            rng: None,
        }
    }

    /// Training graph whose dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self { training: true, rng: Some(rng), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Toggles whether parameters bound from now on receive gradients.
    /// Returns the previous setting.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that collects a gradient but is not tied to a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Frozen parameters and parameters bound
    /// while gradients are disabled become constants.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let live = self.grad_enabled && store.get(id).trainable;
        if let Some(&v) = self.bound.get(&(id, live)) {
            return v;
        }
        let value = store.value_tensor(id);
        let v = self.push(value, Op::Leaf, live);
        if live {
            self.bindings.push((v, id));
        }
        self.bound.insert((id, live), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dims {}x{} · {}x{}", ta.rows, ta.cols, tb.rows, tb.cols);
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(m, n);
        matmul_into(&ta.data, &tb.data, &mut out.data, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_bt inner dims");
        let (m, k, n) = (ta.rows, ta.cols, tb.rows);
        let mut out = Tensor::zeros(m, n);
        matmul_bt_into(&ta.data, &tb.data, &mut out.data, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!(tb.len(), tx.cols, "bias width mismatch");
        let mut out = tx.clone();
        if tx.cols > 0 {
            for row in out.data.chunks_mut(tx.cols) {
                for (o, bi) in row.iter_mut().zip(&tb.data) {
                    *o += bi;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_vec(tx.rows, tx.cols, tx.data.iter().map(|v| v * s).collect());
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_vec(tx.rows, tx.cols, tx.data.iter().map(|v| v.max(0.0)).collect());
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_vec(tx.rows, tx.cols, tx.data.iter().map(|&v| gelu(v)).collect());
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Inverted dropout; identity outside training graphs.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let n = self.value(x).len();
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let tx = self.value(x);
        let out = Tensor::from_vec(tx.rows, tx.cols, tx.data.iter().zip(&mask).map(|(v, m)| v * m).collect());
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Row-wise layer normalisation with learned gain and bias (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows, tx.cols);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Row gather; `None` yields a zero row that receives no gradient.
    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>) -> Var {
        let ts = self.value(src);
        let cols = ts.cols;
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                assert!(i < ts.rows, "gather index {i} out of {} rows", ts.rows);
                out.row_mut(r).copy_from_slice(ts.row(i));
            }
        }
        let rg = self.rg(src);
        self.push(out, Op::Gather { src, idx }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let tp = self.value(p);
            assert_eq!(tp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * total + off..r * total + off + w].copy_from_slice(tp.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Per-row inner products of two equally shaped matrices, as an `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "row_dot shape mismatch");
        let data = (0..ta.rows).map(|r| dot(ta.row(r), tb.row(r))).collect();
        let out = Tensor::from_vec(ta.rows, 1, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowDot(a, b), rg)
    }

    /// Multi-head scaled dot-product self-attention over a padded batch.
    ///
    /// `qkv` holds queries, keys and values side by side (`rows × 3d`).
    /// Queries attend to real slots only (and only to earlier-or-equal slots
    /// when the layout is causal); padded query rows produce zeros.
    pub fn attention(&mut self, qkv: Var, layout: &SeqLayout, heads: usize) -> Var {
        let t = self.value(qkv);
        assert_eq!(t.rows, layout.rows(), "attention rows do not match layout");
        assert_eq!(t.cols % 3, 0);
        let d = t.cols / 3;
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let l = layout.max_len;
        let mut out = Tensor::zeros(t.rows, d);
        let mut probs = vec![0.0; layout.batch() * heads * l * l];
        let mut scores = vec![0.0; l];
        for (b, &len) in layout.lengths.iter().enumerate() {
            for h in 0..heads {
                let pbase = (b * heads + h) * l * l;
                for q in 0..len {
                    let qrow = &t.row(b * l + q)[h * dh..(h + 1) * dh];
                    let kmax = if layout.causal { q + 1 } else { len };
                    let mut mx = f64::NEG_INFINITY;
                    for (s, sc) in scores.iter_mut().enumerate().take(kmax) {
                        let krow = &t.row(b * l + s)[d + h * dh..d + (h + 1) * dh];
                        *sc = dot(qrow, krow) * scale;
                        mx = mx.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(kmax) {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let orow = &mut out.data[(b * l + q) * d + h * dh..(b * l + q) * d + (h + 1) * dh];
                    for s in 0..kmax {
                        let p = scores[s] / z;
                        probs[pbase + q * l + s] = p;
                        let vrow = &t.row(b * l + s)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        axpy(p, vrow, orow);
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        self.push(out, Op::Attention { qkv, layout: layout.clone(), heads, probs }, rg)
    }

    /// Attention pooling over each padded segment: weights are a softmax of
    /// `h_t · query` over the segment's real slots, output is the weighted sum.
    pub fn attn_pool(&mut self, h: Var, query: Var, layout: &SeqLayout) -> Var {
        let th = self.value(h);
        let tq = self.value(query);
        assert_eq!(th.rows, layout.rows());
        assert_eq!(tq.len(), th.cols, "pooling query width mismatch");
        let d = th.cols;
        let l = layout.max_len;
        let mut out = Tensor::zeros(layout.batch(), d);
        let mut weights = vec![0.0; layout.rows()];
        for (b, &len) in layout.lengths.iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for t in 0..len {
                let s = dot(th.row(b * l + t), &tq.data);
                weights[b * l + t] = s;
                mx = mx.max(s);
            }
            let mut z = 0.0;
            for t in 0..len {
                let e = (weights[b * l + t] - mx).exp();
                weights[b * l + t] = e;
                z += e;
            }
            for t in 0..len {
                weights[b * l + t] /= z;
                axpy(weights[b * l + t], th.row(b * l + t), out.row_mut(b));
            }
        }
        let rg = self.rg(h) || self.rg(query);
        self.push(out, Op::AttnPool { h, query, layout: layout.clone(), weights }, rg)
    }

    /// Pooling weights of an `attn_pool` node (row-aligned with its input).
    pub fn pool_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::AttnPool { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Attention probabilities of an `attention` node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2-D convolution. `x` is `n × (in_c·in_h·in_w)`, `w` is
    /// `out_c × (in_c·k·k)`, `b` is `1 × out_c`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        assert_eq!(tx.cols, geom.in_c * geom.in_h * geom.in_w, "conv input shape");
        assert_eq!((tw.rows, tw.cols), (geom.out_c, geom.col_rows()), "conv weight shape");
        assert_eq!(tb.len(), geom.out_c, "conv bias shape");
        let n = tx.rows;
        let (cr, p) = (geom.col_rows(), geom.out_pixels());
        let mut cols = vec![0.0; n * cr * p];
        let mut out = Tensor::zeros(n, geom.out_c * p);
        for i in 0..n {
            let c = &mut cols[i * cr * p..(i + 1) * cr * p];
            geom.im2col(tx.row(i), c);
            let o = out.row_mut(i);
            matmul_into(&tw.data, c, o, geom.out_c, cr, p, false);
            for (oc, bias) in tb.data.iter().enumerate() {
                o[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv { x, w, b, geom, cols }, rg)
    }

    /// Global average over the spatial positions of each channel.
    pub fn avg_pool(&mut self, x: Var, channels: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.cols % channels, 0);
        let spatial = tx.cols / channels;
        let mut out = Tensor::zeros(tx.rows, channels);
        for r in 0..tx.rows {
            let row = tx.row(r);
            for c in 0..channels {
                out.data[r * channels + c] = row[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool { x, channels, spatial }, rg)
    }

    /// `scale · Σ_rows −log softmax(logits_r)[label_r]`, skipping unlabeled rows.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<Option<usize>>, scale: f64) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rows, labels.len());
        let v = tl.cols;
        let mut probs = vec![0.0; tl.rows * v];
        let mut loss = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            assert!(y < v, "label {y} out of range {v}");
            let row = tl.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            loss += lse - row[y];
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss * scale), Op::SoftmaxCe { logits, labels, probs, scale }, rg)
    }

    /// `scale · Σ −log σ(±s)`: binary cross-entropy on logits, positives
    /// labelled `true`. Uses the stable log-sigmoid form.
    pub fn bce_logits(&mut self, scores: Var, positive: Vec<bool>, scale: f64) -> Var {
        let ts = self.value(scores);
        assert_eq!(ts.len(), positive.len());
        let loss: f64 = ts
            .data
            .iter()
            .zip(&positive)
            .map(|(&r, &pos)| if pos { -log_sigmoid(r) } else { -log_sigmoid(-r) })
            .sum();
        let rg = self.rg(scores);
        self.push(Tensor::scalar(loss * scale), Op::BceLogits { scores, positive, scale }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
    }

    /// Adds the gradients of every bound trainable parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) {
        for &(v, id) in &self.bindings {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops whose backward only needs node values and the output gradient
        // are dispatched on a cheap copy of the op's inputs.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows, self.value(a).cols);
                let n = self.value(b).cols;
                if self.rg(a) {
                    let bv = self.value(b).data.clone();
                    self.acc(a, |ga| matmul_bt_into(g, &bv, ga, m, n, k, true));
                }
                if self.rg(b) {
                    let av = self.value(a).data.clone();
                    self.acc(b, |gb| matmul_at_into(&av, g, gb, m, k, n, true));
                }
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows, self.value(a).cols);
                let n = self.value(b).rows;
                if self.rg(a) {
                    let bv = self.value(b).data.clone();
                    self.acc(a, |ga| matmul_into(g, &bv, ga, m, n, k, true));
                }
                if self.rg(b) {
                    let av = self.value(a).data.clone();
                    self.acc(b, |gb| matmul_at_into(g, &av, gb, m, n, k, true));
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga| axpy(1.0, g, ga));
                self.acc(b, |gb| axpy(1.0, g, gb));
            }
            Op::AddBias(x, b) => {
                let (x, b) = (*x, *b);
                let cols = self.value(x).cols;
                self.acc(x, |gx| axpy(1.0, g, gx));
                if cols > 0 {
                    self.acc(b, |gb| {
                        for row in g.chunks(cols) {
                            axpy(1.0, row, gb);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let bv = self.value(b).data.clone();
                    self.acc(a, |ga| {
                        for ((d, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                            *d += gi * bi;
                        }
                    });
                }
                if self.rg(b) {
                    let av = self.value(a).data.clone();
                    self.acc(b, |gb| {
                        for ((d, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                            *d += gi * ai;
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(*x, |gx| axpy(s, g, gx));
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = self.value(x).data.clone();
                self.acc(x, |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let x = *x;
                let xv = self.value(x).data.clone();
                self.acc(x, |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(&xv) {
                        *d += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc(*x, |gx| gx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Dropout { x, mask } => {
                self.acc(*x, |gx| {
                    for ((d, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let cols = self.value(x).cols;
                let rows = self.value(x).rows;
                let gv = self.value(gain).data.clone();
                if self.rg(gain) {
                    self.acc(gain, |gg| {
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    });
                }
                if self.rg(bias) {
                    self.acc(bias, |gb| {
                        for r in 0..rows {
                            axpy(1.0, &g[r * cols..(r + 1) * cols], gb);
                        }
                    });
                }
                if self.rg(x) {
                    self.acc(x, |gx| {
                        let nf = cols as f64;
                        for r in 0..rows {
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for c in 0..cols {
                                let dy = g[r * cols + c] * gv[c];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat[r * cols + c];
                            }
                            for c in 0..cols {
                                let dy = g[r * cols + c] * gv[c];
                                gx[r * cols + c] +=
                                    rstd[r] * (dy - sum_dy / nf - xhat[r * cols + c] * sum_dy_xhat / nf);
                            }
                        }
                    });
                }
            }
            Op::Gather { src, idx } => {
                let cols = self.value(*src).cols;
                self.acc(*src, |gs| {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            axpy(1.0, &g[r * cols..(r + 1) * cols], &mut gs[i * cols..(i + 1) * cols]);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows;
                let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    self.acc(p, |gp| {
                        for r in 0..rows {
                            axpy(1.0, &g[r * total + off..r * total + off + w], &mut gp[r * w..(r + 1) * w]);
                        }
                    });
                    off += w;
                }
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let cols = self.value(a).cols;
                if self.rg(a) {
                    let bv = self.value(b).data.clone();
                    self.acc(a, |ga| {
                        for (r, gr) in g.iter().enumerate() {
                            axpy(*gr, &bv[r * cols..(r + 1) * cols], &mut ga[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                if self.rg(b) {
                    let av = self.value(a).data.clone();
                    self.acc(b, |gb| {
                        for (r, gr) in g.iter().enumerate() {
                            axpy(*gr, &av[r * cols..(r + 1) * cols], &mut gb[r * cols..(r + 1) * cols]);
                        }
                    });
                }
            }
            Op::Attention { qkv, layout, heads, probs } => {
                let qkv = *qkv;
                let t = self.value(qkv).clone();
                let d = t.cols / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let l = layout.max_len;
                let mut dp = vec![0.0; l];
                self.acc(qkv, |gq| {
                    for (b, &len) in layout.lengths.iter().enumerate() {
                        for h in 0..*heads {
                            let pbase = (b * heads + h) * l * l;
                            for q in 0..len {
                                let kmax = if layout.causal { q + 1 } else { len };
                                let go = &g[(b * l + q) * d + h * dh..(b * l + q) * d + (h + 1) * dh];
                                let mut wsum = 0.0;
                                for s in 0..kmax {
                                    let p = probs[pbase + q * l + s];
                                    let vrow = &t.row(b * l + s)[2 * d + h * dh..2 * d + (h + 1) * dh];
                                    dp[s] = dot(go, vrow);
                                    wsum += p * dp[s];
                                    let gv = &mut gq[(b * l + s) * 3 * d + 2 * d + h * dh
                                        ..(b * l + s) * 3 * d + 2 * d + (h + 1) * dh];
                                    axpy(p, go, gv);
                                }
                                let qrow = t.row(b * l + q)[h * dh..(h + 1) * dh].to_vec();
                                for s in 0..kmax {
                                    let p = probs[pbase + q * l + s];
                                    let ds = p * (dp[s] - wsum) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = &t.row(b * l + s)[d + h * dh..d + (h + 1) * dh];
                                    let gqr =
                                        &mut gq[(b * l + q) * 3 * d + h * dh..(b * l + q) * 3 * d + (h + 1) * dh];
                                    axpy(ds, krow, gqr);
                                    let gk = &mut gq
                                        [(b * l + s) * 3 * d + d + h * dh..(b * l + s) * 3 * d + d + (h + 1) * dh];
                                    axpy(ds, &qrow, gk);
                                }
                            }
                        }
                    }
                });
            }
            Op::AttnPool { h, query, layout, weights } => {
                let (h, query) = (*h, *query);
                let th = self.value(h).clone();
                let qv = self.value(query).data.clone();
                let d = th.cols;
                let l = layout.max_len;
                // ds_t = α_t (g·h_t − Σ_s α_s g·h_s)
                let mut ds = vec![0.0; layout.rows()];
                for (b, &len) in layout.lengths.iter().enumerate() {
                    let go = &g[b * d..(b + 1) * d];
                    let mut wsum = 0.0;
                    for t in 0..len {
                        let da = dot(go, th.row(b * l + t));
                        ds[b * l + t] = da;
                        wsum += weights[b * l + t] * da;
                    }
                    for t in 0..len {
                        ds[b * l + t] = weights[b * l + t] * (ds[b * l + t] - wsum);
                    }
                }
                self.acc(h, |gh| {
                    for (b, &len) in layout.lengths.iter().enumerate() {
                        let go = &g[b * d..(b + 1) * d];
                        for t in 0..len {
                            let row = &mut gh[(b * l + t) * d..(b * l + t + 1) * d];
                            axpy(weights[b * l + t], go, row);
                            axpy(ds[b * l + t], &qv, row);
                        }
                    }
                });
                self.acc(query, |gqv| {
                    for (b, &len) in layout.lengths.iter().enumerate() {
                        for t in 0..len {
                            axpy(ds[b * l + t], th.row(b * l + t), gqv);
                        }
                    }
                });
            }
            Op::Conv { x, w, b, geom, cols } => {
                let (x, w, b) = (*x, *w, *b);
                let n = self.value(x).rows;
                let (cr, p) = (geom.col_rows(), geom.out_pixels());
                let oc = geom.out_c;
                let step = oc * p;
                if self.rg(w) {
                    self.acc(w, |gw| {
                        for i in 0..n {
                            matmul_bt_into(&g[i * step..(i + 1) * step], &cols[i * cr * p..(i + 1) * cr * p], gw, oc, p, cr, true);
                        }
                    });
                }
                if self.rg(b) {
                    self.acc(b, |gb| {
                        for i in 0..n {
                            for c in 0..oc {
                                gb[c] += g[i * step + c * p..i * step + (c + 1) * p].iter().sum::<f64>();
                            }
                        }
                    });
                }
                if self.rg(x) {
                    let wv = self.value(w).data.clone();
                    let in_len = self.value(x).cols;
                    let mut dcols = vec![0.0; cr * p];
                    self.acc(x, |gx| {
                        for i in 0..n {
                            matmul_at_into(&wv, &g[i * step..(i + 1) * step], &mut dcols, oc, cr, p, false);
                            geom.col2im_add(&dcols, &mut gx[i * in_len..(i + 1) * in_len]);
                        }
                    });
                }
            }
            Op::AvgPool { x, channels, spatial } => {
                let (channels, spatial) = (*channels, *spatial);
                let inv = 1.0 / spatial as f64;
                self.acc(*x, |gx| {
                    for (r, grow) in g.chunks(channels).enumerate() {
                        for c in 0..channels {
                            let base = r * channels * spatial + c * spatial;
                            gx[base..base + spatial].iter_mut().for_each(|v| *v += grow[c] * inv);
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs, scale } => {
                let v = self.value(*logits).cols;
                let s = g[0] * scale;
                self.acc(*logits, |gl| {
                    for (r, label) in labels.iter().enumerate() {
                        let Some(y) = *label else { continue };
                        for c in 0..v {
                            gl[r * v + c] += s * probs[r * v + c];
                        }
                        gl[r * v + y] -= s;
                    }
                });
            }
            Op::BceLogits { scores, positive, scale } => {
                let sv = self.value(*scores).data.clone();
                let s = g[0] * scale;
                self.acc(*scores, |gs| {
                    for ((d, r), pos) in gs.iter_mut().zip(&sv).zip(positive) {
                        let sig = sigmoid(*r);
                        *d += s * if *pos { sig - 1.0 } else { sig };
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for any finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}
