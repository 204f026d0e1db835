//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during a forward pass. Nodes that
//! do not depend on a leaf marked `requires_grad` are skipped entirely on
//! the backward pass, which is what makes frozen-encoder training cheap.

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{ConvGeom, Layout};

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f32> },
    Relu { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f32>, rstd: Vec<f32> },
    Add { a: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    Upsample2x { x: Var },
    GlobalAvgPool { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Attention { x: Var, wq: Var, wk: Var, wv: Var, wo: Var, saved: Vec<AttnSaved> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, probs: Vec<f32>, count: usize },
    Mse { pred: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Loss ops keep their double-precision reduction here.
    precise: Option<f64>,
}

/// Per-batch-element intermediates of the attention op.
struct AttnSaved {
    tokens: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    o: Vec<f32>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient matches node shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let shape = &self.shapes[v.0];
        self.grads[v.0].take().map(|g| Tensor::new(shape, g).expect("gradient matches node shape"))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inference: bool,
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(Error::Diverged(format!("non-finite output from {op}")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never runs backward; ops skip saving intermediates.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), inference: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad && !self.inference)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v` in double precision when the op that produced it
    /// reduced in double precision (the loss ops), else its `f32` value.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, precise: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn keep(&self) -> bool {
        !self.inference
    }

    /// 2-D convolution, NCHW input and `[cout, cin, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::invalid(format!(
                    "conv2d: bias {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid(format!(
                "conv2d: input {:?} smaller than kernel {k} with padding {pad}",
                self.value(x).shape()
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, cin, h, w: wd, k, stride, pad, ho, wo };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let mut out = vec![0.0f32; cout * ncols];
        kernels::gemm(
            cout,
            geom.rows(),
            ncols,
            self.value(w).data(),
            Layout::rows(geom.rows()),
            &cols,
            Layout::rows(ncols),
            0.0,
            &mut out,
        );
        let mut out = kernels::channel_to_batch_major(&out, n, cout, ho * wo);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let bv = bias[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        check_finite(&value, "conv2d")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if self.keep() && rg { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Relu { x }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::invalid(format!(
                "group_norm: affine shapes {:?}/{:?} do not match {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let cg = c / groups;
        let m = cg * h * w;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![0.0f32; xs.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for b in 0..n {
            for g in 0..groups {
                let start = (b * c + g * cg) * h * w;
                let seg = &xs[start..start + m];
                let mean = (seg.iter().map(|&v| v as f64).sum::<f64>() / m as f64) as f32;
                let var = (seg.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>() / m as f64) as f32;
                let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let off = start + ci * h * w;
                    for i in off..off + h * w {
                        out[i] = (xs[i] - mean) * rstd * gs[ch] + bs[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        check_finite(&value, "group_norm")?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::invalid(format!(
                "concat: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatChannels { a, b }, rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, h2, w2], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    /// NCHW to `[n, c]` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        let data = self.value(x).data().chunks(p).map(|s| s.iter().sum::<f32>() / p as f32).collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// `x·wᵀ + b` for `x: [n, din]`, `w: [dout, din]`, `b: [dout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = match *self.value(x).shape() {
            [n, d] => (n, d),
            _ => return Err(Error::invalid(format!("dense: expected [n, d] input, got {:?}", self.value(x).shape()))),
        };
        let dout = match *self.value(w).shape() {
            [o, i] if i == din => o,
            _ => {
                return Err(Error::invalid(format!(
                    "dense: input {:?} incompatible with weight {:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                )))
            }
        };
        if self.value(b).shape() != [dout] {
            return Err(Error::invalid(format!("dense: bias {:?} does not match {dout}", self.value(b).shape())));
        }
        let mut out = vec![0.0f32; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(n, din, dout, self.value(x).data(), Layout::rows(din), self.value(w).data(), Layout::trans(din), 1.0, &mut out);
        let value = Tensor::new(&[n, dout], out)?;
        check_finite(&value, "dense")?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Single-head residual self-attention over the spatial positions of an
    /// NCHW tensor: `x + Wo·softmax(QKᵀ/√c)·V` with bias-free `c×c`
    /// projections.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for &m in &[wq, wk, wv, wo] {
            if self.value(m).shape() != [c, c] {
                return Err(Error::invalid(format!(
                    "attention: projection {:?} does not match {c} channels",
                    self.value(m).shape()
                )));
            }
        }
        let p = h * w;
        let scale = 1.0 / (c as f32).sqrt();
        let xs = self.value(x).data();
        let mut out = xs.to_vec();
        let mut saved = Vec::with_capacity(n);
        for b in 0..n {
            let xb = &xs[b * c * p..(b + 1) * c * p];
            // tokens = xbᵀ, p×c
            let mut tokens = vec![0.0f32; p * c];
            for ch in 0..c {
                for i in 0..p {
                    tokens[i * c + ch] = xb[ch * p + i];
                }
            }
            let proj = |m: Var| {
                let mut r = vec![0.0f32; p * c];
                kernels::gemm(p, c, c, &tokens, Layout::rows(c), self.value(m).data(), Layout::trans(c), 0.0, &mut r);
                r
            };
            let (q, k, v) = (proj(wq), proj(wk), proj(wv));
            let mut attn = vec![0.0f32; p * p];
            kernels::gemm(p, c, p, &q, Layout::rows(c), &k, Layout::trans(c), 0.0, &mut attn);
            for row in attn.chunks_mut(p) {
                let mx = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v * scale));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v * scale - mx).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            let mut o = vec![0.0f32; p * c];
            kernels::gemm(p, p, c, &attn, Layout::rows(p), &v, Layout::rows(c), 0.0, &mut o);
            let mut y = vec![0.0f32; p * c];
            kernels::gemm(p, c, c, &o, Layout::rows(c), self.value(wo).data(), Layout::trans(c), 0.0, &mut y);
            let ob = &mut out[b * c * p..(b + 1) * c * p];
            for ch in 0..c {
                for i in 0..p {
                    ob[ch * p + i] += y[i * c + ch];
                }
            }
            if self.keep() {
                saved.push(AttnSaved { tokens, q, k, v, attn, o });
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        check_finite(&value, "self_attention")?;
        let rg = [x, wq, wk, wv, wo].iter().any(|&v| self.rg(v));
        if !rg {
            saved.clear();
        }
        Ok(self.push(value, Op::Attention { x, wq, wk, wv, wo, saved }, rg))
    }

    /// Mean softmax cross-entropy over all positions whose label is not
    /// `ignore`. `logits` is `[n, classes, ...]`; `labels` has one entry per
    /// `(n, position)`. Yields a zero loss when every label is ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!("cross-entropy: logits need a class axis, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        if labels.len() != n * p {
            return Err(Error::invalid(format!(
                "cross-entropy: {} labels for logits {shape:?} (need {})",
                labels.len(),
                n * p
            )));
        }
        let zs = self.value(logits).data();
        let mut probs = vec![0.0f32; zs.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for b in 0..n {
            for i in 0..p {
                let at = |k: usize| (b * c + k) * p + i;
                let mx = (0..c).map(|k| zs[at(k)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0f64;
                for k in 0..c {
                    sum += (zs[at(k)] as f64 - mx).exp();
                }
                for k in 0..c {
                    probs[at(k)] = ((zs[at(k)] as f64 - mx).exp() / sum) as f32;
                }
                let label = labels[b * p + i];
                if label == ignore {
                    continue;
                }
                if label as usize >= c {
                    return Err(Error::data(format!("label {label} outside {c} classes")));
                }
                total += sum.ln() + mx - zs[at(label as usize)] as f64;
                count += 1;
            }
        }
        let precise = if count == 0 { 0.0 } else { total / count as f64 };
        let value = Tensor::scalar(precise as f32);
        check_finite(&value, "softmax_cross_entropy")?;
        let rg = self.rg(logits);
        let probs = if rg { probs } else { Vec::new() };
        let v = self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), ignore, probs, count }, rg);
        self.nodes[v.0].precise = Some(precise);
        Ok(v)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.value(pred).ensure_same_shape(target, "mse")?;
        let n = target.numel();
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let precise = sum / n as f64;
        let value = Tensor::scalar(precise as f32);
        check_finite(&value, "mse")?;
        let rg = self.rg(pred);
        let v = self.push(value, Op::Mse { pred, target: target.clone() }, rg);
        self.nodes[v.0].precise = Some(precise);
        Ok(v)
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.inference {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = self.value(*w).shape()[0];
                let p = geom.ho * geom.wo;
                let ncols = geom.cols();
                let krows = geom.rows();
                let gmat = kernels::batch_to_channel_major(gy, geom.n, cout, p);
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for (co, slot) in gb.iter_mut().enumerate() {
                            *slot += gmat[co * ncols..(co + 1) * ncols].iter().sum::<f32>();
                        }
                    });
                }
                self.accumulate(grads, *w, |gw| {
                    kernels::gemm(cout, ncols, krows, &gmat, Layout::rows(ncols), cols, Layout::trans(ncols), 1.0, gw);
                });
                if self.rg(*x) {
                    let mut dcols = vec![0.0f32; krows * ncols];
                    kernels::gemm(
                        krows,
                        cout,
                        ncols,
                        self.value(*w).data(),
                        Layout::trans(krows),
                        &gmat,
                        Layout::rows(ncols),
                        0.0,
                        &mut dcols,
                    );
                    self.accumulate(grads, *x, |gx| kernels::col2im(&dcols, geom, gx));
                }
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xs).zip(gy) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let cg = c / groups;
                let hw = h * w;
                let m = (cg * hw) as f32;
                let xs = self.value(*x).data();
                let gs = self.value(*gamma).data();
                let xhat = |i: usize, stat: usize| (xs[i] - mean[stat]) * rstd[stat];
                self.accumulate(grads, *gamma, |gg| {
                    for b in 0..n {
                        for ch in 0..c {
                            let stat = b * groups + ch / cg;
                            let off = (b * c + ch) * hw;
                            gg[ch] += (off..off + hw).map(|i| gy[i] * xhat(i, stat)).sum::<f32>();
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            gb[ch] += gy[off..off + hw].iter().sum::<f32>();
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for b in 0..n {
                        for g in 0..*groups {
                            let stat = b * groups + g;
                            let start = (b * c + g * cg) * hw;
                            let (mut sum_d, mut sum_dx) = (0.0f32, 0.0f32);
                            for i in start..start + cg * hw {
                                let d = gy[i] * gs[(i / hw) % c];
                                sum_d += d;
                                sum_dx += d * xhat(i, stat);
                            }
                            for i in start..start + cg * hw {
                                let d = gy[i] * gs[(i / hw) % c];
                                gx[i] += rstd[stat] / m * (m * d - sum_d - xhat(i, stat) * sum_dx);
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |g| g.iter_mut().zip(gy).for_each(|(s, d)| *s += d));
                }
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank checked in forward");
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                self.accumulate(grads, *a, |g| {
                    for i in 0..n {
                        let src = &gy[i * (pa + pb)..i * (pa + pb) + pa];
                        g[i * pa..(i + 1) * pa].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..n {
                        let src = &gy[i * (pa + pb) + pa..(i + 1) * (pa + pb)];
                        g[i * pb..(i + 1) * pb].iter_mut().zip(src).for_each(|(s, d)| *s += d);
                    }
                });
            }
            Op::Upsample2x { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |g| {
                    for p in 0..n * c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                g[(p * h + y / 2) * w + xx / 2] += gy[(p * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let p = h * w;
                self.accumulate(grads, *x, |g| {
                    for (i, chunk) in g.chunks_mut(p).enumerate() {
                        let d = gy[i] / p as f32;
                        chunk.iter_mut().for_each(|s| *s += d);
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (n, din) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let dout = self.value(*w).shape()[0];
                self.accumulate(grads, *b, |gb| {
                    for row in gy.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                });
                let xs = self.value(*x).data();
                self.accumulate(grads, *w, |gw| {
                    kernels::gemm(dout, n, din, gy, Layout::trans(dout), xs, Layout::rows(din), 1.0, gw);
                });
                let ws = self.value(*w).data();
                self.accumulate(grads, *x, |gx| {
                    kernels::gemm(n, dout, din, gy, Layout::rows(dout), ws, Layout::rows(din), 1.0, gx);
                });
            }
            Op::Attention { x, wq, wk, wv, wo, saved } => {
                self.attention_backward(*x, [*wq, *wk, *wv, *wo], saved, gy, grads);
            }
            Op::SoftmaxCrossEntropy { logits, labels, ignore, probs, count } => {
                if *count == 0 {
                    return;
                }
                let shape = self.value(*logits).shape();
                let (n, c) = (shape[0], shape[1]);
                let p: usize = shape[2..].iter().product();
                let scale = gy[0] / *count as f32;
                self.accumulate(grads, *logits, |g| {
                    for b in 0..n {
                        for i in 0..p {
                            let label = labels[b * p + i];
                            if label == *ignore {
                                continue;
                            }
                            for k in 0..c {
                                let at = (b * c + k) * p + i;
                                let onehot = if k == label as usize { 1.0 } else { 0.0 };
                                g[at] += (probs[at] - onehot) * scale;
                            }
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let ps = self.value(*pred).data();
                let scale = 2.0 * gy[0] / target.numel() as f32;
                self.accumulate(grads, *pred, |g| {
                    for ((s, a), b) in g.iter_mut().zip(ps).zip(target.data()) {
                        *s += (a - b) * scale;
                    }
                });
            }
        }
    }

    fn attention_backward(&self, x: Var, proj: [Var; 4], saved: &[AttnSaved], gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let [wq, wk, wv, wo] = proj;
        let (n, c, h, w) = self.value(x).dims4().expect("rank checked in forward");
        let p = h * w;
        let scale = 1.0 / (c as f32).sqrt();
        let mut gq_w = vec![0.0f32; c * c];
        let mut gk_w = vec![0.0f32; c * c];
        let mut gv_w = vec![0.0f32; c * c];
        let mut go_w = vec![0.0f32; c * c];
        let mut gx_all = gy.to_vec();
        for (b, s) in saved.iter().enumerate().take(n) {
            let gyb = &gy[b * c * p..(b + 1) * c * p];
            let mut dy = vec![0.0f32; p * c];
            for ch in 0..c {
                for i in 0..p {
                    dy[i * c + ch] = gyb[ch * p + i];
                }
            }
            // y = o·woᵀ
            kernels::gemm(c, p, c, &dy, Layout::trans(c), &s.o, Layout::rows(c), 1.0, &mut go_w);
            let mut d_o = vec![0.0f32; p * c];
            kernels::gemm(p, c, c, &dy, Layout::rows(c), self.value(wo).data(), Layout::rows(c), 0.0, &mut d_o);
            // o = attn·v
            let mut d_attn = vec![0.0f32; p * p];
            kernels::gemm(p, c, p, &d_o, Layout::rows(c), &s.v, Layout::trans(c), 0.0, &mut d_attn);
            let mut d_v = vec![0.0f32; p * c];
            kernels::gemm(p, p, c, &s.attn, Layout::trans(p), &d_o, Layout::rows(c), 0.0, &mut d_v);
            // softmax rows, then the 1/√c scaling
            let mut d_s = vec![0.0f32; p * p];
            for i in 0..p {
                let a = &s.attn[i * p..(i + 1) * p];
                let da = &d_attn[i * p..(i + 1) * p];
                let dot: f32 = a.iter().zip(da).map(|(x, y)| x * y).sum();
                for j in 0..p {
                    d_s[i * p + j] = a[j] * (da[j] - dot) * scale;
                }
            }
            let mut d_q = vec![0.0f32; p * c];
            kernels::gemm(p, p, c, &d_s, Layout::rows(p), &s.k, Layout::rows(c), 0.0, &mut d_q);
            let mut d_k = vec![0.0f32; p * c];
            kernels::gemm(p, p, c, &d_s, Layout::trans(p), &s.q, Layout::rows(c), 0.0, &mut d_k);
            // q/k/v = tokens·wᵀ
            for (dm, acc) in [(&d_q, &mut gq_w), (&d_k, &mut gk_w), (&d_v, &mut gv_w)] {
                kernels::gemm(c, p, c, dm, Layout::trans(c), &s.tokens, Layout::rows(c), 1.0, acc);
            }
            if self.rg(x) {
                let mut d_tok = vec![0.0f32; p * c];
                for (dm, m) in [(&d_q, wq), (&d_k, wk), (&d_v, wv)] {
                    kernels::gemm(p, c, c, dm, Layout::rows(c), self.value(m).data(), Layout::rows(c), 1.0, &mut d_tok);
                }
                let gxb = &mut gx_all[b * c * p..(b + 1) * c * p];
                for ch in 0..c {
                    for i in 0..p {
                        gxb[ch * p + i] += d_tok[i * c + ch];
                    }
                }
            }
        }
        for (m, g) in [(wq, gq_w), (wk, gk_w), (wv, gv_w), (wo, go_w)] {
            self.accumulate(grads, m, |slot| slot.iter_mut().zip(&g).for_each(|(s, d)| *s += d));
        }
        self.accumulate(grads, x, |slot| slot.iter_mut().zip(&gx_all).for_each(|(s, d)| *s += d));
    }
}
