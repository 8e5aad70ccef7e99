use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::attention::{self, AttnDims};
use crate::kernels::conv::{self, ConvGeom, ImageDims};
use crate::kernels::{gemm, norm, pointwise, resize};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally supplied running statistics.
    Eval,
}

/// The recorded operation that produced a node, with whatever the backward
/// rule needs beyond the input values.
pub enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x + e` where `e`'s shape is a suffix of `x`'s.
    AddSuffix(Var, Var),
    /// `[rest] -> [n, rest]`.
    RepeatBatch(Var),
    Sum(Var),
    Mean(Var),
    /// `[..., K] · [K, N] -> [..., N]`.
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, scale: T, probs: Vec<T> },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, dims: ImageDims, c_out: usize },
    Deconv2x2 { x: Var, w: Var, bias: Option<Var>, dims: ImageDims, c_out: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, var: Vec<T>, inv_std: Vec<T>, mode: BatchNormMode },
    Resize { x: Var, dims: ImageDims, out_h: usize, out_w: usize },
    /// Mean over rows of `-Σ_k target·log softmax(logits)`.
    CrossEntropy { logits: Var, target: Vec<T>, classes: usize },
    /// Mean over rows of `-Σ_k target·log max(p, eps)`.
    Nll { probs: Var, target: Vec<T>, eps: T },
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<ImageDims> {
    match *shape {
        [batch, height, width, channels] => Ok(ImageDims { batch, height, width, channels }),
        _ => Err(Error::shape(op, format!("expected [B,H,W,C], got {shape:?}"))),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sum_leading<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    conv::sum_rows(g, inner)
}

impl<T: Real> Tape<T> {
    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = pointwise::zip_map(self.val(a), self.val(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", t, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = pointwise::zip_map(self.val(a), self.val(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("mul", t, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push("scale", t, &[a], Op::Scale(a, c))
    }

    /// Adds `e` broadcast over the leading axes of `x` (bias rows, positional
    /// embeddings shared across a batch).
    pub fn add_suffix(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xs, es) = (self.shape(x), self.shape(e));
        if es.len() > xs.len() || xs[xs.len() - es.len()..] != *es {
            return Err(Error::shape("add_suffix", format!("{es:?} is not a suffix of {xs:?}")));
        }
        let inner = self.value(e).len();
        let ev = self.val(e);
        let out = self.val(x).chunks(inner).flat_map(|row| row.iter().zip(ev).map(|(&a, &b)| a + b)).collect();
        let t = Tensor::new(xs.to_vec(), out)?;
        self.push("add_suffix", t, &[x, e], Op::AddSuffix(x, e))
    }

    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let src = self.val(x);
        let out = (0..n).flat_map(|_| src.iter().copied()).collect();
        let t = Tensor::new(shape, out)?;
        self.push("repeat_batch", t, &[x], Op::RepeatBatch(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let t = Tensor::scalar(self.value(x).sum() / n);
        self.push("mean", t, &[x], Op::Mean(x))
    }

    /// Matrix product over the last axis of `a`: `[..., K] · [K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(self.val(a), false, self.val(b), false, &mut out, m, k, n, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, &[a, b], Op::MatMul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, &[x], Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        self.push("permute", t, &[x], Op::Permute(x, axes.to_vec()))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow(axis, start, len)?;
        self.push("narrow", t, &[x], Op::Narrow { x, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat(&values, axis)?;
        self.push("concat", t, parts, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", format!("affine for last extent {d}")));
        }
        let (y, inv_std) = norm::layer_norm_forward(self.val(x), self.val(gain), self.val(bias), eps);
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        self.push("layer_norm", t, &[x, gain, bias], Op::LayerNorm { x, gain, bias, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::new(self.shape(x).to_vec(), pointwise::map(self.val(x), pointwise::gelu))?;
        self.push("gelu", t, &[x], Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::new(self.shape(x).to_vec(), pointwise::map(self.val(x), |v| v.max(T::zero())))?;
        self.push("relu", t, &[x], Op::Relu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let t = Tensor::new(self.shape(x).to_vec(), pointwise::softmax_rows(self.val(x), n))?;
        self.push("softmax", t, &[x], Op::Softmax(x))
    }

    /// Multi-head scaled dot-product attention, `q: [B,Nq,D]`, `k, v: [B,Nk,D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: T) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let ok = sq.len() == 3 && sk.len() == 3 && sk == sv && sq[0] == sk[0] && sq[2] == sk[2];
        if !ok {
            return Err(Error::shape("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::shape("attention", format!("dim {} not divisible by {heads} heads", sq[2])));
        }
        let dims = AttnDims { batch: sq[0], queries: sq[1], keys: sk[1], dim: sq[2], heads };
        let (out, probs) = attention::forward(self.val(q), self.val(k), self.val(v), dims, scale);
        let t = Tensor::new(sq.to_vec(), out)?;
        self.push("attention", t, &[q, k, v], Op::Attention { q, k, v, dims, scale, probs })
    }

    /// NHWC convolution, weights `[k, k, C_in, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = image_dims("conv2d", self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[0] != geom.kernel || ws[1] != geom.kernel || ws[2] != dims.channels {
            return Err(Error::shape(
                "conv2d",
                format!("weight {ws:?} for {} input channels, kernel {}", dims.channels, geom.kernel),
            ));
        }
        let c_out = ws[3];
        if let Some(b) = bias {
            same_shape("conv2d bias", self.shape(b), &[c_out])?;
        }
        let out = conv::conv2d_forward(self.val(x), dims, self.val(w), bias.map(|b| self.val(b)), c_out, geom);
        let shape = [dims.batch, geom.out_extent(dims.height), geom.out_extent(dims.width), c_out];
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", t, &inputs, Op::Conv2d { x, w, bias, geom, dims, c_out })
    }

    /// 2×2 stride-2 transposed convolution, weights `[C_in, 2, 2, C_out]`.
    pub fn deconv2x2(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let dims = image_dims("deconv2x2", self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[0] != dims.channels || ws[1] != 2 || ws[2] != 2 {
            return Err(Error::shape("deconv2x2", format!("weight {ws:?} for {} input channels", dims.channels)));
        }
        let c_out = ws[3];
        if let Some(b) = bias {
            same_shape("deconv2x2 bias", self.shape(b), &[c_out])?;
        }
        let out = conv::deconv2x2_forward(self.val(x), dims, self.val(w), bias.map(|b| self.val(b)), c_out);
        let t = Tensor::new([dims.batch, 2 * dims.height, 2 * dims.width, c_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("deconv2x2", t, &inputs, Op::Deconv2x2 { x, w, bias, dims, c_out })
    }

    /// Per-channel batch normalization of an NHWC tensor. In eval mode
    /// `running` supplies `(mean, var)`; in train mode batch statistics are used
    /// and can be read back with [`Tape::batch_norm_stats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BatchNormMode,
        running: Option<(&[T], &[T])>,
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("affine for {c} channels")));
        }
        let (mean, var) = match mode {
            BatchNormMode::Train => norm::channel_stats(self.val(x), c),
            BatchNormMode::Eval => {
                let (m, v) = running.ok_or_else(|| Error::Contract("eval batch norm needs running stats".into()))?;
                (m.to_vec(), v.to_vec())
            }
        };
        let (y, inv_std) = norm::batch_norm_apply(self.val(x), &mean, &var, self.val(gamma), self.val(beta), eps);
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        self.push("batch_norm", t, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, mean, var, inv_std, mode })
    }

    /// `(mean, biased variance)` used by a train-mode batch-norm node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, mode: BatchNormMode::Train, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = image_dims("resize_bilinear", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "zero target extent"));
        }
        let out = resize::bilinear_forward(self.val(x), dims.batch, dims.height, dims.width, dims.channels, out_h, out_w);
        let t = Tensor::new([dims.batch, out_h, out_w, dims.channels], out)?;
        self.push("resize_bilinear", t, &[x], Op::Resize { x, dims, out_h, out_w })
    }

    /// Mean over rows of the soft-target cross-entropy on the last axis.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("cross_entropy", self.shape(logits), target.shape())?;
        let classes = target.last_dim();
        let rows = target.rows();
        let logp = log_softmax_rows(self.val(logits), classes);
        let total = logp.iter().zip(target.data()).fold(T::zero(), |a, (&l, &t)| a - t * l);
        let t = Tensor::scalar(total / T::from_usize(rows).unwrap());
        let op = Op::CrossEntropy { logits, target: target.data().to_vec(), classes };
        self.push("cross_entropy", t, &[logits], op)
    }

    /// Mean over rows of `-Σ target·log max(p, eps)` for probabilities `p`.
    pub fn nll(&mut self, probs: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        same_shape("nll", self.shape(probs), target.shape())?;
        let rows = target.rows();
        let total = self
            .val(probs)
            .iter()
            .zip(target.data())
            .fold(T::zero(), |a, (&p, &t)| a - t * p.max(eps).ln());
        let t = Tensor::scalar(total / T::from_usize(rows).unwrap());
        self.push("nll", t, &[probs], Op::Nll { probs, target: target.data().to_vec(), eps })
    }

    /// Gradient contributions of node `idx` to its inputs, given its output
    /// gradient `g`. Only inputs that require gradients are returned.
    pub(super) fn input_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let mut give = |v: Var, d: Vec<T>| {
            if self.needs(v) {
                out.push((v, d));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    give(*a, pointwise::zip_map(g, self.val(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    give(*b, pointwise::zip_map(g, self.val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                give(*a, g.iter().map(|&v| v * c).collect());
            }
            Op::AddSuffix(x, e) => {
                give(*x, g.to_vec());
                if self.needs(*e) {
                    give(*e, sum_leading(g, self.value(*e).len()));
                }
            }
            Op::RepeatBatch(x) => give(*x, sum_leading(g, self.value(*x).len())),
            Op::Sum(x) => give(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                give(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::MatMul(a, b) => {
                let k = self.value(*a).last_dim();
                let n = self.shape(*b)[1];
                let m = self.value(*a).len() / k;
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(g, false, self.val(*b), true, &mut da, m, n, k, false);
                    give(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(self.val(*a), true, g, false, &mut db, k, m, n, false);
                    give(*b, db);
                }
            }
            Op::Reshape(x) => give(*x, g.to_vec()),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                give(*x, gt.permute(&inverse)?.into_data());
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let (extent, len) = (xs[*axis], node.value.shape()[*axis]);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                give(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        give(p, gt.narrow(*axis, start, len)?.into_data());
                    }
                    start += len;
                }
            }
            Op::LayerNorm { x, gain, bias, inv_std } => {
                let (dx, dg, db) = norm::layer_norm_backward(self.val(*x), self.val(*gain), inv_std, g);
                give(*x, dx);
                give(*gain, dg);
                give(*bias, db);
            }
            Op::Gelu(x) => give(*x, pointwise::zip_map(self.val(*x), g, |v, gg| gg * pointwise::gelu_grad(v))),
            Op::Relu(x) => {
                give(*x, pointwise::zip_map(self.val(*x), g, |v, gg| if v > T::zero() { gg } else { T::zero() }))
            }
            Op::Softmax(x) => {
                give(*x, pointwise::softmax_rows_backward(node.value.data(), g, node.value.last_dim()))
            }
            Op::Attention { q, k, v, dims, scale, probs } => {
                let (dq, dk, dv) =
                    attention::backward(self.val(*q), self.val(*k), self.val(*v), probs, g, *dims, *scale);
                give(*q, dq);
                give(*k, dk);
                give(*v, dv);
            }
            Op::Conv2d { x, w, bias, geom, dims, c_out } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.val(*x),
                    *dims,
                    self.val(*w),
                    *c_out,
                    *geom,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    give(*x, dx);
                }
                if let Some(dw) = dw {
                    give(*w, dw);
                }
                if let Some(b) = bias {
                    give(*b, db);
                }
            }
            Op::Deconv2x2 { x, w, bias, dims, c_out } => {
                let (dx, dw, db) = conv::deconv2x2_backward(
                    self.val(*x),
                    *dims,
                    self.val(*w),
                    *c_out,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    give(*x, dx);
                }
                if let Some(dw) = dw {
                    give(*w, dw);
                }
                if let Some(b) = bias {
                    give(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, mode, .. } => {
                let (dx, dg, db) = norm::batch_norm_backward(
                    self.val(*x),
                    mean,
                    inv_std,
                    self.val(*gamma),
                    g,
                    *mode == BatchNormMode::Train,
                );
                give(*x, dx);
                give(*gamma, dg);
                give(*beta, db);
            }
            Op::Resize { x, dims, out_h, out_w } => {
                let dx =
                    resize::bilinear_backward(g, dims.batch, dims.height, dims.width, dims.channels, *out_h, *out_w);
                give(*x, dx);
            }
            Op::CrossEntropy { logits, target, classes } => {
                let rows = target.len() / classes;
                let scale = g[0] / T::from_usize(rows).unwrap();
                let p = pointwise::softmax_rows(self.val(*logits), *classes);
                let mut d = vec![T::zero(); p.len()];
                for ((dr, pr), tr) in d.chunks_mut(*classes).zip(p.chunks(*classes)).zip(target.chunks(*classes)) {
                    let mass = tr.iter().copied().sum::<T>();
                    for j in 0..*classes {
                        dr[j] = (pr[j] * mass - tr[j]) * scale;
                    }
                }
                give(*logits, d);
            }
            Op::Nll { probs, target, eps } => {
                let rows = self.value(*probs).rows();
                let scale = g[0] / T::from_usize(rows).unwrap();
                let d = self
                    .val(*probs)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| if p > *eps { -t / p * scale } else { T::zero() })
                    .collect();
                give(*probs, d);
            }
        }
        Ok(out)
    }
}

pub(crate) fn log_softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, r) in out.chunks_mut(n).zip(x.chunks(n)) {
        let max = r.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = r.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (a, &b) in o.iter_mut().zip(r) {
            *a = b - lse;
        }
    }
    out
}
