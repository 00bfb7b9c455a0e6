//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward pass. Nodes are appended in execution order, so the
//! node index is already a topological order and backward is a single reverse
//! sweep. A tape supports exactly one backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims, ConvGeom};
use super::{ParamGroup, ParamId, ParamStore, Tensor};
use crate::{math, Error, Result};

/// Batch-norm numerical guard.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running mean / variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Stats restricted to `channels`, in that order.
    pub fn gather(&self, channels: &[usize]) -> RunningStats {
        RunningStats {
            mean: channels.iter().map(|&c| self.mean[c]).collect(),
            var: channels.iter().map(|&c| self.var[c]).collect(),
        }
    }

    /// Write back stats previously taken with [`RunningStats::gather`].
    pub fn scatter(&mut self, channels: &[usize], sub: &RunningStats) {
        for (i, &c) in channels.iter().enumerate() {
            self.mean[c] = sub.mean[i];
            self.var[c] = sub.var[i];
        }
    }
}

/// How a batch-norm node obtains its statistics.
pub enum BnMode<'a> {
    /// Normalize with batch statistics and fold them into `running` if given.
    Train(Option<&'a mut RunningStats>),
    /// Normalize with stored statistics.
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    CenterFold { w: Var, theta: f64 },
    Relu(Var),
    MaxPool { x: Var, arg: Vec<u32> },
    AvgPool { x: Var, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    WeightedSum { xs: Vec<Var>, w: Var },
    Softmax(Var),
    Select { x: Var, axis: usize, idx: Vec<usize> },
    Merge { parts: Vec<(Var, Vec<usize>)> },
    Shift(Var),
    Reshape(Var),
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, index: usize },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::CenterFold { .. } => "center_fold",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Softmax(_) => "softmax",
            Op::Select { .. } => "select",
            Op::Merge { .. } => "merge",
            Op::Shift(_) => "shift",
            Op::Reshape(_) => "reshape",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Pick { .. } => "pick",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    retained: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    trainable: Option<ParamGroup>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            retained: Vec::new(),
            param_vars: Vec::new(),
            grad_enabled: true,
            trainable: None,
            consumed: false,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    /// A tape on which only parameters of `group` require gradients; others
    /// are bound as constants.
    pub fn training(group: ParamGroup) -> Self {
        Tape { trainable: Some(group), ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`. Only valid before backward.
    pub fn truncate(&mut self, len: usize) {
        debug_assert!(!self.consumed);
        self.nodes.truncate(len);
        self.retained.truncate(len);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= len) {
                *slot = None;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backward root w.r.t. `v`; available for leaves,
    /// parameters and vars marked with [`Tape::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn retain_grad(&mut self, v: Var) {
        self.retained[v.0] = true;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // nothing downstream needs the saved state when no gradient flows
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.retained.push(false);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        self.retained.push(false);
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.retained.push(requires_grad);
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let requires_grad = self.grad_enabled && self.trainable.map_or(true, |g| store.get(id).group == g);
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param(id), requires_grad });
        self.retained.push(requires_grad);
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- primitives -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let d = ConvDims::new(self.shape(x), self.shape(w), geom)?;
        let out = kernels::conv2d_forward(&d, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(d.out_shape().to_vec(), out)?;
        self.push(value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Kernel with its center tap replaced by `w_center - theta * sum(w)` per
    /// (output, input) slice. Convolving with it adds the central difference
    /// term `-theta * z(p0) * sum(w)` to a vanilla convolution.
    pub fn center_fold(&mut self, w: Var, theta: f64) -> Result<Var> {
        let (o, cg, kh, kw) = self.value(w).dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("kernel {kh}x{kw} has no center tap")));
        }
        let center = (kh / 2) * kw + kw / 2;
        let kk = kh * kw;
        let mut data = self.value(w).data().to_vec();
        for slice in 0..o * cg {
            let taps = &mut data[slice * kk..][..kk];
            let mut total = 0.0;
            for &t in taps.iter() {
                total += t;
            }
            taps[center] -= theta * total;
        }
        let value = Tensor::new(vec![o, cg, kh, kw], data)?;
        self.push(value, Op::CenterFold { w, theta }, &[w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (shape, out, arg) = kernels::max_pool_forward([n, c, h, w], self.value(x).data(), kernel, stride, padding)?;
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(value, Op::MaxPool { x, arg }, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (shape, out) = kernels::avg_pool_forward([n, c, h, w], self.value(x).data(), kernel, stride, padding)?;
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(value, Op::AvgPool { x, kernel, stride, padding }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self.value(x).data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// `x [N, I] . w [O, I]^T + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = dims2(self.shape(x))?;
        let (o, wi) = dims2(self.shape(w))?;
        if wi != i {
            return Err(Error::shape(format!("linear: input width {i}, weight width {wi}")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(Error::shape("linear: bias length mismatch"));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            for k in 0..o {
                let mut acc = match b {
                    Some(b) => self.value(b).data()[k],
                    None => 0.0,
                };
                for j in 0..i {
                    acc += xv[r * i + j] * wv[k * i + j];
                }
                out[r * o + k] = acc;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(format!("add_const: {:?} vs {:?}", self.shape(x), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push(value, Op::AddConst(x), &[x])
    }

    /// `sum_k w[k] * xs[k]` for same-shaped `xs` and a weight vector `w`.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("weighted_sum of zero terms"))?;
        if self.value(w).numel() != xs.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} terms, {} weights",
                xs.len(),
                self.value(w).numel()
            )));
        }
        for &x in xs {
            self.same_shape(first, x, "weighted_sum")?;
        }
        let mut out = vec![0.0; self.value(first).numel()];
        for (k, &x) in xs.iter().enumerate() {
            let wk = self.value(w).data()[k];
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += wk * v;
            }
        }
        let value = Tensor::new(self.shape(first).to_vec(), out)?;
        let mut inputs = xs.to_vec();
        inputs.push(w);
        self.push(value, Op::WeightedSum { xs: xs.to_vec(), w }, &inputs)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::shape("softmax of rank-0 tensor"))?;
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks_exact(k) {
            data.extend(math::softmax(row));
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Index-select along `axis` (indices may repeat).
    pub fn select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("select axis {axis} on {shape:?}")));
        }
        if idx.is_empty() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape(format!("select indices {idx:?} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                data.extend_from_slice(&src[(o * dim + i) * inner..][..inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Select { x, axis, idx: idx.to_vec() }, &[x])
    }

    /// Assemble an NCHW tensor from channel groups: channel `t` of part `k`
    /// lands at output channel `parts[k].1[t]`. Every output channel must be
    /// covered exactly once.
    pub fn merge_channels(&mut self, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let (first, _) = parts.first().ok_or_else(|| Error::invalid("merge of zero parts"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let channels: usize = parts.iter().map(|(_, idx)| idx.len()).sum();
        let mut seen = vec![false; channels];
        for (v, idx) in parts {
            let (pn, pc, ph, pw) = self.value(*v).dims4()?;
            if (pn, ph, pw) != (n, h, w) || pc != idx.len() {
                return Err(Error::shape(format!(
                    "merge part {:?} does not match {} channels of [{n}, _, {h}, {w}]",
                    self.shape(*v),
                    idx.len()
                )));
            }
            for &c in idx {
                if c >= channels || seen[c] {
                    return Err(Error::shape(format!("merge channel {c} duplicated or out of range")));
                }
                seen[c] = true;
            }
        }
        let hw = h * w;
        let mut data = vec![0.0; n * channels * hw];
        for (v, idx) in parts {
            let src = self.value(*v).data();
            for s in 0..n {
                for (t, &c) in idx.iter().enumerate() {
                    data[(s * channels + c) * hw..][..hw].copy_from_slice(&src[(s * idx.len() + t) * hw..][..hw]);
                }
            }
        }
        let value = Tensor::new(vec![n, channels, h, w], data)?;
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push(value, Op::Merge { parts: parts.to_vec() }, &inputs)
    }

    /// Channel concatenation.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(xs.len());
        let mut offset = 0;
        for &x in xs {
            let (_, c, _, _) = self.value(x).dims4()?;
            parts.push((x, (offset..offset + c).collect()));
            offset += c;
        }
        self.merge_channels(&parts)
    }

    /// `y[.., i, j] = x[.., i + 1, j + 1]`, zero past the border.
    pub fn shift(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for i in 0..h - 1 {
                for j in 0..w - 1 {
                    data[(p * h + i) * w + j] = src[(p * h + i + 1) * w + j + 1];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push(value, Op::Shift(x), &[x])
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Per-channel batch normalization over (N, H, W) with optional affine.
    pub fn batch_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, mode: BnMode<'_>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(Error::shape("batch_norm: affine parameter length mismatch"));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let src = self.value(x).data();
        let (mean, inv_std, batch_stats) = match mode {
            BnMode::Train(running) => {
                if m < 2 {
                    return Err(Error::invalid(format!(
                        "batch_norm in training mode needs at least 2 values per channel, got {m}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        mean[ch] += src[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let mu = mean[ch];
                        var[ch] += src[(s * c + ch) * hw..][..hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                if let Some(running) = running {
                    if running.channels() != c {
                        return Err(Error::shape("batch_norm: running stats channel mismatch"));
                    }
                    let unbias = m as f64 / (m - 1) as f64;
                    for ch in 0..c {
                        running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
                        running.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                    }
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
                (mean, inv_std, true)
            }
            BnMode::Eval(running) => {
                if running.channels() != c {
                    return Err(Error::shape("batch_norm: running stats channel mismatch"));
                }
                let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
                (running.mean.clone(), inv_std, false)
            }
        };
        let mut data = vec![0.0; n * c * hw];
        for s in 0..n {
            for ch in 0..c {
                let g = gamma.map_or(1.0, |g| self.value(g).data()[ch]);
                let b = beta.map_or(0.0, |b| self.value(b).data()[ch]);
                let (mu, is) = (mean[ch], inv_std[ch]);
                let off = (s * c + ch) * hw;
                for (o, v) in data[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                    *o = (v - mu) * is * g + b;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], data)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        self.push(value, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats }, &inputs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total / n), Op::Mean(x), &[x])
    }

    /// Scalar view of one element (flat index).
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape(format!("pick index {index} out of range")))?;
        self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = dims2(self.shape(logits))?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| math::exp(v - lse)));
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(value, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of the scalar `loss` for every reachable node that
    /// requires them. Errors on a second call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            let keep = self.retained[i] || matches!(node.op, Op::Leaf | Op::Param(_));
            if keep {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Add parameter gradients from the last backward into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    store.accumulate_grad(id, g)?;
                }
            }
        }
        Ok(())
    }

    /// `backward` followed by [`Tape::accumulate_param_grads`].
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let d = ConvDims::new(self.shape(*x), self.shape(*w), *geom)?;
                let (dx, dw) = kernels::conv2d_backward(
                    &d,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate_owned(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate_owned(grads, *w, dw);
                }
            }
            Op::CenterFold { w, theta } => {
                let (_, _, kh, kw) = self.value(*w).dims4()?;
                let kk = kh * kw;
                let center = (kh / 2) * kw + kw / 2;
                let mut dw = g.to_vec();
                for (slice, out) in g.chunks_exact(kk).zip(dw.chunks_exact_mut(kk)) {
                    let gc = slice[center];
                    out.iter_mut().for_each(|v| *v -= theta * gc);
                }
                accumulate_owned(grads, *w, dw);
            }
            Op::Relu(x) => {
                let dx = self.value(*x).data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                accumulate_owned(grads, *x, dx);
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&a, &gv) in arg.iter().zip(g) {
                    dx[a as usize] += gv;
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::AvgPool { x, kernel, stride, padding } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let dx = kernels::avg_pool_backward([n, c, h, w], [n, c, oh, ow], g, *kernel, *stride, *padding);
                accumulate_owned(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g {
                    dx.extend(core::iter::repeat_n(gv / hw as f64, hw));
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = dims2(self.shape(*x))?;
                let (o, _) = dims2(self.shape(*w))?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * inp];
                    for r in 0..n {
                        for k in 0..o {
                            let gv = g[r * o + k];
                            for j in 0..inp {
                                dx[r * inp + j] += gv * wv[k * inp + j];
                            }
                        }
                    }
                    accumulate_owned(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * inp];
                    for r in 0..n {
                        for k in 0..o {
                            let gv = g[r * o + k];
                            for j in 0..inp {
                                dw[k * inp + j] += gv * xv[r * inp + j];
                            }
                        }
                    }
                    accumulate_owned(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for row in g.chunks_exact(o) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate_owned(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate_owned(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::Scale(x, f) => {
                accumulate_owned(grads, *x, g.iter().map(|v| v * f).collect());
            }
            Op::AddConst(x) => accumulate(grads, *x, g),
            Op::WeightedSum { xs, w } => {
                let wv = self.value(*w).data();
                for (k, &x) in xs.iter().enumerate() {
                    if self.wants(x) {
                        accumulate_owned(grads, x, g.iter().map(|v| v * wv[k]).collect());
                    }
                }
                if self.wants(*w) {
                    let dw = xs
                        .iter()
                        .map(|&x| self.value(x).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate_owned(grads, *w, dw);
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (y, gy) in node.value.data().chunks_exact(k).zip(g.chunks_exact(k)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Select { x, axis, idx } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    for (t, &src) in idx.iter().enumerate() {
                        let from = &g[(o * idx.len() + t) * inner..][..inner];
                        let to = &mut dx[(o * dim + src) * inner..][..inner];
                        to.iter_mut().zip(from).for_each(|(a, b)| *a += b);
                    }
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Merge { parts } => {
                let (n, channels, h, w) = node.value.dims4()?;
                let hw = h * w;
                for (v, idx) in parts {
                    if !self.wants(*v) {
                        continue;
                    }
                    let mut dv = vec![0.0; n * idx.len() * hw];
                    for s in 0..n {
                        for (t, &c) in idx.iter().enumerate() {
                            dv[(s * idx.len() + t) * hw..][..hw].copy_from_slice(&g[(s * channels + c) * hw..][..hw]);
                        }
                    }
                    accumulate_owned(grads, *v, dv);
                }
            }
            Op::Shift(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h - 1 {
                        for j in 0..w - 1 {
                            dx[(p * h + i + 1) * w + j + 1] += g[(p * h + i) * w + j];
                        }
                    }
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                self.batch_norm_backward(*x, *gamma, *beta, mean, inv_std, *batch_stats, g, grads)?;
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate_owned(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate_owned(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[*index] = g[0];
                accumulate_owned(grads, *x, dx);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= scale;
                }
                accumulate_owned(grads, *logits, dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = self.value(x).data();
        let mut sum_g = vec![0.0; c];
        let mut sum_g_xhat = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for (gv, xv) in g[off..off + hw].iter().zip(&src[off..off + hw]) {
                    sum_g[ch] += gv;
                    sum_g_xhat[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                }
            }
        }
        if let Some(gm) = gamma {
            if self.wants(gm) {
                accumulate(grads, gm, &sum_g_xhat);
            }
        }
        if let Some(bt) = beta {
            if self.wants(bt) {
                accumulate(grads, bt, &sum_g);
            }
        }
        if !self.wants(x) {
            return Ok(());
        }
        let gamma_v: Vec<f64> = match gamma {
            Some(gm) => self.value(gm).data().to_vec(),
            None => vec![1.0; c],
        };
        let mut dx = vec![0.0; src.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                let (mu, is, gm) = (mean[ch], inv_std[ch], gamma_v[ch]);
                for ((d, gv), xv) in dx[off..off + hw].iter_mut().zip(&g[off..off + hw]).zip(&src[off..off + hw]) {
                    *d = if batch_stats {
                        let xhat = (xv - mu) * is;
                        gm * is / m * (m * gv - sum_g[ch] - xhat * sum_g_xhat[ch])
                    } else {
                        gm * is * gv
                    };
                }
            }
        }
        accumulate_owned(grads, x, dx);
        Ok(())
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::shape(format!("expected rank-2 tensor, got {shape:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
