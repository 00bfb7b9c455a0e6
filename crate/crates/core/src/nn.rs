//! Parameterized layers shared by the supernet and the detection network.
//!
//! Layers that can run on a channel subset (partial-channel edges) own weights
//! for the full channel count and slice the rows / columns they need on every
//! forward, so the sampled subset can change from step to step and grow when
//! the sampling rate is raised.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::tensor::{BnMode, ConvGeom, ParamGroup, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};
use crate::{Error, Result};

/// Forward mode of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone.
    Probe,
    /// Running statistics.
    Eval,
}

/// He-normal initialized tensor.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = crate::math::sqrt(2.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng::normal(rng) * std)
}

fn select_maybe(tape: &mut Tape, v: Var, axis: usize, subset: Option<&[usize]>) -> Result<Var> {
    match subset {
        Some(idx) => tape.select(v, axis, idx),
        None => Ok(v),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub affine: Option<(ParamId, ParamId)>,
    pub stats: RunningStats,
}

impl BatchNorm {
    pub fn new(channels: usize, affine: bool, store: &mut ParamStore) -> Self {
        let affine = affine.then(|| {
            (
                store.add(Tensor::full(&[channels], 1.0), ParamGroup::Weights),
                store.add(Tensor::zeros(&[channels]), ParamGroup::Weights),
            )
        });
        BatchNorm { channels, affine, stats: RunningStats::new(channels) }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, subset: Option<&[usize]>, mode: Mode) -> Result<Var> {
        let (gamma, beta) = match self.affine {
            Some((g, b)) => {
                let g = tape.param(store, g);
                let b = tape.param(store, b);
                (Some(select_maybe(tape, g, 0, subset)?), Some(select_maybe(tape, b, 0, subset)?))
            }
            None => (None, None),
        };
        match (subset, mode) {
            (None, Mode::Train) => tape.batch_norm(x, gamma, beta, BnMode::Train(Some(&mut self.stats))),
            (Some(idx), Mode::Train) => {
                let mut sub = self.stats.gather(idx);
                let y = tape.batch_norm(x, gamma, beta, BnMode::Train(Some(&mut sub)))?;
                self.stats.scatter(idx, &sub);
                Ok(y)
            }
            (_, Mode::Probe) => tape.batch_norm(x, gamma, beta, BnMode::Train(None)),
            (None, Mode::Eval) => tape.batch_norm(x, gamma, beta, BnMode::Eval(&self.stats)),
            (Some(idx), Mode::Eval) => {
                let sub = self.stats.gather(idx);
                tape.batch_norm(x, gamma, beta, BnMode::Eval(&sub))
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.affine.map(|(g, b)| vec![g, b]).unwrap_or_default()
    }
}

/// Depthwise convolution with the central difference term folded into the kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthwiseCdc {
    pub weight: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub theta: f64,
}

impl DepthwiseCdc {
    pub fn new(channels: usize, kernel: usize, stride: usize, dilation: usize, theta: f64, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let w = he_normal(&[channels, 1, kernel, kernel], kernel * kernel, rng);
        DepthwiseCdc { weight: store.add(w, ParamGroup::Weights), kernel, stride, dilation, theta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, subset: Option<&[usize]>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let w = select_maybe(tape, w, 0, subset)?;
        let channels = tape.shape(x)[1];
        let padding = self.dilation * (self.kernel - 1) / 2;
        cdc_forward(tape, x, w, self.theta, ConvGeom::new(self.stride, padding, self.dilation, channels))
    }
}

/// Convolution plus `theta * (-z(p0) * sum(w))`, realized by folding the
/// central difference term into the kernel's center tap.
pub fn cdc_forward(tape: &mut Tape, x: Var, w: Var, theta: f64, geom: ConvGeom) -> Result<Var> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(alloc::format!("theta {theta} outside [0, 1]")));
    }
    let (_, _, kh, kw) = tape.value(w).dims4()?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(alloc::format!("central difference needs an odd kernel, got {kh}x{kw}")));
    }
    let w = if theta == 0.0 { w } else { tape.center_fold(w, theta)? };
    tape.conv2d(x, w, geom)
}

/// 1x1 convolution, optionally strided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pointwise {
    pub weight: ParamId,
    pub stride: usize,
}

impl Pointwise {
    pub fn new(c_in: usize, c_out: usize, stride: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let w = he_normal(&[c_out, c_in, 1, 1], c_in, rng);
        Pointwise { weight: store.add(w, ParamGroup::Weights), stride }
    }

    /// `rows`/`cols` restrict output / input channels.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let w = select_maybe(tape, w, 0, rows)?;
        let w = select_maybe(tape, w, 1, cols)?;
        tape.conv2d(x, w, ConvGeom::new(self.stride, 0, 1, 1))
    }
}

/// Stride-2 reduction by two offset 1x1 convolutions whose outputs are
/// concatenated, then batch-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedReduce {
    pub channels_out: usize,
    pub even: Pointwise,
    pub odd: Pointwise,
    pub bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new(c_in: usize, c_out: usize, affine: bool, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if c_out < 2 {
            return Err(Error::invalid("factorized reduce needs at least 2 output channels"));
        }
        let half = c_out / 2;
        Ok(FactorizedReduce {
            channels_out: c_out,
            even: Pointwise::new(c_in, half, 2, store, rng),
            odd: Pointwise::new(c_in, c_out - half, 2, store, rng),
            bn: BatchNorm::new(c_out, affine, store),
        })
    }

    /// With `subset`, input and output channels are both restricted to it
    /// (the layer must then be square).
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, subset: Option<&[usize]>, mode: Mode) -> Result<Var> {
        let x = tape.relu(x)?;
        self.forward_rectified(tape, store, x, subset, mode)
    }

    /// [`FactorizedReduce::forward`] on an input that already went through relu.
    pub fn forward_rectified(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, subset: Option<&[usize]>, mode: Mode) -> Result<Var> {
        let shifted = tape.shift(x)?;
        let half = self.channels_out / 2;
        let out = match subset {
            None => {
                let a = self.even.forward(tape, store, x, None, None)?;
                let b = self.odd.forward(tape, store, shifted, None, None)?;
                tape.concat_channels(&[a, b])?
            }
            Some(idx) => {
                let lower: Vec<usize> = idx.iter().copied().filter(|&c| c < half).collect();
                let upper: Vec<usize> = idx.iter().copied().filter(|&c| c >= half).map(|c| c - half).collect();
                let mut parts = Vec::new();
                if !lower.is_empty() {
                    parts.push(self.even.forward(tape, store, x, Some(&lower), Some(idx))?);
                }
                if !upper.is_empty() {
                    parts.push(self.odd.forward(tape, store, shifted, Some(&upper), Some(idx))?);
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_channels(&parts)?
                }
            }
        };
        self.bn.forward(tape, store, out, subset, mode)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.even.weight, self.odd.weight];
        ids.extend(self.bn.param_ids());
        ids
    }
}

/// relu -> 1x1 conv -> batch norm, used to align cell inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluConvBn {
    pub conv: Pointwise,
    pub bn: BatchNorm,
}

impl ReluConvBn {
    pub fn new(c_in: usize, c_out: usize, affine: bool, store: &mut ParamStore, rng: &mut Rng) -> Self {
        ReluConvBn { conv: Pointwise::new(c_in, c_out, 1, store, rng), bn: BatchNorm::new(c_out, affine, store) }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let x = tape.relu(x)?;
        let x = self.conv.forward(tape, store, x, None, None)?;
        self.bn.forward(tape, store, x, None, mode)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv.weight];
        ids.extend(self.bn.param_ids());
        ids
    }
}

/// Cell-input alignment: factorized reduce when the previous-previous state
/// has twice the spatial extent, plain relu-conv-bn otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Preprocess {
    Reduce(FactorizedReduce),
    Conv(ReluConvBn),
}

impl Preprocess {
    pub fn new(c_in: usize, c_out: usize, reduce: bool, affine: bool, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        Ok(if reduce {
            Preprocess::Reduce(FactorizedReduce::new(c_in, c_out, affine, store, rng)?)
        } else {
            Preprocess::Conv(ReluConvBn::new(c_in, c_out, affine, store, rng))
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Preprocess::Reduce(fr) => fr.forward(tape, store, x, None, mode),
            Preprocess::Conv(rcb) => rcb.forward(tape, store, x, mode),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Preprocess::Reduce(fr) => fr.param_ids(),
            Preprocess::Conv(rcb) => rcb.param_ids(),
        }
    }
}

/// 3x3 convolution from RGB followed by batch norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub weight: ParamId,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn new(c_in: usize, c_out: usize, affine: bool, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let w = he_normal(&[c_out, c_in, 3, 3], c_in * 9, rng);
        Stem { weight: store.add(w, ParamGroup::Weights), bn: BatchNorm::new(c_out, affine, store) }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, ConvGeom::new(1, 1, 1, 1))?;
        self.bn.forward(tape, store, y, None, mode)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bn.param_ids());
        ids
    }
}

/// Fully connected classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(c_in: usize, c_out: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let std = crate::math::sqrt(1.0 / c_in as f64);
        let w = Tensor::from_fn(&[c_out, c_in], |_| rng::normal(rng) * std);
        Linear {
            weight: store.add(w, ParamGroup::Weights),
            bias: store.add(Tensor::zeros(&[c_out]), ParamGroup::Weights),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Fraction of argmax predictions that equal the label.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| crate::math::argmax(row) == Some(l))
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Probability of class 1 per row of a 2-class logit matrix.
pub fn fake_probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().chunks_exact(2).map(|row| crate::math::softmax(row)[1]).collect()
}
