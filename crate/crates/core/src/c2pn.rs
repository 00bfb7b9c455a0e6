//! The cascaded pyramid detection network built from a searched genotype.
//!
//! Cells follow the genotype with fresh weights and are stacked as groups of
//! (normal, normal, reduction). The output of every reduction cell is pooled
//! globally and the pooled vectors are concatenated in front of the linear
//! head, so the classifier sees every scale of the cascade.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::{quadrant_of, Dataset};
use crate::genotype::{CellGenotype, Genotype, EDGES_PER_NODE, INTERMEDIATE_NODES};
use crate::metrics::{self, EpochMetrics, MetricsReport};
use crate::nn::{batch_accuracy, fake_probabilities, Linear, Mode, Preprocess, Stem};
use crate::ops::{parse_kind, LayerStack, OperatorRegistry};
use crate::rng::{self, Rng};
use crate::supernet::CellKind;
use crate::tensor::{Optimizer, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{math, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub init_channels: usize,
    /// Number of (normal, normal, reduction) groups.
    pub groups: usize,
    pub num_classes: usize,
    /// Feed every reduction output to the head; only the last one otherwise.
    pub pyramid: bool,
    pub affine: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { init_channels: 16, groups: 4, num_classes: 2, pyramid: true, affine: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 150, batch_size: 48, lr: 0.025, momentum: 0.9, weight_decay: 3e-4, hflip: true, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("training needs at least one epoch"));
        }
        if !(self.lr >= 0.0) || self.batch_size < 2 {
            return Err(Error::invalid(format!("lr {} / batch {} out of range", self.lr, self.batch_size)));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate of `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs as f64;
        0.5 * self.lr * (1.0 + math::cos(core::f64::consts::PI * t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellEdge {
    from: usize,
    op: LayerStack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenotypeCell {
    pub kind: CellKind,
    pub channels: usize,
    pre0: Preprocess,
    pre1: Preprocess,
    /// Two per intermediate node, in genotype order.
    edges: Vec<CellEdge>,
}

impl GenotypeCell {
    fn forward(&mut self, tape: &mut Tape, store: &ParamStore, s_pp: Var, s_p: Var, mode: Mode) -> Result<Var> {
        let s0 = self.pre0.forward(tape, store, s_pp, mode)?;
        let s1 = self.pre1.forward(tape, store, s_p, mode)?;
        let mut states = vec![s0, s1];
        for pair in self.edges.chunks_mut(EDGES_PER_NODE) {
            let mut sum = None;
            for edge in pair {
                let y = edge.op.forward(tape, store, states[edge.from], None, mode)?;
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, y)?,
                    None => y,
                });
            }
            states.push(sum.expect("node has inputs"));
        }
        tape.concat_channels(&states[2..])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pre0.param_ids();
        ids.extend(self.pre1.param_ids());
        for e in &self.edges {
            ids.extend(e.op.param_ids());
        }
        ids
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct DetectionTrace {
    /// Output of every reduction cell, shallowest first.
    pub taps: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionNet {
    pub config: NetConfig,
    pub genotype: Genotype,
    pub store: ParamStore,
    stem: Stem,
    pub cells: Vec<GenotypeCell>,
    head: Linear,
}

impl DetectionNet {
    /// Build with fresh weights drawn from `seed`.
    pub fn build(genotype: &Genotype, config: NetConfig, seed: u64) -> Result<Self> {
        genotype.validate()?;
        if config.groups == 0 || config.init_channels == 0 {
            return Err(Error::invalid("detection net needs at least one group and one channel"));
        }
        let registry = OperatorRegistry::from_names(&genotype.registry)?;
        let mut init = rng::seeded(seed, rng::stream::INIT);
        let mut store = ParamStore::new();
        let c = config.init_channels;
        let stem = Stem::new(3, c, config.affine, &mut store, &mut init);
        let (mut c_pp, mut c_p, mut c_cur) = (c, c, c);
        let mut reduction_prev = false;
        let mut cells = Vec::new();
        let mut tap_channels = 0;
        for _ in 0..config.groups {
            for kind in [CellKind::Normal, CellKind::Normal, CellKind::Reduction] {
                if kind == CellKind::Reduction {
                    c_cur *= 2;
                }
                let cell_genotype = match kind {
                    CellKind::Normal => &genotype.normal,
                    CellKind::Reduction => &genotype.reduction,
                };
                let pre0 = Preprocess::new(c_pp, c_cur, reduction_prev, config.affine, &mut store, &mut init)?;
                let pre1 = Preprocess::new(c_p, c_cur, false, config.affine, &mut store, &mut init)?;
                let edges = build_edges(cell_genotype, &registry, kind, c_cur, config.affine, &mut store, &mut init)?;
                cells.push(GenotypeCell { kind, channels: c_cur, pre0, pre1, edges });
                reduction_prev = kind == CellKind::Reduction;
                c_pp = c_p;
                c_p = INTERMEDIATE_NODES * c_cur;
                if kind == CellKind::Reduction {
                    tap_channels += c_p;
                }
            }
        }
        let head_in = if config.pyramid { tap_channels } else { c_p };
        let head = Linear::new(head_in, config.num_classes, &mut store, &mut init);
        Ok(DetectionNet { config, genotype: genotype.clone(), store, stem, cells, head })
    }

    /// Spatial reduction factor of the whole network.
    pub fn downsample(&self) -> usize {
        1 << self.config.groups
    }

    pub fn num_params(&self) -> usize {
        self.store.num_values(ParamGroup::Weights)
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        for cell in &self.cells {
            ids.extend(cell.param_ids());
        }
        ids.extend(self.head.param_ids());
        ids
    }

    /// Hash of every weight value.
    pub fn weights_fingerprint(&self) -> u64 {
        self.store.fingerprint(&self.weight_ids())
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<DetectionTrace> {
        match *tape.shape(x) {
            [_, 3, h, w] if h % self.downsample() == 0 && w % self.downsample() == 0 => {}
            ref s => return Err(Error::shape(format!("input {s:?} must be [N, 3, H, W] with H, W divisible by {}", self.downsample()))),
        }
        let store = &self.store;
        let stem = self.stem.forward(tape, store, x, mode)?;
        let (mut s_pp, mut s_p) = (stem, stem);
        let mut taps = Vec::new();
        for cell in &mut self.cells {
            let out = cell.forward(tape, store, s_pp, s_p, mode)?;
            if cell.kind == CellKind::Reduction {
                taps.push(out);
            }
            s_pp = s_p;
            s_p = out;
        }
        let pooled = if self.config.pyramid {
            let mut pooled = Vec::with_capacity(taps.len());
            for &t in &taps {
                pooled.push(tape.global_avg_pool(t)?);
            }
            concat_features(tape, &pooled)?
        } else {
            tape.global_avg_pool(s_p)?
        };
        let logits = self.head.forward(tape, store, pooled)?;
        Ok(DetectionTrace { taps, logits })
    }

    /// Fake-class probabilities of `data`, in order, with running statistics.
    pub fn predict(&mut self, data: &Dataset, batch: usize) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut scores = Vec::with_capacity(data.len());
        for chunk in idx.chunks(batch.max(1)) {
            let (x, _) = data.batch(chunk, None)?;
            let mut tape = Tape::inference();
            let x = tape.constant(x);
            let trace = self.forward(&mut tape, x, Mode::Eval)?;
            scores.extend(fake_probabilities(tape.value(trace.logits)));
        }
        Ok(scores)
    }
}

fn build_edges(
    cell: &CellGenotype,
    registry: &OperatorRegistry,
    kind: CellKind,
    channels: usize,
    affine: bool,
    store: &mut ParamStore,
    init: &mut Rng,
) -> Result<Vec<CellEdge>> {
    let mut edges = Vec::with_capacity(cell.edges.len());
    for (name, from) in &cell.edges {
        if registry.position(name).is_none() {
            return Err(Error::Genotype(format!("operation `{name}` is not in the registry")));
        }
        let stride = if kind == CellKind::Reduction && *from < 2 { 2 } else { 1 };
        let op = parse_kind(name)?.instantiate(channels, stride, affine, store, init)?;
        edges.push(CellEdge { from: *from, op });
    }
    Ok(edges)
}

/// `[N, C1 + C2 + ...]` from `[N, Ci]` feature rows.
fn concat_features(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut as_maps = Vec::with_capacity(xs.len());
    for &x in xs {
        let s = tape.shape(x).to_vec();
        as_maps.push(tape.reshape(x, &[s[0], s[1], 1, 1])?);
    }
    let joined = tape.concat_channels(&as_maps)?;
    let s = tape.shape(joined).to_vec();
    tape.reshape(joined, &[s[0], s[1]])
}

/// Loss, accuracy and AUC of `net` on `data` with running statistics.
pub fn evaluate_split(net: &mut DetectionNet, data: &Dataset, batch: usize) -> Result<(f64, f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut scores, mut labels) = (0.0, Vec::new(), Vec::new());
    for chunk in idx.chunks(batch.max(1)) {
        let (x, l) = data.batch(chunk, None)?;
        let mut tape = Tape::inference();
        let x = tape.constant(x);
        let trace = net.forward(&mut tape, x, Mode::Eval)?;
        let ce = tape.softmax_cross_entropy(trace.logits, &l)?;
        loss += tape.value(ce).item() * chunk.len() as f64;
        scores.extend(fake_probabilities(tape.value(trace.logits)));
        labels.extend(l);
    }
    let acc = metrics::accuracy(&scores, &labels, 0.5)?;
    let auc = metrics::auc(&scores, &labels)?;
    Ok((loss / data.len() as f64, acc, auc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub curves: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// SGD with momentum and cosine decay. Validates after every epoch and
/// leaves `net` at the weights of the best validation AUC (earliest on ties).
pub fn train(net: &mut DetectionNet, train_data: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    for (name, d) in [("training", train_data), ("validation", val)] {
        let counts = d.class_counts();
        if counts.0 == 0 || counts.1 == 0 {
            return Err(Error::Dataset(format!("{name} split needs both classes, has {counts:?}")));
        }
    }
    let mut opt = Optimizer::sgd(config.lr, config.momentum, config.weight_decay);
    let mut data_rng = rng::seeded(config.seed, rng::stream::DATA);
    let mut flip_rng = rng::seeded(config.seed, rng::stream::AUGMENT);
    let ids = net.weight_ids();
    let mut curves = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, DetectionNet)> = None;
    for epoch in 0..config.epochs {
        opt.kind.set_lr(config.lr_at(epoch));
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        rng::shuffle(&mut data_rng, &mut order);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let flips: Vec<bool> = chunk.iter().map(|_| config.hflip && rng::uniform(&mut flip_rng) < 0.5).collect();
            let (x, labels) = train_data.batch(chunk, Some(&flips))?;
            let mut tape = Tape::training(ParamGroup::Weights);
            let x = tape.constant(x);
            let trace = net.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", epoch + 1)));
            }
            acc_sum += batch_accuracy(tape.value(trace.logits), &labels) * chunk.len() as f64;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
            tape.backward_into(loss, &mut net.store)?;
            opt.step(&mut net.store, &ids)?;
        }
        let (val_loss, val_acc, val_auc) = evaluate_split(net, val, config.batch_size)?;
        curves.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: acc_sum / seen.max(1) as f64,
            val_loss,
            val_acc,
            val_auc,
        });
        if best.as_ref().map_or(true, |(auc, _, _)| val_auc > *auc) {
            best = Some((val_auc, epoch + 1, net.clone()));
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch");
    *net = snapshot;
    Ok(TrainOutcome { curves, best_epoch })
}

/// Accuracy and AUC of `net` on `test`.
pub fn evaluate(net: &mut DetectionNet, test: &Dataset, curves: Vec<EpochMetrics>, config_fingerprint: u64, seed: u64) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let scores = net.predict(test, 64)?;
    MetricsReport::new(&scores, &test.labels(), curves, config_fingerprint, seed)
}

/// Class-activation heatmap of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    /// The map was zero everywhere before normalization.
    pub degenerate: bool,
    pub predicted: usize,
}

impl ActivationMap {
    /// Center of gravity `(x, y)` in pixel coordinates (pixel centers at `+0.5`).
    pub fn center_of_gravity(&self) -> Option<(f64, f64)> {
        let total: f64 = self.values.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            cx += v * ((i % self.width) as f64 + 0.5);
            cy += v * ((i / self.width) as f64 + 0.5);
        }
        Some((cx / total, cy / total))
    }

    pub fn quadrant(&self) -> Option<usize> {
        self.center_of_gravity().map(|(x, y)| quadrant_of(x, y, self.height, self.width))
    }
}

/// Gradient-weighted activation map of the predicted class over the output
/// of the last reduction cell, upsampled to the input size.
pub fn activation_map(net: &mut DetectionNet, image: &Tensor) -> Result<ActivationMap> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let batch = image.clone().reshape(&[1, c, h, w])?;
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let trace = net.forward(&mut tape, x, Mode::Eval)?;
    let tap = *trace.taps.last().ok_or_else(|| Error::invalid("network has no reduction cell"))?;
    tape.retain_grad(tap);
    let predicted = math::argmax(tape.value(trace.logits).data()).expect("non-empty logits");
    let score = tape.pick(trace.logits, predicted)?;
    tape.backward(score)?;
    let (_, ch, mh, mw) = tape.value(tap).dims4()?;
    let plane = mh * mw;
    let activations = tape.value(tap).data();
    let mut coarse = vec![0.0; plane];
    if let Some(grad) = tape.grad(tap) {
        for k in 0..ch {
            let g = &grad[k * plane..][..plane];
            let weight = g.iter().sum::<f64>() / plane as f64;
            for (m, a) in coarse.iter_mut().zip(&activations[k * plane..][..plane]) {
                *m += weight * a;
            }
        }
    }
    for m in &mut coarse {
        *m = m.max(0.0);
    }
    let lo = coarse.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = coarse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > 0.0);
    let normalized: Vec<f64> = if degenerate || hi == lo {
        coarse.iter().map(|&v| if degenerate { 0.0 } else { v / hi }).collect()
    } else {
        coarse.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    };
    let values = bilinear_resize(&normalized, mh, mw, h, w);
    Ok(ActivationMap { height: h, width: w, values, degenerate, predicted })
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |i: usize, s: usize, d: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = math::floor(p) as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, p - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::GenotypeMeta;

    fn genotype() -> Genotype {
        let reg = OperatorRegistry::default();
        let mut r = rng::seeded(5, 0);
        Genotype::random(&reg, &mut r, 5)
    }

    #[test]
    fn tap_shapes_follow_reductions() {
        let cfg = NetConfig { init_channels: 2, groups: 4, ..NetConfig::default() };
        let mut net = DetectionNet::build(&genotype(), cfg, 0).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 7) as f64 * 0.1));
        let trace = net.forward(&mut tape, x, Mode::Probe).unwrap();
        let sizes: Vec<usize> = trace.taps.iter().map(|&t| tape.shape(t)[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        assert_eq!(tape.shape(trace.logits), &[2, 2]);
        assert_eq!(net.cells.len(), 12);
    }

    #[test]
    fn build_is_deterministic() {
        let g = genotype();
        let a = DetectionNet::build(&g, NetConfig::default(), 0).unwrap();
        let b = DetectionNet::build(&g, NetConfig::default(), 0).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_eq!(a.weights_fingerprint(), b.weights_fingerprint());
    }

    #[test]
    fn rejects_foreign_operations() {
        let mut g = genotype();
        g.normal.edges[0].0 = "SepCDC_7x7_0.5".into();
        g.meta = GenotypeMeta::default();
        assert!(DetectionNet::build(&g, NetConfig::default(), 0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.025);
        assert!((cfg.lr_at(5) - 0.0125).abs() < 1e-12);
    }

    #[test]
    fn bilinear_keeps_constant_and_range() {
        let out = bilinear_resize(&[0.3; 4], 2, 2, 5, 7);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let out = bilinear_resize(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4);
        assert_eq!(out.len(), 16);
        assert!(out[0] < out[3]);
    }
}
