//! The differentiable search network.
//!
//! Cells have two inputs, four intermediate nodes and a concatenating output.
//! Every intermediate node is connected to all earlier states through a mixed
//! operation over the alive candidates of the registry. Architecture logits
//! are shared by all cells of the same kind: one `alpha` vector per edge and
//! one `beta` vector per node (one entry per incoming edge).
//!
//! Only a sampled subset of channels goes through the candidate operations;
//! the remaining channels bypass them unchanged (average-pooled on stride-2
//! edges).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::genotype::INTERMEDIATE_NODES;
use crate::nn::{Linear, Mode, Preprocess, Stem};
use crate::ops::{LayerStack, OperatorRegistry};
use crate::rng::{self, Rng};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Length of the rolling probe-error windows.
pub const PROBE_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn index(self) -> usize {
        match self {
            CellKind::Normal => 0,
            CellKind::Reduction => 1,
        }
    }
}

/// `(from, to)` state pairs of a cell in edge order: node 2 first, then 3, ...
pub fn cell_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for j in 2..2 + INTERMEDIATE_NODES {
        for i in 0..j {
            edges.push((i, j));
        }
    }
    edges
}

/// Rolling classification errors of one operation, measured on the search
/// split and on the evaluation split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorProbe {
    pub search: VecDeque<f64>,
    pub eval: VecDeque<f64>,
}

impl ErrorProbe {
    pub fn push(&mut self, search_err: f64, eval_err: f64) -> Result<()> {
        for e in [search_err, eval_err] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("probe error {e} outside [0, 1]")));
            }
        }
        self.search.push_back(search_err);
        self.eval.push_back(eval_err);
        while self.search.len() > PROBE_WINDOW {
            self.search.pop_front();
            self.eval.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.search.len()
    }

    pub fn is_empty(&self) -> bool {
        self.search.is_empty()
    }

    /// Smallest `|search - eval|` over the window.
    pub fn min_abs_gap(&self) -> Option<f64> {
        self.search.iter().zip(&self.eval).map(|(a, b)| (a - b).abs()).reduce(f64::min)
    }
}

/// Search state of one (shared) edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub from: usize,
    pub to: usize,
    /// Per registry position; once false, stays false.
    pub alive: Vec<bool>,
    pub alpha: ParamId,
    /// Node logit vector and this edge's position within it.
    pub beta: (ParamId, usize),
    pub probes: Vec<ErrorProbe>,
    /// Cached generalization scores over the registry (0 for dead ops).
    pub generalization: Vec<f64>,
}

impl EdgeState {
    pub fn alive_ops(&self) -> Vec<usize> {
        self.alive.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alpha_values<'s>(&self, store: &'s ParamStore) -> &'s [f64] {
        store.value(self.alpha).data()
    }

    /// Uniform generalization scores over the alive ops.
    pub fn reset_generalization(&mut self) {
        let n = self.alive_count() as f64;
        self.generalization = self.alive.iter().map(|&a| if a { 1.0 / n } else { 0.0 }).collect();
    }
}

/// Architecture parameters of one cell kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpace {
    pub kind: CellKind,
    pub edges: Vec<EdgeState>,
    /// One logit vector per intermediate node.
    pub betas: Vec<ParamId>,
}

impl ArchSpace {
    /// Indices into `edges` of the edges entering state `to`.
    pub fn incoming(&self, to: usize) -> Vec<usize> {
        self.edges.iter().enumerate().filter(|(_, e)| e.to == to).map(|(i, _)| i).collect()
    }
}

/// Channels of an edge input that go through the candidate operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub channels: usize,
    pub sampled: Vec<usize>,
}

impl ChannelMask {
    pub fn full(channels: usize) -> Self {
        ChannelMask { channels, sampled: (0..channels).collect() }
    }

    pub fn sampled_count(channels: usize, rate: f64) -> usize {
        let k = crate::math::round(rate * channels as f64) as usize;
        k.clamp(1, channels)
    }

    pub fn sample(rng: &mut Rng, channels: usize, rate: f64) -> Self {
        let k = Self::sampled_count(channels, rate);
        if k == channels {
            return Self::full(channels);
        }
        ChannelMask { channels, sampled: rng::sample_indices(rng, channels, k) }
    }

    pub fn is_full(&self) -> bool {
        self.sampled.len() == self.channels
    }

    pub fn rate(&self) -> f64 {
        self.sampled.len() as f64 / self.channels as f64
    }

    pub fn bypassed(&self) -> Vec<usize> {
        (0..self.channels).filter(|c| self.sampled.binary_search(c).is_err()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEdge {
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    /// One stack per registry position.
    pub ops: Vec<LayerStack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchCell {
    pub kind: CellKind,
    pub channels: usize,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    pub edges: Vec<SearchEdge>,
}

impl SearchCell {
    fn fixed_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pre0.param_ids();
        ids.extend(self.pre1.param_ids());
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub init_channels: usize,
    /// Number of (normal, normal, reduction) groups.
    pub groups: usize,
    pub num_classes: usize,
    pub sample_rate: f64,
    pub lambda: f64,
    /// Batch-norm affine parameters inside candidate operations.
    pub affine: bool,
    /// Std of the Gaussian noise added to zero-initialized architecture logits.
    pub arch_init_noise: f64,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            init_channels: 16,
            groups: 2,
            num_classes: 2,
            sample_rate: 1.0 / 8.0,
            lambda: 0.15,
            affine: false,
            arch_init_noise: 1e-3,
        }
    }
}

/// Replace one shared edge's mixed operation by a single candidate running
/// on all channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeTarget {
    pub kind: CellKind,
    pub edge: usize,
    pub op: usize,
}

/// Intermediate results of a forward pass, reusable by probes.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub stem: Var,
    pub cells: Vec<Var>,
    pub logits: Var,
    /// Masks used, per cell and edge.
    pub masks: Vec<Vec<ChannelMask>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub registry: OperatorRegistry,
    pub store: ParamStore,
    pub stem: Stem,
    pub cells: Vec<SearchCell>,
    pub head: Linear,
    pub arch: [ArchSpace; 2],
    pub sample_rate: f64,
    mask_rng: Rng,
}

impl Supernet {
    pub fn new(config: SupernetConfig, registry: OperatorRegistry, seed: u64) -> Result<Self> {
        if config.groups == 0 || config.init_channels == 0 {
            return Err(Error::invalid("supernet needs at least one group and one channel"));
        }
        if !(config.sample_rate > 0.0 && config.sample_rate <= 1.0) {
            return Err(Error::invalid(format!("sample rate {} outside (0, 1]", config.sample_rate)));
        }
        let mut init = rng::seeded(seed, rng::stream::INIT);
        let mut store = ParamStore::new();
        let c = config.init_channels;
        let stem = Stem::new(3, c, config.affine, &mut store, &mut init);
        let (mut c_pp, mut c_p, mut c_cur) = (c, c, c);
        let mut reduction_prev = false;
        let mut cells = Vec::new();
        for _ in 0..config.groups {
            for kind in [CellKind::Normal, CellKind::Normal, CellKind::Reduction] {
                if kind == CellKind::Reduction {
                    c_cur *= 2;
                }
                let pre0 = Preprocess::new(c_pp, c_cur, reduction_prev, config.affine, &mut store, &mut init)?;
                let pre1 = Preprocess::new(c_p, c_cur, false, config.affine, &mut store, &mut init)?;
                let mut edges = Vec::new();
                for (from, to) in cell_edges() {
                    let stride = if kind == CellKind::Reduction && from < 2 { 2 } else { 1 };
                    let ops = registry
                        .ops()
                        .iter()
                        .map(|op| op.instantiate(c_cur, stride, config.affine, &mut store, &mut init))
                        .collect::<Result<Vec<_>>>()?;
                    edges.push(SearchEdge { from, to, stride, ops });
                }
                cells.push(SearchCell { kind, channels: c_cur, pre0, pre1, edges });
                reduction_prev = kind == CellKind::Reduction;
                c_pp = c_p;
                c_p = INTERMEDIATE_NODES * c_cur;
            }
        }
        let head = Linear::new(c_p, config.num_classes, &mut store, &mut init);
        let noise = config.arch_init_noise;
        let mut space = |kind: CellKind, store: &mut ParamStore| {
            let betas: Vec<ParamId> = (0..INTERMEDIATE_NODES)
                .map(|k| {
                    let t = Tensor::from_fn(&[k + 2], |_| rng::normal(&mut init) * noise);
                    store.add(t, ParamGroup::Architecture)
                })
                .collect();
            let edges = cell_edges()
                .into_iter()
                .map(|(from, to)| {
                    let t = Tensor::from_fn(&[registry.len()], |_| rng::normal(&mut init) * noise);
                    let mut e = EdgeState {
                        from,
                        to,
                        alive: vec![true; registry.len()],
                        alpha: store.add(t, ParamGroup::Architecture),
                        beta: (betas[to - 2], from),
                        probes: vec![ErrorProbe::default(); registry.len()],
                        generalization: Vec::new(),
                    };
                    e.reset_generalization();
                    e
                })
                .collect();
            ArchSpace { kind, edges, betas }
        };
        let normal = space(CellKind::Normal, &mut store);
        let reduction = space(CellKind::Reduction, &mut store);
        Ok(Supernet {
            sample_rate: config.sample_rate,
            config,
            registry,
            store,
            stem,
            cells,
            head,
            arch: [normal, reduction],
            mask_rng: rng::seeded(seed, rng::stream::MASK),
        })
    }

    pub fn arch_space(&self, kind: CellKind) -> &ArchSpace {
        &self.arch[kind.index()]
    }

    pub fn arch_space_mut(&mut self, kind: CellKind) -> &mut ArchSpace {
        &mut self.arch[kind.index()]
    }

    /// Spatial reduction factor of the whole network.
    pub fn downsample(&self) -> usize {
        1 << self.config.groups
    }

    pub fn arch_ids(&self) -> Vec<ParamId> {
        self.store.ids_in(ParamGroup::Architecture)
    }

    /// Weights that take part in a forward pass: everything except the
    /// candidate operations that have been pruned.
    pub fn active_weight_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        for cell in &self.cells {
            ids.extend(cell.fixed_param_ids());
            let space = &self.arch[cell.kind.index()];
            for (edge, state) in cell.edges.iter().zip(&space.edges) {
                for (op, &alive) in edge.ops.iter().zip(&state.alive) {
                    if alive {
                        ids.extend(op.param_ids());
                    }
                }
            }
        }
        ids.extend(self.head.param_ids());
        ids
    }

    /// Weights of pruned candidate operations.
    pub fn pruned_weight_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for cell in &self.cells {
            let space = &self.arch[cell.kind.index()];
            for (edge, state) in cell.edges.iter().zip(&space.edges) {
                for (op, &alive) in edge.ops.iter().zip(&state.alive) {
                    if !alive {
                        ids.extend(op.param_ids());
                    }
                }
            }
        }
        ids
    }

    fn sample_masks(&mut self) -> Vec<Vec<ChannelMask>> {
        let rate = self.sample_rate;
        let mut masks = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let c = cell.channels;
            masks.push(cell.edges.iter().map(|_| ChannelMask::sample(&mut self.mask_rng, c, rate)).collect());
        }
        masks
    }

    /// Importance weights `softmax(alpha)[alive] + lambda * E[alive]` per edge
    /// of one cell kind, plus the per-node edge softmaxes.
    fn arch_weights(&self, tape: &mut Tape, kind: CellKind) -> Result<(Vec<Var>, Vec<Var>)> {
        let space = &self.arch[kind.index()];
        let mut importances = Vec::with_capacity(space.edges.len());
        for e in &space.edges {
            let alive = e.alive_ops();
            if alive.is_empty() {
                return Err(Error::DeadEdge(e.from, e.to));
            }
            let alpha = tape.param(&self.store, e.alpha);
            let alpha = if alive.len() == e.alive.len() { alpha } else { tape.select(alpha, 0, &alive)? };
            let sm = tape.softmax(alpha)?;
            let bonus = Tensor::new(vec![alive.len()], alive.iter().map(|&o| self.config.lambda * e.generalization[o]).collect())?;
            importances.push(tape.add_const(sm, &bonus)?);
        }
        let mut node_weights = Vec::with_capacity(space.betas.len());
        for &b in &space.betas {
            let beta = tape.param(&self.store, b);
            node_weights.push(tape.softmax(beta)?);
        }
        Ok((importances, node_weights))
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ForwardTrace> {
        self.check_input(tape.shape(x))?;
        let masks = self.sample_masks();
        let stem = self.stem.forward(tape, &self.store, x, mode)?;
        let mut trace = ForwardTrace { stem, cells: Vec::new(), logits: stem, masks };
        self.run_cells(tape, &mut trace, 0, mode, None)?;
        Ok(trace)
    }

    /// Logits with one shared edge replaced by a single operation, recomputed
    /// from the first affected cell of `trace` (masks reused). The caller
    /// truncates the tape afterwards.
    pub fn forward_probe(&mut self, tape: &mut Tape, trace: &ForwardTrace, target: ProbeTarget) -> Result<Var> {
        let first = self
            .cells
            .iter()
            .position(|c| c.kind == target.kind)
            .ok_or_else(|| Error::invalid("no cell of the probed kind"))?;
        if !self.arch[target.kind.index()].edges[target.edge].alive[target.op] {
            return Err(Error::invalid("probing a pruned operation"));
        }
        let mut t = trace.clone();
        t.cells.truncate(first);
        self.run_cells(tape, &mut t, first, Mode::Probe, Some(target))?;
        Ok(t.logits)
    }

    fn run_cells(&mut self, tape: &mut Tape, trace: &mut ForwardTrace, start: usize, mode: Mode, probe: Option<ProbeTarget>) -> Result<()> {
        let weights = [self.arch_weights(tape, CellKind::Normal)?, self.arch_weights(tape, CellKind::Reduction)?];
        let arch = &self.arch;
        let store = &self.store;
        for ci in start..self.cells.len() {
            let s_pp = if ci >= 2 { trace.cells[ci - 2] } else { trace.stem };
            let s_p = if ci >= 1 { trace.cells[ci - 1] } else { trace.stem };
            let cell = &mut self.cells[ci];
            let kind = cell.kind;
            let (importances, node_weights) = &weights[kind.index()];
            let space = &arch[kind.index()];
            let probe_here = probe.filter(|p| p.kind == kind);
            let s0 = cell.pre0.forward(tape, store, s_pp, mode)?;
            let s1 = cell.pre1.forward(tape, store, s_p, mode)?;
            let mut states = vec![s0, s1];
            for node in 0..INTERMEDIATE_NODES {
                let to = node + 2;
                let mut inputs = Vec::new();
                for (ei, edge) in cell.edges.iter_mut().enumerate().filter(|(_, e)| e.to == to) {
                    let x = states[edge.from];
                    let out = match probe_here {
                        Some(p) if p.edge == ei => edge.ops[p.op].forward(tape, store, x, None, mode)?,
                        _ => mixed_op_forward(tape, store, edge, &space.edges[ei], x, importances[ei], &trace.masks[ci][ei], mode)?,
                    };
                    inputs.push(out);
                }
                states.push(node_forward(tape, &inputs, node_weights[node])?);
            }
            let out = tape.concat_channels(&states[2..])?;
            trace.cells.push(out);
        }
        let last = *trace.cells.last().expect("at least one cell");
        let pooled = tape.global_avg_pool(last)?;
        trace.logits = self.head.forward(tape, store, pooled)?;
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, 3, h, w] if h % self.downsample() == 0 && w % self.downsample() == 0 => Ok(()),
            [_, 3, h, w] => Err(Error::shape(format!(
                "input {h}x{w} not divisible by {} ({} reductions)",
                self.downsample(),
                self.config.groups
            ))),
            _ => Err(Error::shape(format!("expected [N, 3, H, W] input, got {shape:?}"))),
        }
    }

    /// Total number of weight values (not architecture logits).
    pub fn num_weights(&self) -> usize {
        self.store.num_values(ParamGroup::Weights)
    }
}

/// `sum_o I[o] * o(M x)` on the sampled channels, `x` passed through on the
/// others (average-pooled 2x2 on stride-2 edges).
#[allow(clippy::too_many_arguments)]
pub fn mixed_op_forward(
    tape: &mut Tape,
    store: &ParamStore,
    edge: &mut SearchEdge,
    state: &EdgeState,
    x: Var,
    importance: Var,
    mask: &ChannelMask,
    mode: Mode,
) -> Result<Var> {
    let alive = state.alive_ops();
    if alive.is_empty() {
        return Err(Error::DeadEdge(state.from, state.to));
    }
    if tape.value(importance).numel() != alive.len() {
        return Err(Error::shape("importance weights do not match the alive operations"));
    }
    let (xs, subset) = if mask.is_full() {
        (x, None)
    } else {
        (tape.select(x, 1, &mask.sampled)?, Some(mask.sampled.as_slice()))
    };
    let rectified = if alive.iter().filter(|&&o| edge.ops[o].starts_with_relu()).count() > 1 { Some(tape.relu(xs)?) } else { None };
    let mut outs = Vec::with_capacity(alive.len());
    for &o in &alive {
        outs.push(edge.ops[o].forward_with(tape, store, xs, rectified, subset, mode)?);
    }
    let mixed = tape.weighted_sum(&outs, importance)?;
    if mask.is_full() {
        return Ok(mixed);
    }
    let bypassed = mask.bypassed();
    let rest = tape.select(x, 1, &bypassed)?;
    let rest = if edge.stride == 2 { tape.avg_pool(rest, 2, 2, 0)? } else { rest };
    tape.merge_channels(&[(mixed, mask.sampled.clone()), (rest, bypassed)])
}

/// `sum_i softmax(beta)[i] * f_i`.
pub fn node_forward(tape: &mut Tape, inputs: &[Var], edge_weights: Var) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::invalid("node without predecessors"));
    }
    tape.weighted_sum(inputs, edge_weights)
}
