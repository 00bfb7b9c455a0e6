//! Generalization-aware scoring of candidate operations.
//!
//! Every alive operation on an edge carries a window of probe errors measured
//! on the search split and on the evaluation split. An operation whose two
//! errors stay close generalizes well; its generalization score `E` is the
//! softmax over alive operations of the inverse of the smallest gap in the
//! window. The importance of an operation is `I = softmax(alpha) + lambda * E`
//! and its edge-op score is `H = softmax(beta)[edge] * I`. Discretization keeps
//! the two best edges per node and the best operation per kept edge; pruning
//! drops the two weakest operations of an edge.

use alloc::format;
use alloc::vec::Vec;

use crate::genotype::{CellGenotype, Genotype, GenotypeMeta, EDGES_PER_NODE, GENOTYPE_SCHEMA_VERSION, INTERMEDIATE_NODES};
use crate::math;
use crate::supernet::{ArchSpace, CellKind, EdgeState, Supernet};
use crate::tensor::ParamStore;
use crate::{Error, Result};

/// Lower clamp on the probe error gap.
pub const GAP_EPS: f64 = 1e-3;

/// `E` from the per-operation window-minimum gaps.
pub fn generalization_from_gaps(gaps: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = gaps.iter().map(|&d| 1.0 / d.max(GAP_EPS)).collect();
    math::softmax(&inv)
}

/// `E` over the registry positions of `edge`; dead operations score 0.
pub fn generalization_score(edge: &EdgeState) -> Result<Vec<f64>> {
    let alive = edge.alive_ops();
    let mut gaps = Vec::with_capacity(alive.len());
    for &o in &alive {
        gaps.push(edge.probes[o].min_abs_gap().ok_or(Error::EmptyWindow(edge.to, o))?);
    }
    Ok(scatter(edge.alive.len(), &alive, &generalization_from_gaps(&gaps)))
}

/// Recompute the cached `E` of `edge`, falling back to uniform scores when
/// some alive operation has not been probed yet.
pub fn refresh_generalization(edge: &mut EdgeState) {
    match generalization_score(edge) {
        Ok(e) => edge.generalization = e,
        Err(_) => edge.reset_generalization(),
    }
}

/// `I = softmax(alpha) + lambda * E` over the alive operations, scattered to
/// registry positions (dead operations score 0).
pub fn importance(alpha: &[f64], generalization: &[f64], alive: &[bool], lambda: f64) -> Result<Vec<f64>> {
    if alpha.len() != alive.len() || generalization.len() != alive.len() {
        return Err(Error::invalid("alpha, E and alive flags differ in length"));
    }
    let idx: Vec<usize> = (0..alive.len()).filter(|&o| alive[o]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("edge without alive operations"));
    }
    let sm = math::softmax(&idx.iter().map(|&o| alpha[o]).collect::<Vec<_>>());
    let vals: Vec<f64> = idx.iter().zip(&sm).map(|(&o, s)| s + lambda * generalization[o]).collect();
    Ok(scatter(alive.len(), &idx, &vals))
}

/// `H` for every edge of one cell kind: `H[e][o] = softmax(beta)[e] * I[e][o]`.
pub fn edge_op_scores(space: &ArchSpace, store: &ParamStore, lambda: f64) -> Result<Vec<Vec<f64>>> {
    let node_softmax: Vec<Vec<f64>> = space.betas.iter().map(|&b| math::softmax(store.value(b).data())).collect();
    space
        .edges
        .iter()
        .map(|e| {
            let imp = importance(e.alpha_values(store), &e.generalization, &e.alive, lambda)?;
            let w = node_softmax[e.to - 2][e.beta.1];
            Ok(imp.iter().map(|i| w * i).collect())
        })
        .collect()
}

/// Best operation of an edge by `H`; ties go to the earlier registry entry.
pub fn best_op(scores: &[f64], alive: &[bool]) -> usize {
    let mut best = None;
    for (o, &s) in scores.iter().enumerate() {
        if alive[o] && best.map_or(true, |(_, b)| s > b) {
            best = Some((o, s));
        }
    }
    best.expect("edge has an alive operation").0
}

/// Discrete cell from `H` tables. `edges` lists `(from, to)` for each row of
/// `scores`.
pub fn discretize_cell(edges: &[(usize, usize)], scores: &[Vec<f64>], alive: &[Vec<bool>], names: &[alloc::string::String]) -> CellGenotype {
    let mut out = Vec::with_capacity(INTERMEDIATE_NODES * EDGES_PER_NODE);
    for node in 0..INTERMEDIATE_NODES {
        let to = node + 2;
        let mut candidates: Vec<(usize, usize, f64)> = edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 == to)
            .map(|(i, e)| {
                let o = best_op(&scores[i], &alive[i]);
                (e.0, o, scores[i][o])
            })
            .collect();
        // stable sort keeps lower predecessors first among equal scores
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut kept: Vec<(usize, usize, f64)> = candidates.into_iter().take(EDGES_PER_NODE).collect();
        kept.sort_by_key(|c| c.0);
        out.extend(kept.into_iter().map(|(from, o, _)| (names[o].clone(), from)));
    }
    CellGenotype { edges: out }
}

/// Discretize both cell kinds of `net`.
pub fn discretize(net: &Supernet, meta: GenotypeMeta) -> Result<Genotype> {
    let names = net.registry.names();
    let cell = |kind: CellKind| -> Result<CellGenotype> {
        let space = net.arch_space(kind);
        let scores = edge_op_scores(space, &net.store, net.config.lambda)?;
        let edges: Vec<(usize, usize)> = space.edges.iter().map(|e| (e.from, e.to)).collect();
        let alive: Vec<Vec<bool>> = space.edges.iter().map(|e| e.alive.clone()).collect();
        Ok(discretize_cell(&edges, &scores, &alive, &names))
    };
    let normal = cell(CellKind::Normal)?;
    let reduction = cell(CellKind::Reduction)?;
    let g = Genotype { schema_version: GENOTYPE_SCHEMA_VERSION, registry: names, normal, reduction, meta };
    g.validate()?;
    Ok(g)
}

/// Registry positions of the two weakest alive operations by `scores`, or
/// nothing when fewer than three are alive. Among equal scores the later
/// registry entry goes first, mirroring the discretization tie rule.
pub fn prune_candidates(scores: &[f64], alive: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alive.len()).filter(|&o| alive[o]).collect();
    if idx.len() < 3 {
        return Vec::new();
    }
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    idx.truncate(2);
    idx.sort_unstable();
    idx
}

/// Mark the two weakest alive operations of `edge` dead; returns them.
pub fn prune(edge: &mut EdgeState, scores: &[f64]) -> Result<Vec<usize>> {
    if scores.len() != edge.alive.len() {
        return Err(Error::invalid(format!("{} scores for {} operations", scores.len(), edge.alive.len())));
    }
    let removed = prune_candidates(scores, &edge.alive);
    for &o in &removed {
        edge.alive[o] = false;
        edge.probes[o] = Default::default();
    }
    if !removed.is_empty() {
        refresh_generalization(edge);
    }
    Ok(removed)
}

/// Prune every edge of both cell kinds of `net` by its current `H`.
pub fn prune_supernet(net: &mut Supernet) -> Result<()> {
    for kind in [CellKind::Normal, CellKind::Reduction] {
        let scores = edge_op_scores(net.arch_space(kind), &net.store, net.config.lambda)?;
        for (edge, s) in net.arch_space_mut(kind).edges.iter_mut().zip(&scores) {
            prune(edge, s)?;
        }
    }
    Ok(())
}

fn scatter(len: usize, idx: &[usize], vals: &[f64]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; len];
    for (&i, &v) in idx.iter().zip(vals) {
        out[i] = v;
    }
    out
}
