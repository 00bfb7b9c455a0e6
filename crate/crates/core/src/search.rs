//! Bilevel in-dataset search and meta-learned cross-dataset search.
//!
//! The in-dataset search splits the data evenly into an architecture part and
//! a weight part. After a weight-only warm-up, every step takes one
//! architecture step on the former and one weight step on the latter. Each
//! epoch after warm-up ends with probes that refresh the generalization
//! scores; every `prune_period` epochs the two weakest operations of every
//! edge are pruned and the channel sampling rate is updated.
//!
//! The cross-dataset search picks a random target domain per step, adapts a
//! copy of the shared weights on each source domain with one plain SGD step,
//! updates the shared weights with the mean target-domain gradient of the
//! adapted copies (first order) and finally updates the architecture on the
//! target batch with the shared weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitSpec, FAKE, REAL};
use crate::estimator;
use crate::genotype::{Genotype, GenotypeMeta};
use crate::nn::{batch_accuracy, Mode};
use crate::ops::OperatorRegistry;
use crate::rng::{self, Rng};
use crate::supernet::{CellKind, ProbeTarget, Supernet, SupernetConfig};
use crate::tensor::{Adam, Optimizer, ParamGroup, ParamId, Tape};
use crate::{Error, Result};

/// How the channel sampling rate changes at prune epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateUpdate {
    /// Sampled proportion doubles, capped at 1.
    DoubleSampled,
    /// Sampled proportion halves.
    HalveSampled,
}

pub fn update_sample_rate(rate: f64, policy: RateUpdate) -> f64 {
    match policy {
        RateUpdate::DoubleSampled => (rate * 2.0).min(1.0),
        RateUpdate::HalveSampled => rate / 2.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub prune_period: usize,
    pub batch_size: usize,
    pub probe_batch: usize,
    /// Probe once every this many epochs after warm-up; 0 disables probes.
    pub probe_interval: usize,
    pub rate_update: RateUpdate,
    pub supernet: SupernetConfig,
    pub weight_optimizer: Adam,
    pub arch_optimizer: Adam,
    /// Inner SGD learning rate of the cross-dataset adaptation.
    pub inner_lr: f64,
    /// Images drawn from every domain per cross-dataset epoch.
    pub samples_per_domain: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 65,
            warmup_epochs: 10,
            prune_period: 20,
            batch_size: 96,
            probe_batch: 32,
            probe_interval: 1,
            rate_update: RateUpdate::DoubleSampled,
            supernet: SupernetConfig::default(),
            weight_optimizer: Adam { lr: 3e-3, weight_decay: 3e-4, ..Adam::default() },
            arch_optimizer: Adam { lr: 6e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 },
            inner_lr: 0.01,
            samples_per_domain: 2000,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!("warm-up {} must be shorter than {} epochs", self.warmup_epochs, self.epochs)));
        }
        if self.prune_period == 0 {
            return Err(Error::invalid("prune period must be at least 1"));
        }
        if self.batch_size < 2 || self.probe_batch < 2 {
            return Err(Error::invalid("batches need at least two samples"));
        }
        if !(self.supernet.sample_rate > 0.0 && self.supernet.sample_rate <= 1.0) {
            return Err(Error::invalid(format!("sample rate {} outside (0, 1]", self.supernet.sample_rate)));
        }
        if !(self.inner_lr >= 0.0) {
            return Err(Error::invalid("inner learning rate must be non-negative"));
        }
        Ok(())
    }

    /// Whether `epoch` (1-based) prunes and updates the sampling rate.
    pub fn is_prune_epoch(&self, epoch: usize) -> bool {
        epoch >= self.prune_period && epoch % self.prune_period == 0
    }

    fn is_probe_epoch(&self, epoch: usize) -> bool {
        self.probe_interval > 0 && epoch > self.warmup_epochs && (epoch - self.warmup_epochs) % self.probe_interval == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Weight,
    Arch,
    Validate,
    Probe,
    Prune,
    Rate,
    InnerAdapt,
    SharedWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Architecture part of the in-dataset split.
    Search,
    /// Weight part of the in-dataset split.
    Eval,
    Source,
    Target,
    None,
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<usize>,
    /// Alive operations per edge, normal cell edges first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alive: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

impl SearchEvent {
    fn new(epoch: usize, step: usize, phase: Phase, split: Split) -> Self {
        SearchEvent { epoch, step, phase, split, loss: None, acc: None, domain: None, alive: None, rate: None }
    }

    fn with_metrics(mut self, loss: f64, acc: f64) -> Self {
        self.loss = Some(loss);
        self.acc = Some(acc);
        self
    }
}

fn check_classes(labels: &[usize], what: &str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{what} is empty")));
    }
    if !labels.contains(&REAL) || !labels.contains(&FAKE) {
        return Err(Error::Dataset(format!("{what} contains a single class")));
    }
    Ok(())
}

/// Consecutive batches of a shuffled order; a trailing batch with fewer than
/// two samples is dropped.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    order.chunks(size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// One optimization step of `group` on a batch. Returns `(loss, acc)`.
fn train_step(net: &mut Supernet, opt: &mut Optimizer, group: ParamGroup, data: &Dataset, idx: &[usize]) -> Result<(f64, f64)> {
    let (loss, acc) = accumulate_grads(net, group, data, idx, 1.0)?;
    let ids = match group {
        ParamGroup::Weights => net.active_weight_ids(),
        ParamGroup::Architecture => net.arch_ids(),
    };
    opt.step(&mut net.store, &ids)?;
    Ok((loss, acc))
}

/// Forward and backward of a batch, adding `scale` times the gradient of
/// `group` into the store.
fn accumulate_grads(net: &mut Supernet, group: ParamGroup, data: &Dataset, idx: &[usize], scale: f64) -> Result<(f64, f64)> {
    let (x, labels) = data.batch(idx, None)?;
    let mut tape = Tape::training(group);
    let x = tape.constant(x);
    let trace = net.forward(&mut tape, x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
    let loss = if scale == 1.0 { loss } else { tape.scale(loss, scale)? };
    let acc = batch_accuracy(tape.value(trace.logits), &labels);
    let value = tape.value(loss).item() / scale;
    tape.backward_into(loss, &mut net.store)?;
    if group == ParamGroup::Weights {
        // a channel sample can leave a whole layer unused for one step
        let ids = net.active_weight_ids();
        net.store.fill_missing_grads(&ids);
    }
    Ok((value, acc))
}

/// Mean loss and accuracy over `idx` with batch statistics and no updates.
fn validate(net: &mut Supernet, data: &Dataset, idx: &[usize], batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
    for b in batches(idx, batch) {
        let (x, labels) = data.batch(&b, None)?;
        let mut tape = Tape::inference();
        let x = tape.constant(x);
        let trace = net.forward(&mut tape, x, Mode::Probe)?;
        let l = tape.softmax_cross_entropy(trace.logits, &labels)?;
        loss += tape.value(l).item() * b.len() as f64;
        acc += batch_accuracy(tape.value(trace.logits), &labels) * b.len() as f64;
        n += b.len();
    }
    Ok((loss / n.max(1) as f64, acc / n.max(1) as f64))
}

/// Classification error of every alive (cell kind, edge, op) with that op
/// alone on its edge.
fn probe_errors(net: &mut Supernet, data: &Dataset, idx: &[usize]) -> Result<Vec<(ProbeTarget, f64)>> {
    let (x, labels) = data.batch(idx, None)?;
    let mut tape = Tape::inference();
    let x = tape.constant(x);
    let trace = net.forward(&mut tape, x, Mode::Probe)?;
    let mut out = Vec::new();
    for kind in [CellKind::Normal, CellKind::Reduction] {
        for edge in 0..net.arch_space(kind).edges.len() {
            for op in net.arch_space(kind).edges[edge].alive_ops() {
                let mark = tape.len();
                let target = ProbeTarget { kind, edge, op };
                let logits = net.forward_probe(&mut tape, &trace, target)?;
                out.push((target, 1.0 - batch_accuracy(tape.value(logits), &labels)));
                tape.truncate(mark);
            }
        }
    }
    Ok(out)
}

/// Probe on one batch of each split and refresh every edge's `E`.
fn run_probes(net: &mut Supernet, data_search: (&Dataset, &[usize]), data_eval: (&Dataset, &[usize])) -> Result<usize> {
    let search = probe_errors(net, data_search.0, data_search.1)?;
    let eval = probe_errors(net, data_eval.0, data_eval.1)?;
    for ((target, e_search), (_, e_eval)) in search.iter().zip(&eval) {
        net.arch_space_mut(target.kind).edges[target.edge].probes[target.op].push(*e_search, *e_eval)?;
    }
    for kind in [CellKind::Normal, CellKind::Reduction] {
        for edge in &mut net.arch_space_mut(kind).edges {
            estimator::refresh_generalization(edge);
        }
    }
    Ok(search.len())
}

fn alive_counts(net: &Supernet) -> Vec<usize> {
    net.arch.iter().flat_map(|s| s.edges.iter().map(|e| e.alive_count())).collect()
}

fn draw(rng: &mut Rng, pool: &[usize], k: usize) -> Vec<usize> {
    rng::sample_indices(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Resumable state of an in-dataset search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Searcher {
    pub config: SearchConfig,
    pub net: Supernet,
    weight_opt: Optimizer,
    arch_opt: Optimizer,
    data_rng: Rng,
    probe_rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    step: usize,
    /// Architecture part.
    pub search_idx: Vec<usize>,
    /// Weight part.
    pub eval_idx: Vec<usize>,
    pub dataset_fingerprint: u64,
    pub events: Vec<SearchEvent>,
}

impl Searcher {
    pub fn new(config: SearchConfig, registry: OperatorRegistry, data: &Dataset) -> Result<Self> {
        config.validate()?;
        check_classes(&data.labels(), "dataset")?;
        let parts = SplitSpec::even_half().assign(&data.labels(), config.seed)?;
        let labels = data.labels();
        for (name, part) in [("search split", &parts[0]), ("eval split", &parts[1])] {
            check_classes(&part.iter().map(|&i| labels[i]).collect::<Vec<_>>(), name)?;
        }
        let net = Supernet::new(config.supernet.clone(), registry, config.seed)?;
        Ok(Searcher {
            weight_opt: Optimizer::adam(config.weight_optimizer),
            arch_opt: Optimizer::adam(config.arch_optimizer),
            data_rng: rng::seeded(config.seed, rng::stream::DATA),
            probe_rng: rng::seeded(config.seed, rng::stream::PROBE),
            epoch: 0,
            step: 0,
            search_idx: parts[0].clone(),
            eval_idx: parts[1].clone(),
            dataset_fingerprint: data.fingerprint(),
            events: Vec::new(),
            net,
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Run the next epoch.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<()> {
        if data.fingerprint() != self.dataset_fingerprint {
            return Err(Error::Dataset("dataset differs from the one the search started on".into()));
        }
        if self.is_done() {
            return Err(Error::invalid("search already finished"));
        }
        let epoch = self.epoch + 1;
        let cfg = self.config.clone();
        let mut s_order = self.search_idx.clone();
        let mut e_order = self.eval_idx.clone();
        rng::shuffle(&mut self.data_rng, &mut s_order);
        rng::shuffle(&mut self.data_rng, &mut e_order);
        let e_batches = batches(&e_order, cfg.batch_size);
        if epoch <= cfg.warmup_epochs {
            for b in &e_batches {
                self.weight_step(epoch, data, b)?;
            }
        } else {
            let s_batches = batches(&s_order, cfg.batch_size);
            for (sb, eb) in s_batches.iter().zip(&e_batches) {
                self.step += 1;
                let (loss, acc) = train_step(&mut self.net, &mut self.arch_opt, ParamGroup::Architecture, data, sb)?;
                self.events.push(SearchEvent::new(epoch, self.step, Phase::Arch, Split::Search).with_metrics(loss, acc));
                self.weight_step(epoch, data, eb)?;
            }
        }
        // shuffled: batch-statistic validation needs class-mixed batches
        let (loss, acc) = validate(&mut self.net, data, &s_order, cfg.batch_size)?;
        self.events.push(SearchEvent::new(epoch, self.step, Phase::Validate, Split::Search).with_metrics(loss, acc));
        if cfg.is_probe_epoch(epoch) {
            let k = cfg.probe_batch.min(self.search_idx.len()).min(self.eval_idx.len());
            let sb = draw(&mut self.probe_rng, &self.search_idx, k);
            let eb = draw(&mut self.probe_rng, &self.eval_idx, k);
            let n = run_probes(&mut self.net, (data, &sb), (data, &eb))?;
            let mut ev = SearchEvent::new(epoch, self.step, Phase::Probe, Split::None);
            ev.alive = Some(vec![n]);
            self.events.push(ev);
        }
        if cfg.is_prune_epoch(epoch) {
            estimator::prune_supernet(&mut self.net)?;
            let mut ev = SearchEvent::new(epoch, self.step, Phase::Prune, Split::None);
            ev.alive = Some(alive_counts(&self.net));
            self.events.push(ev);
            self.net.sample_rate = update_sample_rate(self.net.sample_rate, cfg.rate_update);
            let mut ev = SearchEvent::new(epoch, self.step, Phase::Rate, Split::None);
            ev.rate = Some(self.net.sample_rate);
            self.events.push(ev);
        }
        self.epoch = epoch;
        Ok(())
    }

    fn weight_step(&mut self, epoch: usize, data: &Dataset, idx: &[usize]) -> Result<()> {
        self.step += 1;
        let (loss, acc) = train_step(&mut self.net, &mut self.weight_opt, ParamGroup::Weights, data, idx)?;
        self.events.push(SearchEvent::new(epoch, self.step, Phase::Weight, Split::Eval).with_metrics(loss, acc));
        Ok(())
    }

    pub fn genotype(&self) -> Result<Genotype> {
        let meta = GenotypeMeta { method: "in_dataset".into(), seed: self.config.seed, epochs: self.epoch };
        estimator::discretize(&self.net, meta)
    }

    /// Run the remaining epochs and discretize.
    pub fn run(mut self, data: &Dataset) -> Result<SearchOutcome> {
        while !self.is_done() {
            self.run_epoch(data)?;
        }
        Ok(SearchOutcome { genotype: self.genotype()?, events: self.events, net: self.net })
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub events: Vec<SearchEvent>,
    pub net: Supernet,
}

/// In-dataset search from scratch.
pub fn search(config: SearchConfig, registry: OperatorRegistry, data: &Dataset) -> Result<SearchOutcome> {
    Searcher::new(config, registry, data)?.run(data)
}

/// Resumable state of a cross-dataset search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSearcher {
    pub config: SearchConfig,
    pub net: Supernet,
    weight_opt: Optimizer,
    arch_opt: Optimizer,
    data_rng: Rng,
    domain_rng: Rng,
    probe_rng: Rng,
    pub epoch: usize,
    step: usize,
    pub dataset_fingerprints: Vec<u64>,
    pub events: Vec<SearchEvent>,
}

impl CrossSearcher {
    pub fn new(config: SearchConfig, registry: OperatorRegistry, domains: &[Dataset]) -> Result<Self> {
        config.validate()?;
        if domains.len() < 2 {
            return Err(Error::invalid(format!("cross-dataset search needs at least 2 datasets, got {}", domains.len())));
        }
        for (k, d) in domains.iter().enumerate() {
            check_classes(&d.labels(), &format!("dataset {k}"))?;
        }
        let net = Supernet::new(config.supernet.clone(), registry, config.seed)?;
        Ok(CrossSearcher {
            weight_opt: Optimizer::adam(config.weight_optimizer),
            arch_opt: Optimizer::adam(config.arch_optimizer),
            data_rng: rng::seeded(config.seed, rng::stream::DATA),
            domain_rng: rng::seeded(config.seed, rng::stream::DOMAIN),
            probe_rng: rng::seeded(config.seed, rng::stream::PROBE),
            epoch: 0,
            step: 0,
            dataset_fingerprints: domains.iter().map(Dataset::fingerprint).collect(),
            events: Vec::new(),
            net,
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn run_epoch(&mut self, domains: &[Dataset]) -> Result<()> {
        let prints: Vec<u64> = domains.iter().map(Dataset::fingerprint).collect();
        if prints != self.dataset_fingerprints {
            return Err(Error::Dataset("datasets differ from the ones the search started on".into()));
        }
        if self.is_done() {
            return Err(Error::invalid("search already finished"));
        }
        let epoch = self.epoch + 1;
        let cfg = self.config.clone();
        let k = domains.len();
        // per-domain pools of this epoch, cut into batches
        let pools: Vec<Vec<Vec<usize>>> = domains
            .iter()
            .map(|d| {
                let n = cfg.samples_per_domain.min(d.len());
                let mut pool = rng::sample_indices(&mut self.data_rng, d.len(), n);
                rng::shuffle(&mut self.data_rng, &mut pool);
                batches(&pool, cfg.batch_size)
            })
            .collect();
        let steps = pools.iter().map(Vec::len).min().unwrap_or(0);
        for s in 0..steps {
            self.step += 1;
            let target = rng::below(&mut self.domain_rng, k);
            let sources: Vec<usize> = (0..k).filter(|&d| d != target).collect();
            self.outer_step(epoch, domains, &pools, s, target, &sources)?;
        }
        for (d, data) in domains.iter().enumerate() {
            let n = cfg.probe_batch.max(cfg.batch_size).min(data.len());
            let idx = draw(&mut self.probe_rng, &(0..data.len()).collect::<Vec<_>>(), n);
            let (loss, acc) = validate(&mut self.net, data, &idx, cfg.batch_size)?;
            let mut ev = SearchEvent::new(epoch, self.step, Phase::Validate, Split::Target).with_metrics(loss, acc);
            ev.domain = Some(d);
            self.events.push(ev);
        }
        if cfg.is_probe_epoch(epoch) {
            // search-stage error on a source domain, estimation error on a
            // different (held-out) domain
            let target = rng::below(&mut self.probe_rng, k);
            let source = (target + 1 + rng::below(&mut self.probe_rng, k - 1)) % k;
            let pick = |rng: &mut Rng, d: &Dataset| draw(rng, &(0..d.len()).collect::<Vec<_>>(), cfg.probe_batch.min(d.len()));
            let sb = pick(&mut self.probe_rng, &domains[source]);
            let tb = pick(&mut self.probe_rng, &domains[target]);
            let n = run_probes(&mut self.net, (&domains[source], &sb), (&domains[target], &tb))?;
            let mut ev = SearchEvent::new(epoch, self.step, Phase::Probe, Split::None);
            ev.alive = Some(vec![n]);
            ev.domain = Some(target);
            self.events.push(ev);
        }
        self.epoch = epoch;
        Ok(())
    }

    fn outer_step(&mut self, epoch: usize, domains: &[Dataset], pools: &[Vec<Vec<usize>>], s: usize, target: usize, sources: &[usize]) -> Result<()> {
        let weight_ids = self.net.active_weight_ids();
        let mut learners = Vec::with_capacity(sources.len());
        for &src in sources {
            let mut learner = self.net.clone();
            let (loss, acc) = accumulate_grads(&mut learner, ParamGroup::Weights, &domains[src], &pools[src][s], 1.0)?;
            sgd_update(&mut learner, &weight_ids, self.config.inner_lr)?;
            let mut ev = SearchEvent::new(epoch, self.step, Phase::InnerAdapt, Split::Source).with_metrics(loss, acc);
            ev.domain = Some(src);
            self.events.push(ev);
            learners.push(learner);
        }
        let scale = 1.0 / learners.len() as f64;
        let (mut loss, mut acc) = (0.0, 0.0);
        for learner in &mut learners {
            let (l, a) = accumulate_grads(learner, ParamGroup::Weights, &domains[target], &pools[target][s], scale)?;
            loss += l * scale;
            acc += a * scale;
            for &id in &weight_ids {
                let g = learner.store.get_mut(id).grad.take().ok_or(Error::MissingGrad(id.0))?;
                self.net.store.accumulate_grad(id, g.data())?;
            }
        }
        self.weight_opt.step(&mut self.net.store, &weight_ids)?;
        let mut ev = SearchEvent::new(epoch, self.step, Phase::SharedWeight, Split::Target).with_metrics(loss, acc);
        ev.domain = Some(target);
        self.events.push(ev);
        let (loss, acc) = train_step(&mut self.net, &mut self.arch_opt, ParamGroup::Architecture, &domains[target], &pools[target][s])?;
        let mut ev = SearchEvent::new(epoch, self.step, Phase::Arch, Split::Target).with_metrics(loss, acc);
        ev.domain = Some(target);
        self.events.push(ev);
        Ok(())
    }

    pub fn genotype(&self) -> Result<Genotype> {
        let meta = GenotypeMeta { method: "cross_dataset".into(), seed: self.config.seed, epochs: self.epoch };
        estimator::discretize(&self.net, meta)
    }

    pub fn run(mut self, domains: &[Dataset]) -> Result<SearchOutcome> {
        while !self.is_done() {
            self.run_epoch(domains)?;
        }
        Ok(SearchOutcome { genotype: self.genotype()?, events: self.events, net: self.net })
    }
}

/// Plain gradient step `p -= lr * g`, consuming the gradients.
fn sgd_update(net: &mut Supernet, ids: &[ParamId], lr: f64) -> Result<()> {
    for &id in ids {
        let p = net.store.get_mut(id);
        let g = p.grad.take().ok_or(Error::MissingGrad(id.0))?;
        for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Cross-dataset search from scratch.
pub fn cross_dataset_search(config: SearchConfig, registry: OperatorRegistry, domains: &[Dataset]) -> Result<SearchOutcome> {
    CrossSearcher::new(config, registry, domains)?.run(domains)
}
