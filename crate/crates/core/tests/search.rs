mod common;

use common::toy_dataset;
use forgenas_core::data::{generate_synthetic, Domain, SynthConfig};
use forgenas_core::ops::OperatorRegistry;
use forgenas_core::search::{cross_dataset_search, search, Phase, RateUpdate, SearchConfig, Searcher};
use forgenas_core::supernet::SupernetConfig;

fn tiny_config(epochs: usize, warmup: usize, period: usize) -> SearchConfig {
    SearchConfig {
        epochs,
        warmup_epochs: warmup,
        prune_period: period,
        batch_size: 4,
        probe_batch: 4,
        supernet: SupernetConfig { init_channels: 2, groups: 1, ..SupernetConfig::default() },
        seed: 3,
        ..SearchConfig::default()
    }
}

#[test]
fn full_schedule_is_followed() {
    let data = toy_dataset(1, 8, 4);
    let out = search(tiny_config(65, 10, 20), OperatorRegistry::default(), &data).unwrap();
    for epoch in 1..=65 {
        let phases: Vec<Phase> = out.events.iter().filter(|e| e.epoch == epoch).map(|e| e.phase).collect();
        let arch = phases.contains(&Phase::Arch);
        assert_eq!(arch, epoch > 10, "epoch {epoch}");
        assert!(phases.contains(&Phase::Weight));
        assert_eq!(phases.contains(&Phase::Probe), epoch > 10, "epoch {epoch}");
        let prune = [20, 40, 60].contains(&epoch);
        assert_eq!(phases.contains(&Phase::Prune), prune, "epoch {epoch}");
        assert_eq!(phases.contains(&Phase::Rate), prune, "epoch {epoch}");
    }
    let prunes: Vec<_> = out.events.iter().filter(|e| e.phase == Phase::Prune).collect();
    for (ev, alive) in prunes.iter().zip([7, 5, 3]) {
        assert!(ev.alive.as_ref().unwrap().iter().all(|&a| a == alive));
    }
    let rates: Vec<f64> = out.events.iter().filter(|e| e.phase == Phase::Rate).map(|e| e.rate.unwrap()).collect();
    assert_eq!(rates, vec![0.25, 0.5, 1.0]);
    out.genotype.validate().unwrap();
}

#[test]
fn halving_policy_shrinks_the_rate() {
    let data = toy_dataset(1, 8, 4);
    let config = SearchConfig { rate_update: RateUpdate::HalveSampled, probe_interval: 0, ..tiny_config(4, 1, 2) };
    let out = search(config, OperatorRegistry::default(), &data).unwrap();
    let rates: Vec<f64> = out.events.iter().filter(|e| e.phase == Phase::Rate).map(|e| e.rate.unwrap()).collect();
    assert_eq!(rates, vec![0.0625, 0.03125]);
}

#[test]
fn arch_and_weight_steps_alternate_after_warmup() {
    let data = toy_dataset(1, 16, 4);
    let out = search(tiny_config(3, 1, 10), OperatorRegistry::default(), &data).unwrap();
    let steps: Vec<Phase> = out
        .events
        .iter()
        .filter(|e| e.epoch > 1 && matches!(e.phase, Phase::Arch | Phase::Weight))
        .map(|e| e.phase)
        .collect();
    assert!(!steps.is_empty());
    for pair in steps.chunks(2) {
        assert_eq!(pair, [Phase::Arch, Phase::Weight]);
    }
}

#[test]
fn search_is_deterministic_and_resumable() {
    let data = toy_dataset(2, 12, 4);
    let config = tiny_config(4, 1, 2);
    let a = search(config.clone(), OperatorRegistry::default(), &data).unwrap();
    let b = search(config.clone(), OperatorRegistry::default(), &data).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.events, b.events);

    let mut s = Searcher::new(config, OperatorRegistry::default(), &data).unwrap();
    s.run_epoch(&data).unwrap();
    s.run_epoch(&data).unwrap();
    let resumed = s.clone().run(&data).unwrap();
    assert_eq!(resumed.genotype, a.genotype);
    assert_eq!(resumed.events, a.events);
}

#[test]
fn search_rejects_a_different_dataset() {
    let data = toy_dataset(2, 12, 4);
    let other = toy_dataset(3, 12, 4);
    let mut s = Searcher::new(tiny_config(2, 1, 2), OperatorRegistry::default(), &data).unwrap();
    assert!(s.run_epoch(&other).is_err());
}

#[test]
fn single_class_data_is_rejected() {
    let data = toy_dataset(2, 12, 4);
    let reals: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].label == 0).collect();
    assert!(Searcher::new(tiny_config(2, 1, 2), OperatorRegistry::default(), &data.subset(&reals)).is_err());
}

#[test]
fn cross_search_step_order() {
    let domains: Vec<_> = Domain::ALL
        .iter()
        .enumerate()
        .map(|(k, &d)| generate_synthetic(10 + k as u64, 8, d, 16, &SynthConfig::default()).unwrap())
        .collect();
    let config = SearchConfig { samples_per_domain: 8, ..tiny_config(3, 1, 10) };
    let out = cross_dataset_search(config, OperatorRegistry::default(), &domains).unwrap();
    out.genotype.validate().unwrap();
    let steps: Vec<_> = out.events.iter().filter(|e| e.phase != Phase::Validate && e.phase != Phase::Probe).collect();
    assert!(!steps.is_empty());
    for chunk in steps.chunks(4) {
        let phases: Vec<Phase> = chunk.iter().map(|e| e.phase).collect();
        assert_eq!(phases, [Phase::InnerAdapt, Phase::InnerAdapt, Phase::SharedWeight, Phase::Arch]);
        let target = chunk[2].domain.unwrap();
        assert_eq!(chunk[3].domain, Some(target));
        let mut sources: Vec<usize> = chunk[..2].iter().map(|e| e.domain.unwrap()).collect();
        sources.sort_unstable();
        let expected: Vec<usize> = (0..3).filter(|&d| d != target).collect();
        assert_eq!(sources, expected);
        assert!(chunk.iter().all(|e| e.step == chunk[0].step));
    }
}
