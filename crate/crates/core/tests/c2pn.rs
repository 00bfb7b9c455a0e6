mod common;

use common::toy_dataset;
use forgenas_core::c2pn::{activation_map, evaluate, train, DetectionNet, NetConfig, TrainConfig};
use forgenas_core::data::{generate_synthetic, Domain, SynthConfig};
use forgenas_core::genotype::Genotype;
use forgenas_core::nn::Mode;
use forgenas_core::ops::OperatorRegistry;
use forgenas_core::rng;
use forgenas_core::tensor::{Tape, Tensor};

fn genotype(seed: u64) -> Genotype {
    let mut r = rng::seeded(seed, 0);
    Genotype::random(&OperatorRegistry::default(), &mut r, seed)
}

fn small() -> NetConfig {
    NetConfig { init_channels: 4, groups: 1, ..NetConfig::default() }
}

#[test]
fn every_pyramid_tap_reaches_the_logits() {
    let config = NetConfig { init_channels: 2, groups: 3, ..NetConfig::default() };
    let mut net = DetectionNet::build(&genotype(1), config, 0).unwrap();
    let mut r = rng::seeded(4, 0);
    let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng::uniform(&mut r));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let trace = net.forward(&mut tape, xv, Mode::Probe).unwrap();
    assert_eq!(trace.taps.len(), 3);
    let loss = tape.sum(trace.logits).unwrap();
    for &t in &trace.taps {
        tape.retain_grad(t);
    }
    tape.backward(loss).unwrap();
    for &t in &trace.taps {
        let g = tape.grad(t).expect("tap on the gradient path");
        assert!(g.iter().any(|v| *v != 0.0));
    }
}

#[test]
fn plain_cascade_uses_only_the_last_cell() {
    let pyramid = DetectionNet::build(&genotype(1), small(), 0).unwrap();
    let plain = DetectionNet::build(&genotype(1), NetConfig { pyramid: false, groups: 2, ..small() }, 0).unwrap();
    let pyramid2 = DetectionNet::build(&genotype(1), NetConfig { groups: 2, ..small() }, 0).unwrap();
    assert!(plain.num_params() < pyramid2.num_params());
    assert!(pyramid.num_params() < pyramid2.num_params());
}

#[test]
fn round_tripped_genotype_builds_the_same_network() {
    let g = genotype(8);
    let copy: Genotype = g.clone();
    let a = DetectionNet::build(&g, small(), 5).unwrap();
    let b = DetectionNet::build(&copy, small(), 5).unwrap();
    assert_eq!(a.num_params(), b.num_params());
    assert_eq!(a.weights_fingerprint(), b.weights_fingerprint());
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let train_data = toy_dataset(1, 16, 8);
    let val = toy_dataset(2, 8, 8);
    let mut net = DetectionNet::build(&genotype(2), small(), 0).unwrap();
    let before = net.weights_fingerprint();
    let config = TrainConfig { epochs: 3, batch_size: 8, lr: 0.0, ..TrainConfig::default() };
    let out = train(&mut net, &train_data, &val, &config).unwrap();
    assert_eq!(out.curves.len(), 3);
    assert_eq!(net.weights_fingerprint(), before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let train_data = toy_dataset(1, 96, 8);
    let val = toy_dataset(2, 32, 8);
    let config = TrainConfig { epochs: 10, batch_size: 16, ..TrainConfig::default() };
    let mut a = DetectionNet::build(&genotype(3), small(), 0).unwrap();
    let mut b = a.clone();
    let out = train(&mut a, &train_data, &val, &config).unwrap();
    train(&mut b, &train_data, &val, &config).unwrap();
    assert_eq!(a.weights_fingerprint(), b.weights_fingerprint());
    let first = out.curves.first().unwrap().train_loss;
    let last = out.curves.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let best = out.curves.iter().map(|c| c.val_auc).fold(f64::MIN, f64::max);
    assert_eq!(out.curves[out.best_epoch - 1].val_auc, best);
}

#[test]
fn evaluation_is_pure() {
    let test = toy_dataset(4, 20, 8);
    let mut net = DetectionNet::build(&genotype(4), small(), 0).unwrap();
    let a = evaluate(&mut net, &test, Vec::new(), 1, 2).unwrap();
    let b = evaluate(&mut net, &test, Vec::new(), 1, 2).unwrap();
    assert_eq!(a, b);
    a.validate().unwrap();
    let reals: Vec<usize> = (0..test.len()).filter(|&i| test.samples[i].label == 0).collect();
    assert!(evaluate(&mut net, &test.subset(&reals), Vec::new(), 1, 2).is_err());
}

#[test]
fn activation_maps_cover_the_input() {
    let data = generate_synthetic(5, 4, Domain::Splice, 16, &SynthConfig::default()).unwrap();
    let mut net = DetectionNet::build(&genotype(5), NetConfig { groups: 2, ..small() }, 0).unwrap();
    for s in &data.samples {
        let map = activation_map(&mut net, &s.image).unwrap();
        assert_eq!((map.height, map.width), (16, 16));
        assert_eq!(map.values.len(), 256);
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        if !map.degenerate {
            assert!(map.quadrant().is_some());
        }
    }
    assert!(activation_map(&mut net, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
}
