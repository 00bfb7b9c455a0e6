//! Finite-difference checks of every registry operation and of the
//! architecture-logit paths of the supernet.

use forgenas_core::nn::Mode;
use forgenas_core::ops::{parse_kind, OperatorRegistry};
use forgenas_core::rng;
use forgenas_core::supernet::{Supernet, SupernetConfig};
use forgenas_core::tensor::gradcheck;
use forgenas_core::tensor::{ParamStore, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 0);
    Tensor::from_fn(shape, |_| rng::uniform_range(&mut r, -1.0, 1.0))
}

fn check_op(name: &str, stride: usize, subset: Option<&[usize]>, seed: u64) -> f64 {
    let mut store = ParamStore::new();
    let mut init = rng::seeded(seed, 1);
    let stack = parse_kind(name).unwrap().instantiate(4, stride, true, &mut store, &mut init).unwrap();
    // move affine parameters away from their (1, 0) initialization
    let ids = stack.param_ids();
    for &id in &ids {
        let noisy = random(store.value(id).shape(), seed ^ id.0 as u64).data().iter().zip(store.value(id).data()).map(|(n, v)| v + 0.3 * n).collect();
        *store.value_mut(id) = Tensor::new(store.value(id).shape().to_vec(), noisy).unwrap();
    }
    let channels = subset.map_or(4, <[usize]>::len);
    let x = random(&[3, channels, 8, 8], seed + 7);
    let report = gradcheck::check(&[x], &store, &ids, H, seed, Some(48), |tape, v, s| {
        stack.clone().forward(tape, s, v[0], subset, Mode::Train)
    })
    .unwrap();
    report.max_relative_error()
}

#[test]
fn registry_operations_match_finite_differences() {
    let mut names = OperatorRegistry::default().names();
    names.push("max_pool_3x3".into());
    for name in &names {
        for stride in [1, 2] {
            for seed in 0..SEEDS {
                let err = check_op(name, stride, None, seed);
                assert!(err < TOL, "{name} stride {stride} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn channel_subsets_match_finite_differences() {
    for name in ["skip_connect", "SepCDC_3x3_0.5", "DilCDC_5x5_0.7"] {
        for stride in [1, 2] {
            for seed in 0..4 {
                let err = check_op(name, stride, Some(&[1, 3]), seed);
                assert!(err < TOL, "{name} stride {stride} seed {seed}: {err}");
            }
        }
    }
}

fn tiny_supernet(seed: u64, sample_rate: f64) -> Supernet {
    let config = SupernetConfig { init_channels: 4, groups: 1, sample_rate, arch_init_noise: 0.5, ..SupernetConfig::default() };
    let registry = OperatorRegistry::from_names(["skip_connect", "SepCDC_3x3_0.5", "DilCDC_3x3_0.7"]).unwrap();
    Supernet::new(config, registry, seed).unwrap()
}

#[test]
fn alpha_and_beta_match_finite_differences() {
    for seed in 0..SEEDS {
        let rate = if seed % 2 == 0 { 1.0 } else { 0.5 };
        let net = tiny_supernet(seed, rate);
        let x = random(&[2, 3, 8, 8], seed + 11);
        let arch = net.arch_ids();
        let report = gradcheck::check(&[], &net.store, &arch, H, seed, None, |tape, _, s| {
            let mut n = net.clone();
            n.store = s.clone();
            let xv = tape.constant(x.clone());
            Ok(n.forward(tape, xv, Mode::Probe)?.logits)
        })
        .unwrap();
        let err = report.max_relative_error();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}
