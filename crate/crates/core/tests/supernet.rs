use forgenas_core::estimator::{self, edge_op_scores};
use forgenas_core::genotype::GenotypeMeta;
use forgenas_core::nn::Mode;
use forgenas_core::ops::OperatorRegistry;
use forgenas_core::rng;
use forgenas_core::supernet::{mixed_op_forward, CellKind, ChannelMask, ProbeTarget, Supernet, SupernetConfig};
use forgenas_core::tensor::{ParamGroup, Tape, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 0);
    Tensor::from_fn(shape, |_| rng::uniform_range(&mut r, -1.0, 1.0))
}

fn net(sample_rate: f64, seed: u64) -> Supernet {
    let config = SupernetConfig { init_channels: 4, groups: 1, sample_rate, ..SupernetConfig::default() };
    Supernet::new(config, OperatorRegistry::default(), seed).unwrap()
}

#[test]
fn logits_shape_and_input_checks() {
    let mut n = net(0.25, 0);
    let mut tape = Tape::inference();
    let x = tape.constant(random(&[3, 3, 8, 8], 1));
    let trace = n.forward(&mut tape, x, Mode::Probe).unwrap();
    assert_eq!(tape.shape(trace.logits), &[3, 2]);
    assert_eq!(trace.cells.len(), 3);
    let odd = tape.constant(random(&[1, 3, 7, 8], 1));
    assert!(n.forward(&mut tape, odd, Mode::Probe).is_err());
    let gray = tape.constant(random(&[1, 1, 8, 8], 1));
    assert!(n.forward(&mut tape, gray, Mode::Probe).is_err());
}

#[test]
fn architecture_parameters_are_shared_per_kind() {
    let n = net(0.25, 0);
    // 14 alpha vectors and 4 beta vectors per cell kind
    assert_eq!(n.arch_ids().len(), 2 * (14 + 4));
    for kind in [CellKind::Normal, CellKind::Reduction] {
        let space = n.arch_space(kind);
        for node in 2..6 {
            assert_eq!(space.incoming(node).len(), node);
            assert_eq!(n.store.value(space.betas[node - 2]).numel(), node);
        }
    }
}

#[test]
fn bypassed_channels_pass_unchanged() {
    let mut n = net(0.25, 3);
    let mut tape = Tape::inference();
    let x = random(&[2, 4, 6, 6], 4);
    let xv = tape.constant(x.clone());
    let space = n.arch_space(CellKind::Normal).clone();
    let imp = tape.constant(Tensor::full(&[9], 1.0 / 9.0));
    let mask = ChannelMask { channels: 4, sampled: vec![2] };
    let store = n.store.clone();
    // edge 0 is a stride-1 edge of the first (normal) cell
    let y = mixed_op_forward(&mut tape, &store, &mut n.cells[0].edges[0], &space.edges[0], xv, imp, &mask, Mode::Probe).unwrap();
    let plane = 36;
    for b in 0..2 {
        for c in [0, 1, 3] {
            let got = &tape.value(y).data()[(b * 4 + c) * plane..][..plane];
            let want = &x.data()[(b * 4 + c) * plane..][..plane];
            assert_eq!(got, want);
        }
    }
}

#[test]
fn sampled_count_rounds_and_clamps() {
    assert_eq!(ChannelMask::sampled_count(16, 1.0 / 8.0), 2);
    assert_eq!(ChannelMask::sampled_count(4, 1.0 / 8.0), 1);
    assert_eq!(ChannelMask::sampled_count(8, 1.0), 8);
    assert_eq!(ChannelMask::sampled_count(10, 0.25), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_sorted_distinct_subsets(channels in 1usize..40, rate in 0.01f64..=1.0, seed in 0u64..1000) {
        let mut r = rng::seeded(seed, 0);
        let m = ChannelMask::sample(&mut r, channels, rate);
        prop_assert_eq!(m.sampled.len(), ChannelMask::sampled_count(channels, rate));
        prop_assert!(m.sampled.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.sampled.iter().all(|&c| c < channels));
        prop_assert_eq!(m.sampled.len() + m.bypassed().len(), channels);
    }
}

#[test]
fn probes_leave_the_base_pass_intact() {
    let mut n = net(0.5, 5);
    let mut tape = Tape::inference();
    let x = tape.constant(random(&[4, 3, 8, 8], 6));
    let trace = n.forward(&mut tape, x, Mode::Probe).unwrap();
    let base = tape.value(trace.logits).clone();
    let mark = tape.len();
    let target = ProbeTarget { kind: CellKind::Reduction, edge: 3, op: 4 };
    let a = n.forward_probe(&mut tape, &trace, target).unwrap();
    let first = tape.value(a).clone();
    tape.truncate(mark);
    let b = n.forward_probe(&mut tape, &trace, target).unwrap();
    assert_eq!(tape.value(b), &first);
    assert_ne!(&first, &base);
    assert_eq!(tape.value(trace.logits), &base);
}

#[test]
fn pruning_shrinks_every_edge_and_the_active_weights() {
    let mut n = net(0.25, 7);
    let before = n.active_weight_ids().len();
    estimator::prune_supernet(&mut n).unwrap();
    for kind in [CellKind::Normal, CellKind::Reduction] {
        assert!(n.arch_space(kind).edges.iter().all(|e| e.alive_count() == 7));
    }
    assert!(n.active_weight_ids().len() < before);
    let pruned = n.pruned_weight_ids();
    assert!(!pruned.is_empty());
    assert!(pruned.iter().all(|id| !n.active_weight_ids().contains(id)));
    let dead = n.arch_space(CellKind::Normal).edges[0].alive.iter().position(|&a| !a).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(random(&[2, 3, 8, 8], 1));
    let trace = n.forward(&mut tape, x, Mode::Probe).unwrap();
    assert!(n.forward_probe(&mut tape, &trace, ProbeTarget { kind: CellKind::Normal, edge: 0, op: dead }).is_err());
}

#[test]
fn edge_op_score_example() {
    let mut n = net(1.0, 0);
    for id in n.arch_ids() {
        let zeros = Tensor::zeros(n.store.value(id).shape());
        *n.store.value_mut(id) = zeros;
    }
    let edge = &mut n.arch_space_mut(CellKind::Normal).edges[0];
    for o in 2..9 {
        edge.alive[o] = false;
    }
    edge.reset_generalization();
    let scores = edge_op_scores(n.arch_space(CellKind::Normal), &n.store, 0.15).unwrap();
    // edge (0, 2): beta softmax over two incoming edges is 0.5, I = 0.5 + 0.15 * 0.5
    assert!((scores[0][0] - 0.2875).abs() < 1e-12);
    assert!((scores[0][1] - 0.2875).abs() < 1e-12);
    assert_eq!(&scores[0][2..], &[0.0; 7]);
}

#[test]
fn discretize_is_a_pure_function_of_the_state() {
    let n = net(0.25, 9);
    let a = estimator::discretize(&n, GenotypeMeta::default()).unwrap();
    let b = estimator::discretize(&n.clone(), GenotypeMeta::default()).unwrap();
    assert_eq!(a, b);
    a.validate().unwrap();
}

#[test]
fn weights_and_arch_live_in_separate_groups() {
    let n = net(0.25, 0);
    let arch = n.arch_ids();
    assert!(arch.iter().all(|&id| n.store.get(id).group == ParamGroup::Architecture));
    assert!(n.active_weight_ids().iter().all(|&id| n.store.get(id).group == ParamGroup::Weights));
    assert_eq!(n.active_weight_ids().iter().map(|&id| n.store.value(id).numel()).sum::<usize>(), n.num_weights());
}
