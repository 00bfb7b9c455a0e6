use forgenas_core::data::{generate_synthetic, Dataset, Domain, Region, Sample, SplitSpec, SynthConfig};
use forgenas_core::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn synthetic_sets_are_balanced_and_localized() {
    for domain in Domain::ALL {
        let ds = generate_synthetic(3, 40, domain, 32, &SynthConfig::default()).unwrap();
        assert_eq!(ds.class_counts(), (20, 20));
        assert_eq!(ds.image_size(), Some((32, 32)));
        for s in &ds.samples {
            assert_eq!(s.domain, domain.name());
            match (s.label, s.region) {
                (0, None) => {}
                (1, Some(r)) => {
                    // the region never straddles a quadrant boundary
                    let q = r.quadrant(32, 32);
                    let (qx, qy) = ((q % 2) * 16, (q / 2) * 16);
                    assert!(r.x0 >= qx && r.x1 <= qx + 16 && r.y0 >= qy && r.y1 <= qy + 16, "{r:?}");
                    assert!(r.width() >= 8 && r.height() >= 8);
                }
                other => panic!("unexpected label/region {other:?}"),
            }
        }
    }
}

#[test]
fn synthetic_sets_depend_only_on_the_seed() {
    let a = generate_synthetic(9, 12, Domain::BlurPatch, 16, &SynthConfig::default()).unwrap();
    let b = generate_synthetic(9, 12, Domain::BlurPatch, 16, &SynthConfig::default()).unwrap();
    let c = generate_synthetic(10, 12, Domain::BlurPatch, 16, &SynthConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn generator_rejects_bad_sizes() {
    assert!(generate_synthetic(1, 5, Domain::Splice, 16, &SynthConfig::default()).is_err());
    assert!(generate_synthetic(1, 2, Domain::Splice, 16, &SynthConfig::default()).is_err());
    assert!(generate_synthetic(1, 8, Domain::Splice, 8, &SynthConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_split_partitions_every_class(reals in 2usize..60, fakes in 2usize..60, seed in 0u64..500) {
        let labels: Vec<usize> = (0..reals + fakes).map(|i| usize::from(i >= reals)).collect();
        let parts = SplitSpec::even_half().assign(&labels, seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in [0, 1] {
            let n = labels.iter().filter(|&&l| l == class).count();
            let first = parts[0].iter().filter(|&&i| labels[i] == class).count();
            prop_assert!((first as f64 - n as f64 / 2.0).abs() <= 0.5);
        }
        prop_assert!(parts.iter().all(|p| p.windows(2).all(|w| w[0] < w[1])));
        prop_assert_eq!(&parts, &SplitSpec::even_half().assign(&labels, seed).unwrap());
    }
}

#[test]
fn batch_flips_rows_horizontally() {
    let img = Tensor::from_fn(&[3, 2, 3], |i| i as f64 / 20.0);
    let ds = Dataset::new(vec![Sample::new(img.clone(), 1, None, "t").unwrap()]).unwrap();
    let (plain, labels) = ds.batch(&[0], None).unwrap();
    assert_eq!(labels, vec![1]);
    assert_eq!(plain.data(), img.data());
    let (flipped, _) = ds.batch(&[0], Some(&[true])).unwrap();
    assert_eq!(&flipped.data()[..3], &[2.0 / 20.0, 1.0 / 20.0, 0.0]);
    assert_eq!(flipped.shape(), &[1, 3, 2, 3]);
    assert!(ds.batch(&[], None).is_err());
}

#[test]
fn samples_are_validated() {
    let ok = Tensor::full(&[3, 4, 4], 0.5);
    assert!(Sample::new(Tensor::full(&[1, 4, 4], 0.5), 0, None, "t").is_err());
    assert!(Sample::new(ok.clone(), 2, None, "t").is_err());
    assert!(Sample::new(Tensor::full(&[3, 4, 4], 1.5), 0, None, "t").is_err());
    let outside = Region { x0: 2, y0: 0, x1: 5, y1: 2 };
    assert!(Sample::new(ok.clone(), 1, Some(outside), "t").is_err());
    assert!(Sample::new(ok, 1, Some(Region { x0: 0, y0: 0, x1: 2, y1: 2 }), "t").is_ok());
}
