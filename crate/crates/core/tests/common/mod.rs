use forgenas_core::data::{Dataset, Region, Sample};
use forgenas_core::rng;
use forgenas_core::tensor::Tensor;

/// Balanced `size x size` dataset: reals are uniform noise, fakes get a
/// bright square in the top-left quadrant.
#[allow(dead_code)]
pub fn toy_dataset(seed: u64, n: usize, size: usize) -> Dataset {
    let mut r = rng::seeded(seed, 0);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let mut img = Tensor::from_fn(&[3, size, size], |_| rng::uniform_range(&mut r, 0.0, 0.6));
            let side = (size / 2).max(1);
            let region = (label == 1).then_some(Region { x0: 0, y0: 0, x1: side, y1: side });
            if label == 1 {
                for c in 0..3 {
                    for y in 0..side {
                        for x in 0..side {
                            img.data_mut()[(c * size + y) * size + x] = 0.95;
                        }
                    }
                }
            }
            Sample::new(img, label, region, "toy").unwrap()
        })
        .collect();
    Dataset::new(samples).unwrap()
}
