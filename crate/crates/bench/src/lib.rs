//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sshface::tensornet::Tensor;
use sshface::BBox;

/// `n` random boxes with sides in `[4, 64)` inside a 512×512 frame, plus scores.
pub fn random_boxes(n: usize, seed: u64) -> (Vec<BBox>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0f32..448.0);
            let y = rng.random_range(0.0f32..448.0);
            let w = rng.random_range(4.0f32..64.0);
            let h = rng.random_range(4.0f32..64.0);
            BBox::new(x, y, x + w, y + h).expect("positive size")
        })
        .collect();
    let scores = (0..n).map(|_| rng.random::<f32>()).collect();
    (boxes, scores)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape matches")
}
