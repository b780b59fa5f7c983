//! Criterion benchmarks for the core algorithms, plus the seeded inputs they share.

use irda_core::supervised::LabeledSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two labelled Gaussian-ish blobs in `dim` dimensions.
pub fn blobs(n: usize, dim: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledSet::default();
    for i in 0..n {
        let label = (i % 2) as u8;
        let centre = if label == 1 { 2.0 } else { -2.0 };
        set.inputs.push((0..dim).map(|_| centre + rng.random_range(-1.0..1.0)).collect());
        set.labels.push(label);
    }
    set
}

/// Paired scores in [0, 1] with a small positive shift on the first member.
pub fn paired_scores(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let b: f64 = rng.random_range(0.3..0.8);
            ((b + rng.random_range(-0.05..0.2)).min(1.0), b)
        })
        .collect()
}
