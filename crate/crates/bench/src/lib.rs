//! Deterministic inputs shared by the benchmarks.

use popgrad_core::sampling::gaussian_vector;
use popgrad_core::{RngSeed, WeightSet};

/// `k` Gaussian weight vectors in `R^d`.
pub fn weight_set(seed: u64, k: usize, d: usize) -> WeightSet {
    let mut rng = RngSeed::new(seed).rng();
    WeightSet::new((0..k).map(|_| gaussian_vector(&mut rng, d)).collect())
        .expect("gaussian draws are away from the origin")
}
