//! Shared fixtures for the benchmarks.

use caila_core::data::{split_compositions, synthesize, Dataset, RenderSpec, SplitCounts};
use caila_core::eval::ScoreMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows x cols` uniform values in [-1, 1).
pub fn random_values(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Score matrix shaped like a closed-world test pass: the first
/// `seen` columns are seen, truth labels are spread over both groups.
pub fn score_matrix(rows: usize, cols: usize, seen: usize, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flags = (0..cols).map(|c| c >= seen).collect();
    let truth = (0..rows).map(|r| if r % 2 == 0 { r % seen } else { seen + r % (cols - seen) }).collect();
    ScoreMatrix::new(values, flags, truth).expect("valid matrix")
}

/// The default 6x6 benchmark dataset, one training image per seen pair.
pub fn small_dataset(image_hw: usize) -> Dataset {
    let spec = RenderSpec::synthetic(6, 6, image_hw, 0.05);
    let ls = split_compositions(&spec.vocab().expect("vocab"), 0.667, 0).expect("split");
    synthesize(&spec, &ls, SplitCounts { train: 1, val: 1, test: 1 }, 0).expect("dataset")
}
