#![allow(dead_code)]

use hff_core::config::{parse_arch, TrainConfig};
use hff_core::data::{gaussian_blobs, LabeledDataset};
use hff_core::train::prepare_splits;

/// Small fast config over `arch`, reproducible and without wall-clock noise.
pub fn toy_config(arch: &str, epochs: usize) -> TrainConfig {
    TrainConfig {
        arch: parse_arch(arch).unwrap(),
        epochs,
        batch_size: 16,
        lr: 1e-2,
        record_seconds: false,
        ..TrainConfig::default()
    }
}

/// Standardized `(train, val, test)` blobs.
pub fn blobs(
    cfg: &TrainConfig,
    per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let full = gaussian_blobs(per_class, classes, dim, spread, 7);
    let test = gaussian_blobs(per_class / 2 + 1, classes, dim, spread, 8);
    prepare_splits(cfg, full, test).unwrap()
}

/// Two separable Gaussians in the plane, 200 points.
pub fn two_gaussians(cfg: &TrainConfig) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    blobs(cfg, 100, 2, 2, 0.1)
}

/// `ds` with labels replaced by seeded noise, so no classifier beats chance
/// in expectation.
pub fn shuffled_labels(mut ds: LabeledDataset, seed: u64) -> LabeledDataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = ds.class_count;
    ds.labels.iter_mut().for_each(|y| *y = rng.random_range(0..c));
    ds
}

/// Accuracy is within `k` binomial standard deviations of `1 / classes`.
pub fn near_chance(acc: f64, n: usize, classes: usize, k: f64) -> bool {
    let p = 1.0 / classes as f64;
    (acc - p).abs() <= k * (p * (1.0 - p) / n as f64).sqrt()
}
