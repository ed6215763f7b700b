//! Seeded fixtures shared by the kernel benchmarks.

use celora::partition::synth_blobs;
use celora::similarity_data::{fit_gmm_set, EmOptions, GmmSet};
use celora::training::{Featurizer, LocalModel};
use ndarray::Array2;

/// A single-head model plus featurized blob data.
pub fn model_and_batch(d: usize, classes: usize, rank: usize, n: usize, seed: u64) -> (LocalModel, Array2<f64>, Vec<usize>) {
    let ds = synth_blobs(classes, n, 16, 3.0, 1.0, seed).expect("valid blob parameters");
    let f = Featurizer::new(16, d, seed);
    let x = f.apply(ds.features.view()).expect("matching width");
    let model = LocalModel::new(f, 0, classes, rank, seed).expect("valid rank");
    (model, x, ds.labels)
}

/// Mixture summaries for `clients` random shards of one blob dataset.
pub fn gmm_sets(clients: usize, classes: usize, per_client: usize, seed: u64) -> Vec<GmmSet> {
    (0..clients)
        .map(|i| {
            let (_, x, y) = model_and_batch(8, classes, 2, per_client, seed + i as u64);
            fit_gmm_set(x.view(), &y, 3, seed, EmOptions::default()).expect("fit succeeds")
        })
        .collect()
}
