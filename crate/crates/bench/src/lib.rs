//! Shared fixtures for the criterion benchmarks.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zigzag_core::{AttnInput, CachePolicy, HeadKind, Model, ModelConfig, StreamingConfig};

pub fn bench_model() -> Model {
    Model::new(ModelConfig { layers: 4, heads: 4, d_model: 32, vocab: 64, seed: 7 })
        .expect("valid config")
}

pub fn bench_streaming_config() -> StreamingConfig {
    StreamingConfig::new(16, 48).expect("valid config")
}

pub fn random_tokens(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn random_attn_input(seed: u64, t: usize, d: usize) -> AttnInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    let k = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    AttnInput::new(q, k, v).expect("finite input")
}

/// The three policies the decode benchmarks compare, at 50% sparsity.
pub fn bench_policies(layers: usize, heads: usize) -> Vec<(&'static str, CachePolicy)> {
    let cfg = bench_streaming_config();
    let labels = Array2::from_shape_fn((layers, heads), |(_, j)| {
        if j % 2 == 0 {
            HeadKind::Retrieval
        } else {
            HeadKind::Streaming
        }
    });
    let streaming_layers: Vec<usize> = (0..layers).filter(|l| l % 2 == 1).collect();
    vec![
        ("full", CachePolicy::full(layers)),
        ("duo", CachePolicy::duo(&labels, cfg)),
        (
            "zigzag",
            CachePolicy::zigzag(layers, &streaming_layers, cfg).expect("valid layers"),
        ),
    ]
}
