//! Shared input builders for the kernel benchmarks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use lsmvos_core::dataio::weights;
use lsmvos_core::encoder::{branch, encode, pad_to_multiple, FeatureMap, MatchFeatures};
use lsmvos_core::matching::GateMask;
use lsmvos_core::numerics::l2_normalize_channels;
use lsmvos_core::pipeline::ModelParams;
use lsmvos_core::synthetic;
use lsmvos_core::Tensor;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn unit_features(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    let t = random_tensor(seed, &[c, h, w]);
    FeatureMap::new(l2_normalize_channels(&t, 1e-8).expect("normalize"), 8).expect("rank")
}

pub fn soft_gate(seed: u64, h: usize, w: usize) -> GateMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| rng.random_range(0.0f32..=1.0)).collect();
    GateMask::new(Tensor::new(&[1, h, w], data).expect("shape")).expect("range")
}

pub fn seeded_model(seed: u64) -> ModelParams {
    ModelParams::from_container(&weights::seeded_init(seed).expect("weights")).expect("model")
}

/// Matching features of two consecutive procedural frames.
pub fn clip_features(width: usize, height: usize, seed: u64) -> (MatchFeatures, MatchFeatures) {
    let model = seeded_model(seed);
    let clip = synthetic::clip(width, height, 2, 1, seed).expect("clip");
    let mut feats = clip.frames.iter().map(|f| {
        let (padded, _) = pad_to_multiple(f).expect("pad");
        branch(&encode(&padded, &model.encoder).expect("encode"), &model.branch).expect("branch")
    });
    let f0 = feats.next().expect("frame 0");
    let f1 = feats.next().expect("frame 1");
    (f0, f1)
}
