#![allow(dead_code)]

use ctvqa::numerics::Tensor2;
use ctvqa::{GraphVariant, ModelConfig, VqaModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small model over 8x8 slices, width 8 everywhere, vocabulary of 12.
pub fn tiny_config(variant: GraphVariant) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.slice_height = 8;
    c.encoder.slice_width = 8;
    c.encoder.patch_size = 4;
    c.encoder.d_vision = 8;
    c.encoder.d_text = 8;
    c.encoder.d_ff = 12;
    c.encoder.vocab_size = 12;
    // test slices are already centred
    c.encoder.pixel_mean = 0.0;
    c.encoder.pixel_std = 1.0;
    c.graph.variant = variant;
    c.graph.d_graph = 8;
    c.decoder.d_model = 8;
    c.decoder.d_ff = 12;
    c.decoder.n_layers = 2;
    c.decoder.n_heads = 2;
    c.decoder.context_limit = 24;
    c
}

pub fn tiny_model(variant: GraphVariant, seed: u64) -> VqaModel {
    VqaModel::new(tiny_config(variant), seed).unwrap()
}

pub fn random_slices(n: usize, seed: u64) -> Vec<Tensor2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor2::random_normal(8, 8, 1.0, &mut rng)).collect()
}
