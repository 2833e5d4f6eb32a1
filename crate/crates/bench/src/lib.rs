//! Shared fixtures for the kernel benchmarks in `benches/`.

use ctvqa::data::synth::{generate_questions, generate_volume, volume_rng};
use ctvqa::{ModelConfig, Split, SynthConfig, Tensor2, Volume, Vocabulary, VqaModel};

/// Deterministic dense matrix without pulling in an RNG.
pub fn wavy(rows: usize, cols: usize, phase: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.37 + phase).sin()).collect();
    Tensor2::from_vec(rows, cols, data).expect("length matches shape")
}

/// One default-sized model with a synthetic volume and its first question.
pub struct ItemFixture {
    pub model: VqaModel,
    pub volume: Volume,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

pub fn item_fixture(config: ModelConfig) -> ItemFixture {
    let cfg = SynthConfig::default();
    let mut rng = volume_rng(0, Split::Train, 0);
    let volume = generate_volume("bench", &mut rng, &cfg);
    let item = generate_questions(&volume).expect("facts are complete").remove(0);
    let vocab = Vocabulary::synthetic();
    ItemFixture {
        model: VqaModel::new(config, 0).expect("default config is valid"),
        question: vocab.encode(&item.question).expect("template words"),
        answer: vocab.encode(&item.answer).expect("template words"),
        volume,
    }
}
