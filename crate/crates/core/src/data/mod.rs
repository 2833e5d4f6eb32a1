//! Synthetic CT-VQA corpus: generation, vocabulary and file formats.

pub mod io;
pub mod synth;
pub mod vocab;

pub use io::{
    generate_dataset, load_dataset, read_manifest, read_volume, write_dataset, write_volume, Dataset,
    DatasetManifest, SplitData, SplitManifest,
};
pub use synth::{
    answer_text, generate_questions, generate_volume, QaItem, QuestionType, Split, SynthConfig, Volume,
    VolumeFacts,
};
pub use vocab::Vocabulary;
