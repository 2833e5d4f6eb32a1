//! Cross-modal feature-graph visual question answering over synthetic CT
//! volumes, built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod train;
pub mod transformer;

pub use config::RunConfig;
pub use data::{Dataset, QaItem, QuestionType, Split, SynthConfig, Volume, VolumeFacts, Vocabulary};
pub use decoder::{DecoderConfig, PromptMode, PromptOrder};
pub use encoders::EncoderConfig;
pub use error::{Error, Result};
pub use eval::{Evaluation, Prediction};
pub use graph::{AttentionNorm, AttentionTrace, GraphConfig, GraphVariant};
pub use metrics::{MetricReport, Scores};
pub use model::{ModelConfig, VqaModel};
pub use numerics::{Tape, Tensor2, Var};
pub use params::{ParamId, ParamStore};
pub use train::{TrainConfig, TrainReport};
