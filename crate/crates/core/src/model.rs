//! The end-to-end pipeline: encoders, cross-modal graph, soft prompt and
//! decoder sharing one parameter store.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::Volume;
use crate::data::vocab::Vocabulary;
use crate::decoder::{
    assemble_prompt, cross_entropy_loss, greedy_decode, project_prompt, teacher_targets, Decoded, Decoder,
    DecoderConfig, PromptProjection,
};
use crate::encoders::{normalize_pixels, split_into_patches, EncoderConfig, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::graph::{
    assemble_nodes, build_adjacency, AttentionTrace, GraphConfig, GraphEncoder, GraphVariant, NodeProjection,
};
use crate::numerics::{Tape, Tensor2, Var};
use crate::params::{ParamBuilder, ParamStore, ParamVars};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub graph: GraphConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.graph.validate()?;
        self.decoder.validate()
    }
}

/// Decoder prefix for one item together with the graph attention.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub prompt: Var,
    pub attention: Vec<Var>,
    pub n_slices: usize,
    pub n_tokens: usize,
}

/// A decoded answer and what went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub text: String,
    pub decoded: Decoded,
    /// Question words that were replaced by UNK, each listed once.
    pub unknown_words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub nodes: NodeProjection,
    pub graph: GraphEncoder,
    pub prompt: PromptProjection,
    pub decoder: Decoder,
}

impl VqaModel {
    /// Freshly initialised model; `seed` fixes every initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder;
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let vision = b.scoped("vision", |b| VisionEncoder::build(b, enc));
        let text = b.scoped("text", |b| TextEncoder::build(b, enc));
        let d_graph = config.graph.d_graph;
        let nodes = b.scoped("nodes", |b| NodeProjection::build(b, enc.d_vision, enc.d_text, d_graph));
        let graph = b.scoped("graph", |b| GraphEncoder::build(b, &config.graph));
        let prompt = b.scoped("prompt", |b| PromptProjection::build(b, d_graph, config.decoder.d_model));
        let decoder = b.scoped("decoder", |b| Decoder::build(b, &config.decoder, enc.vocab_size));
        Ok(Self {
            config,
            params,
            vision,
            text,
            nodes,
            graph,
            prompt,
            decoder,
        })
    }

    pub fn variant(&self) -> GraphVariant {
        self.config.graph.variant
    }

    /// Encodes each slice into one row vector.
    pub fn encode_slices(&self, tape: &mut Tape, p: &ParamVars, slices: &[Tensor2]) -> Result<Vec<Var>> {
        let enc = &self.config.encoder;
        if slices.is_empty() {
            return Err(Error::Input("volume has no slices".into()));
        }
        if slices.len() > enc.max_slices {
            return Err(Error::Length {
                len: slices.len(),
                limit: enc.max_slices,
            });
        }
        slices
            .iter()
            .map(|s| {
                if s.shape() != (enc.slice_height, enc.slice_width) {
                    return Err(Error::shape(
                        "encode_slices",
                        format!(
                            "slice is {}x{}, model expects {}x{}",
                            s.rows(),
                            s.cols(),
                            enc.slice_height,
                            enc.slice_width
                        ),
                    ));
                }
                let s = normalize_pixels(s, enc.pixel_mean, enc.pixel_std);
                let patches = split_into_patches(&s, enc.patch_size)?;
                let out = self.vision.encode_slice(tape, p, &patches)?;
                Ok(out)
            })
            .collect()
    }

    pub fn encode_volume(&self, tape: &mut Tape, p: &ParamVars, volume: &Volume) -> Result<Vec<Var>> {
        let slices: Vec<Tensor2> = (0..volume.n_slices).map(|n| volume.slice(n)).collect();
        self.encode_slices(tape, p, &slices)
    }

    /// Question tokens and encoded slices to decoder prefix.
    pub fn prefix(&self, tape: &mut Tape, p: &ParamVars, slices: &[Var], question: &[usize]) -> Result<Prefix> {
        let tokens = self.text.encode_question(tape, p, question)?;
        let h = assemble_nodes(tape, p, &self.nodes, slices, tokens)?;
        let (h, attention) = match self.variant() {
            GraphVariant::None => (h, Vec::new()),
            _ => {
                let adjacency = Arc::new(build_adjacency(slices.len(), question.len()));
                self.graph.encode(tape, p, h, &adjacency)?
            }
        };
        let o = project_prompt(tape, p, &self.prompt, h)?;
        let e = self.decoder.embed(tape, p, question)?;
        let dc = &self.config.decoder;
        let prompt = assemble_prompt(tape, o, slices.len(), e, dc.prompt_mode, dc.prompt_order)?;
        Ok(Prefix {
            prompt,
            attention,
            n_slices: slices.len(),
            n_tokens: question.len(),
        })
    }

    /// Teacher-forced loss of one answer.
    pub fn item_loss(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        slices: &[Var],
        question: &[usize],
        answer: &[usize],
    ) -> Result<Var> {
        let prefix = self.prefix(tape, p, slices, question)?;
        let logits = self.decoder.forward(tape, p, prefix.prompt, answer)?;
        cross_entropy_loss(tape, logits, &teacher_targets(answer))
    }

    /// Greedy answer token ids for raw slices and question ids.
    pub fn decode(&self, slices: &[Tensor2], question: &[usize]) -> Result<Decoded> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let encoded = self.encode_slices(&mut tape, &p, slices)?;
        let prefix = self.prefix(&mut tape, &p, &encoded, question)?;
        greedy_decode(self.config.decoder.max_answer_len, |generated| {
            let logits = self.decoder.forward(&mut tape, &p, prefix.prompt, generated)?;
            let v = tape.value(logits);
            Ok(v.row(v.rows() - 1).to_vec())
        })
    }

    pub fn decode_volume(&self, volume: &Volume, question: &[usize]) -> Result<Decoded> {
        let slices: Vec<Tensor2> = (0..volume.n_slices).map(|n| volume.slice(n)).collect();
        self.decode(&slices, question)
    }

    /// Answers a free-text question; unknown words become UNK.
    pub fn answer(&self, volume: &Volume, question: &str) -> Result<Answer> {
        let vocab = Vocabulary::synthetic();
        let enc = vocab.encode_lossy(question);
        if enc.ids.is_empty() {
            return Err(Error::Input("question is empty".into()));
        }
        let decoded = self.decode_volume(volume, &enc.ids)?;
        Ok(Answer {
            text: vocab.decode(&decoded.tokens),
            decoded,
            unknown_words: enc.unknown,
        })
    }

    /// Graph attention for one item.
    pub fn attention_trace(&self, slices: &[Tensor2], question: &[usize]) -> Result<AttentionTrace> {
        if self.variant() == GraphVariant::None {
            return Err(Error::NoTrace(
                "the graph-free baseline feeds projected node features straight to the decoder, so there is no graph attention to export".into(),
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let encoded = self.encode_slices(&mut tape, &p, slices)?;
        let prefix = self.prefix(&mut tape, &p, &encoded, question)?;
        let layers: Vec<Tensor2> = prefix.attention.iter().map(|&w| tape.value(w).clone()).collect();
        AttentionTrace::from_layers(&layers, prefix.n_slices, prefix.n_tokens)
    }

    pub fn volume_attention_trace(&self, volume: &Volume, question: &str) -> Result<AttentionTrace> {
        let ids = Vocabulary::synthetic().encode_lossy(question).ids;
        if ids.is_empty() {
            return Err(Error::Input("question is empty".into()));
        }
        let slices: Vec<Tensor2> = (0..volume.n_slices).map(|n| volume.slice(n)).collect();
        self.attention_trace(&slices, &ids)
    }
}
