//! Soft-prompt projection and the small causal decoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{ParamBuilder, ParamId, ParamVars};
use crate::transformer::{causal_mask, TransformerBlock};

/// Which graph nodes are fed to the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Both,
    VisionOnly,
    TextOnly,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Both, PromptMode::VisionOnly, PromptMode::TextOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Both => "both",
            PromptMode::VisionOnly => "vision_only",
            PromptMode::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode '{s}' (expected both, vision_only or text_only)")))
    }
}

/// Whether the graph prompt precedes the question embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    #[default]
    GraphFirst,
    QuestionFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_limit: usize,
    pub prompt_mode: PromptMode,
    pub prompt_order: PromptOrder,
    /// Reuse the transposed embedding table as the output head.
    pub tie_head: bool,
    pub max_answer_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_layers: 3,
            n_heads: 4,
            d_ff: 256,
            context_limit: 256,
            prompt_mode: PromptMode::Both,
            prompt_order: PromptOrder::GraphFirst,
            tie_head: false,
            max_answer_len: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("decoder.d_model", self.d_model),
            ("decoder.n_heads", self.n_heads),
            ("decoder.d_ff", self.d_ff),
            ("decoder.context_limit", self.context_limit),
            ("decoder.max_answer_len", self.max_answer_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "decoder.d_model {} is not divisible by decoder.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Affine map from graph width to decoder width, applied per node.
#[derive(Clone, Debug)]
pub struct PromptProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PromptProjection {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, d_graph: usize, d_model: usize) -> Self {
        Self {
            weight: b.linear("weight", d_graph, d_model),
            bias: b.zeros("bias", 1, d_model),
        }
    }
}

/// One output row per node, in node order.
pub fn project_prompt(tape: &mut Tape, p: &ParamVars, proj: &PromptProjection, h: Var) -> Result<Var> {
    let o = tape.matmul(h, p.get(proj.weight))?;
    tape.add_row(o, p.get(proj.bias))
}

/// Builds the decoder prefix from the projected nodes `o` (slices first)
/// and the question embeddings.
pub fn assemble_prompt(
    tape: &mut Tape,
    o: Var,
    n_slices: usize,
    question: Var,
    mode: PromptMode,
    order: PromptOrder,
) -> Result<Var> {
    let nodes = tape.value(o).rows();
    if n_slices > nodes {
        return Err(Error::shape(
            "assemble_prompt",
            format!("{n_slices} slices but only {nodes} prompt rows"),
        ));
    }
    let graph = match mode {
        PromptMode::Both => o,
        PromptMode::VisionOnly => tape.slice_rows(o, 0, n_slices)?,
        PromptMode::TextOnly => tape.slice_rows(o, n_slices, nodes - n_slices)?,
    };
    match order {
        PromptOrder::GraphFirst => tape.concat_rows(&[graph, question]),
        PromptOrder::QuestionFirst => tape.concat_rows(&[question, graph]),
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    /// `None` when the head is tied to the embedding table.
    pub head: Option<ParamId>,
    pub context_limit: usize,
}

impl Decoder {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &DecoderConfig, vocab_size: usize) -> Self {
        let d = cfg.d_model;
        let embedding = b.normal("embedding", vocab_size, d, 1.0);
        let positional = b.normal("positional", cfg.context_limit, d, 0.1);
        let blocks = (0..cfg.n_layers)
            .map(|l| b.scoped(&format!("block{l}"), |b| TransformerBlock::build(b, d, cfg.n_heads, cfg.d_ff)))
            .collect();
        let head = (!cfg.tie_head).then(|| b.linear("head", d, vocab_size));
        Self {
            embedding,
            positional,
            blocks,
            final_gain: b.ones("final_norm.gain", 1, d),
            final_bias: b.zeros("final_norm.bias", 1, d),
            head,
            context_limit: cfg.context_limit,
        }
    }

    /// Rows of the embedding table for `ids`.
    pub fn embed(&self, tape: &mut Tape, p: &ParamVars, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(p.get(self.embedding), ids)
    }

    /// Runs `[prefix ‖ BOS ‖ answer]` through the causal stack and returns
    /// `answer.len() + 1` logit rows, the first taken at BOS.
    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, prefix: Var, answer: &[usize]) -> Result<Var> {
        let prefix_len = tape.value(prefix).rows();
        let total = prefix_len + 1 + answer.len();
        if total > self.context_limit {
            return Err(Error::Length {
                len: total,
                limit: self.context_limit,
            });
        }
        let mut ids = Vec::with_capacity(answer.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(answer);
        let tokens = self.embed(tape, p, &ids)?;
        let x = tape.concat_rows(&[prefix, tokens])?;
        let positions: Vec<usize> = (0..total).collect();
        let pos = tape.gather_rows(p.get(self.positional), &positions)?;
        let mut x = tape.add(x, pos)?;
        let mask = causal_mask(total);
        for block in &self.blocks {
            x = block.forward(tape, p, x, &mask)?;
        }
        let x = tape.slice_rows(x, prefix_len, answer.len() + 1)?;
        self.head(tape, p, x)
    }

    /// Final layer norm followed by the vocabulary projection.
    pub fn head(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let x = tape.layer_norm(x, p.get(self.final_gain), p.get(self.final_bias))?;
        let head = match self.head {
            Some(h) => p.get(h),
            None => tape.transpose(p.get(self.embedding)),
        };
        tape.matmul(x, head)
    }
}

/// Mean next-token cross-entropy; PAD targets are skipped.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, gold: &[usize]) -> Result<Var> {
    let vocab = tape.value(logits).cols();
    if let Some(&bad) = gold.iter().find(|&&g| g >= vocab) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab_size: vocab,
        });
    }
    let targets: Vec<Option<usize>> = gold.iter().map(|&g| (g != PAD).then_some(g)).collect();
    tape.cross_entropy(logits, &targets)
}

/// Gold targets for teacher forcing: the answer followed by EOS.
pub fn teacher_targets(answer: &[usize]) -> Vec<usize> {
    let mut t = answer.to_vec();
    t.push(EOS);
    t
}

/// Greedy output plus the logits seen at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated tokens, without the terminating EOS.
    pub tokens: Vec<usize>,
    pub step_logits: Vec<Vec<f64>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Appends the argmax of `next_logits(generated)` until EOS or `max_len`
/// tokens.
pub fn greedy_decode<F>(max_len: usize, mut next_logits: F) -> Result<Decoded>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut out = Decoded {
        tokens: Vec::new(),
        step_logits: Vec::new(),
    };
    while out.tokens.len() < max_len {
        let logits = next_logits(&out.tokens)?;
        if logits.is_empty() {
            return Err(Error::Input("decoder produced no logits".into()));
        }
        let next = argmax(&logits);
        out.step_logits.push(logits);
        if next == EOS {
            break;
        }
        out.tokens.push(next);
    }
    Ok(out)
}

/// Softmax of one logit row.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor2;
    use crate::params::ParamStore;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            context_limit: 32,
            ..DecoderConfig::default()
        }
    }

    fn build(cfg: &DecoderConfig, vocab: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let d = Decoder::build(&mut b, cfg, vocab);
        (store, d)
    }

    #[test]
    fn projection_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::from_rows(&[&[1.0], &[1.0]]));
        let bias = store.add("b", Tensor2::row_vector(&[0.5]));
        let mut tape = Tape::new();
        let p = store.register(&mut tape);
        let h = tape.leaf(Tensor2::row_vector(&[1.0, 2.0]));
        let proj = PromptProjection { weight: w, bias };
        let o = project_prompt(&mut tape, &p, &proj, h).unwrap();
        assert_eq!(tape.value(o).data(), &[3.5]);
    }

    #[test]
    fn identity_and_bias_only_projection() {
        let h = Tensor2::from_rows(&[&[1.0, -2.0], &[3.0, 0.5], &[0.0, 4.0]]);
        for (w, b) in [
            (Tensor2::identity(2), Tensor2::zeros(1, 2)),
            (Tensor2::zeros(2, 2), Tensor2::row_vector(&[0.25, -1.0])),
        ] {
            let mut store = ParamStore::new();
            let proj = PromptProjection {
                weight: store.add("w", w.clone()),
                bias: store.add("b", b.clone()),
            };
            let mut tape = Tape::new();
            let p = store.register(&mut tape);
            let hv = tape.leaf(h.clone());
            let o = project_prompt(&mut tape, &p, &proj, hv).unwrap();
            let o = tape.value(o);
            for r in 0..3 {
                let expected: Vec<f64> = if w.get(0, 0) == 1.0 { h.row(r).to_vec() } else { b.row(0).to_vec() };
                assert_eq!(o.row(r), expected.as_slice());
            }
        }
    }

    #[test]
    fn prompt_layouts() {
        let mut tape = Tape::new();
        // N=2 slices, M=3 tokens; row r is filled with r
        let o = tape.leaf(Tensor2::from_vec(5, 2, (0..5).flat_map(|r| [r as f64; 2]).collect()).unwrap());
        let q = tape.leaf(Tensor2::filled(3, 2, 9.0));
        let both = assemble_prompt(&mut tape, o, 2, q, PromptMode::Both, PromptOrder::GraphFirst).unwrap();
        let vision = assemble_prompt(&mut tape, o, 2, q, PromptMode::VisionOnly, PromptOrder::GraphFirst).unwrap();
        let text = assemble_prompt(&mut tape, o, 2, q, PromptMode::TextOnly, PromptOrder::GraphFirst).unwrap();
        assert_eq!(tape.value(both).rows(), 8);
        assert_eq!(tape.value(vision).rows(), 5);
        assert_eq!(tape.value(text).rows(), 6);
        let both_v = tape.value(both).clone();
        let text_v = tape.value(text);
        for r in 0..6 {
            assert_eq!(text_v.row(r), both_v.row(r + 2));
        }
        let swapped = assemble_prompt(&mut tape, o, 2, q, PromptMode::Both, PromptOrder::QuestionFirst).unwrap();
        assert_eq!(tape.value(swapped).row(0), &[9.0, 9.0]);
        assert_eq!(tape.value(swapped).row(3), &[0.0, 0.0]);
    }

    #[test]
    fn prompt_mode_parsing() {
        assert_eq!("vision_only".parse::<PromptMode>().unwrap(), PromptMode::VisionOnly);
        assert!(matches!("images".parse::<PromptMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_answer_gives_one_row() {
        let cfg = small_cfg();
        let (store, dec) = build(&cfg, 10);
        let mut tape = Tape::new();
        let p = store.register(&mut tape);
        let prefix = tape.leaf(Tensor2::filled(3, 8, 0.1));
        let logits = dec.forward(&mut tape, &p, prefix, &[]).unwrap();
        assert_eq!(tape.value(logits).shape(), (1, 10));
        let logits = dec.forward(&mut tape, &p, prefix, &[5, 6]).unwrap();
        assert_eq!(tape.value(logits).shape(), (3, 10));
    }

    #[test]
    fn context_overflow_is_a_length_error() {
        let cfg = small_cfg();
        let (store, dec) = build(&cfg, 10);
        let mut tape = Tape::new();
        let p = store.register(&mut tape);
        let prefix = tape.leaf(Tensor2::zeros(30, 8));
        assert!(dec.forward(&mut tape, &p, prefix, &[4]).is_ok());
        let err = dec.forward(&mut tape, &p, prefix, &[4, 5]).unwrap_err();
        assert!(matches!(err, Error::Length { len: 33, limit: 32 }));
    }

    #[test]
    fn earlier_logits_ignore_later_tokens() {
        let cfg = small_cfg();
        let (store, dec) = build(&cfg, 10);
        let mut tape = Tape::new();
        let p = store.register(&mut tape);
        let prefix = tape.leaf(Tensor2::random_normal(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let a = dec.forward(&mut tape, &p, prefix, &[4, 5, 6]).unwrap();
        let b = dec.forward(&mut tape, &p, prefix, &[4, 9, 7]).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn zeroed_blocks_reduce_to_head_of_inputs() {
        let cfg = small_cfg();
        let (mut store, dec) = build(&cfg, 10);
        for block in &dec.blocks {
            for id in block.residual_branch_outputs() {
                let t = store.get_mut(id);
                *t = Tensor2::zeros(t.rows(), t.cols());
            }
        }
        let mut tape = Tape::new();
        let p = store.register(&mut tape);
        let prefix_value = Tensor2::random_normal(2, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let prefix = tape.leaf(prefix_value);
        let logits = dec.forward(&mut tape, &p, prefix, &[7]).unwrap();
        let got = tape.value(logits).clone();

        let emb = store.get(dec.embedding);
        let pos = store.get(dec.positional);
        let mut inputs = Tensor2::zeros(2, 8);
        for (r, id) in [BOS, 7].into_iter().enumerate() {
            for c in 0..8 {
                inputs.set(r, c, emb.get(id, c) + pos.get(2 + r, c));
            }
        }
        let mut t2 = Tape::new();
        let p2 = store.register(&mut t2);
        let x = t2.leaf(inputs);
        let expected = dec.head(&mut t2, &p2, x).unwrap();
        assert_eq!(&got, t2.value(expected));
    }

    #[test]
    fn tied_head_has_no_separate_matrix() {
        let cfg = DecoderConfig {
            tie_head: true,
            ..small_cfg()
        };
        let (store, dec) = build(&cfg, 10);
        assert!(dec.head.is_none());
        assert!(store.find("head").is_none());
        let mut tape = Tape::new();
        let p = store.register(&mut tape);
        let prefix = tape.leaf(Tensor2::zeros(1, 8));
        let logits = dec.forward(&mut tape, &p, prefix, &[4]).unwrap();
        assert_eq!(tape.value(logits).shape(), (2, 10));
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor2::zeros(1, 4));
        let l = cross_entropy_loss(&mut tape, uniform, &[2]).unwrap();
        assert!((tape.value(l).scalar() - 4f64.ln()).abs() < 1e-12);

        let mut confident = Tensor2::zeros(1, 4);
        confident.set(0, 1, 20.0);
        let c = tape.leaf(confident);
        let l = cross_entropy_loss(&mut tape, c, &[1]).unwrap();
        assert!(tape.value(l).scalar() < 1e-3);

        // two positions: ln 2 and ln 8 average to ln 4
        let mut row0 = vec![-1e9; 8];
        row0[0] = 0.0;
        row0[1] = 0.0;
        let row1 = vec![0.0; 8];
        let two = Tensor2::from_rows(&[&row0, &row1]);
        let t = tape.leaf(two);
        let l = cross_entropy_loss(&mut tape, t, &[1, 5]).unwrap();
        assert!((tape.value(l).scalar() - 4f64.ln()).abs() < 1e-9);

        let bad = tape.leaf(Tensor2::zeros(1, 4));
        assert!(matches!(
            cross_entropy_loss(&mut tape, bad, &[4]),
            Err(Error::Vocabulary { id: 4, vocab_size: 4 })
        ));
    }

    #[test]
    fn pad_targets_are_ignored() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor2::from_rows(&[&[0.0, 1.0, 2.0, 3.0], &[5.0, 0.0, 0.0, 0.0]]));
        let l = cross_entropy_loss(&mut tape, logits, &[3, PAD]).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(logits).row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn greedy_examples() {
        // EOS first
        let d = greedy_decode(5, |_| Ok(vec![0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert!(d.tokens.is_empty());
        assert_eq!(d.step_logits.len(), 1);

        // "axial EOS"
        let axial = 30;
        let d = greedy_decode(5, |prev| {
            let mut l = vec![0.0; 40];
            l[if prev.is_empty() { axial } else { EOS }] = 1.0;
            Ok(l)
        })
        .unwrap();
        assert_eq!(d.tokens, vec![axial]);

        // tie between 3 and 7 resolves to 3
        let mut tie = vec![0.0; 10];
        tie[3] = 2.0;
        tie[7] = 2.0;
        assert_eq!(argmax(&tie), 3);

        // stops at max_len
        let d = greedy_decode(2, |_| Ok(vec![0.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(d.tokens, vec![4, 4]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = probabilities(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }
}
