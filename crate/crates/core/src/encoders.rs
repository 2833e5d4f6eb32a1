//! Vision and text transformer encoders.
//!
//! The vision encoder turns one slice into a single feature vector: the
//! slice is cut into non-overlapping square patches, each patch is linearly
//! projected, a learned positional embedding is added, the sequence runs
//! through pre-norm transformer blocks and the result is max-pooled over the
//! patch axis. The text encoder embeds question tokens, adds positions and
//! runs bidirectional blocks, yielding one vector per token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore, ParamVars};
use crate::transformer::{full_mask, TransformerBlock};

/// Wide enough that the quadrant a patch came from survives max-pooling.
const POSITIONAL_INIT_STD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub slice_height: usize,
    pub slice_width: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub d_text: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_question_len: usize,
    pub max_slices: usize,
    /// Add learned positional embeddings to patch embeddings.
    pub vision_positional: bool,
    /// Pixels enter the vision encoder as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            slice_height: 16,
            slice_width: 16,
            patch_size: 8,
            d_vision: 32,
            d_text: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            vocab_size: Vocabulary::synthetic().len(),
            max_question_len: 16,
            max_slices: 12,
            vision_positional: true,
            pixel_mean: 0.15,
            pixel_std: 0.15,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.slice_height.is_multiple_of(self.patch_size)
            || !self.slice_width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "slice {}x{} is not divisible by patch size {}",
                self.slice_height, self.slice_width, self.patch_size
            )));
        }
        for (name, d) in [("d_vision", self.d_vision), ("d_text", self.d_text)] {
            if self.n_heads == 0 || d == 0 || d % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "{name}={d} is not divisible by n_heads={}",
                    self.n_heads
                )));
            }
        }
        if self.vocab_size == 0 || self.max_question_len == 0 || self.max_slices == 0 {
            return Err(Error::Config(
                "vocab_size, max_question_len and max_slices must be positive".into(),
            ));
        }
        if !(self.pixel_std.is_finite() && self.pixel_std > 0.0 && self.pixel_mean.is_finite()) {
            return Err(Error::Config(format!(
                "pixel normalisation needs a finite mean and a positive std, got {} and {}",
                self.pixel_mean, self.pixel_std
            )));
        }
        Ok(())
    }

    pub fn patches_per_slice(&self) -> usize {
        (self.slice_height / self.patch_size) * (self.slice_width / self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Patches of one slice, one flattened patch per row, in row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence(pub Tensor2);

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Splits an `H × W` slice into non-overlapping `patch × patch` tiles.
pub fn split_into_patches(slice: &Tensor2, patch_size: usize) -> Result<PatchSequence> {
    let (h, w) = slice.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(
            "split_into_patches",
            format!("{h}x{w} slice is not divisible by patch size {patch_size}"),
        ));
    }
    let (ph, pw) = (h / patch_size, w / patch_size);
    let mut out = Tensor2::zeros(ph * pw, patch_size * patch_size);
    for pr in 0..ph {
        for pc in 0..pw {
            let dst = out.row_mut(pr * pw + pc);
            for r in 0..patch_size {
                let src = &slice.row(pr * patch_size + r)[pc * patch_size..(pc + 1) * patch_size];
                dst[r * patch_size..(r + 1) * patch_size].copy_from_slice(src);
            }
        }
    }
    Ok(PatchSequence(out))
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub positional: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    patches: usize,
    patch_len: usize,
}

/// `(x - mean) / std` elementwise.
pub fn normalize_pixels(slice: &Tensor2, mean: f64, std: f64) -> Tensor2 {
    let data = slice.data().iter().map(|&x| (x - mean) / std).collect();
    Tensor2::from_vec(slice.rows(), slice.cols(), data).expect("same shape")
}

impl VisionEncoder {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &EncoderConfig) -> Self {
        let patches = cfg.patches_per_slice();
        let patch_len = cfg.patch_len();
        Self {
            patch_proj: b.linear("patch_proj", patch_len, cfg.d_vision),
            patch_bias: b.zeros("patch_bias", 1, cfg.d_vision),
            positional: cfg
                .vision_positional
                .then(|| b.normal("positional", patches, cfg.d_vision, POSITIONAL_INIT_STD)),
            blocks: (0..cfg.n_layers)
                .map(|l| b.scoped(&format!("block{l}"), |b| {
                    TransformerBlock::build(b, cfg.d_vision, cfg.n_heads, cfg.d_ff)
                }))
                .collect(),
            patches,
            patch_len,
        }
    }

    /// Encodes one slice into a `1 × d_vision` feature row.
    pub fn encode_slice(&self, tape: &mut Tape, p: &ParamVars, patches: &PatchSequence) -> Result<Var> {
        let x = &patches.0;
        if x.shape() != (self.patches, self.patch_len) {
            return Err(Error::shape(
                "encode_slice",
                format!(
                    "expected {}x{} patches, got {}x{}",
                    self.patches,
                    self.patch_len,
                    x.rows(),
                    x.cols()
                ),
            ));
        }
        let input = tape.leaf(x.clone());
        let h = tape.matmul(input, p.get(self.patch_proj))?;
        let mut h = tape.add_row(h, p.get(self.patch_bias))?;
        if let Some(pos) = self.positional {
            h = tape.add(h, p.get(pos))?;
        }
        let mask = full_mask(self.patches);
        for block in &self.blocks {
            h = block.forward(tape, p, h, &mask)?;
        }
        // features × patches, pooled over the patch axis
        let by_feature = tape.transpose(h);
        let pooled = tape.column_max_pool(by_feature)?;
        Ok(tape.transpose(pooled))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    vocab_size: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &EncoderConfig) -> Self {
        Self {
            embedding: b.normal("embedding", cfg.vocab_size, cfg.d_text, 1.0),
            positional: b.normal("positional", cfg.max_question_len, cfg.d_text, 0.1),
            blocks: (0..cfg.n_layers)
                .map(|l| b.scoped(&format!("block{l}"), |b| {
                    TransformerBlock::build(b, cfg.d_text, cfg.n_heads, cfg.d_ff)
                }))
                .collect(),
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_question_len,
        }
    }

    /// Encodes `M` question tokens into an `M × d_text` matrix.
    pub fn encode_question(&self, tape: &mut Tape, p: &ParamVars, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("question has no tokens".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                limit: self.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.vocab_size,
            });
        }
        let emb = tape.gather_rows(p.get(self.embedding), tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(p.get(self.positional), &positions)?;
        let mut h = tape.add(emb, pos)?;
        let mask = full_mask(tokens.len());
        for block in &self.blocks {
            h = block.forward(tape, p, h, &mask)?;
        }
        Ok(h)
    }
}

/// Both encoders with their own parameter store, for standalone use.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

impl Encoders {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(store, rng);
        let vision = b.scoped("vision", |b| VisionEncoder::build(b, cfg));
        let text = b.scoped("text", |b| TextEncoder::build(b, cfg));
        Ok(Self { vision, text })
    }
}
