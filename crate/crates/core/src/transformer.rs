//! Pre-norm transformer block used by both encoders and the decoder.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{SoftmaxNorm, Tape, Tensor2, Var};
use crate::params::{ParamBuilder, ParamId, ParamVars};

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `d_head × d_model`; head outputs are projected and summed.
    pub output: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub heads: Vec<AttentionHead>,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
    d_head: usize,
}

impl TransformerBlock {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        let d_head = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                b.scoped(&format!("head{h}"), |b| AttentionHead {
                    query: b.linear("query", d_model, d_head),
                    key: b.linear("key", d_model, d_head),
                    value: b.linear("value", d_model, d_head),
                    output: b.linear("output", d_head, d_model),
                })
            })
            .collect();
        Self {
            norm1_gain: b.ones("norm1.gain", 1, d_model),
            norm1_bias: b.zeros("norm1.bias", 1, d_model),
            heads,
            norm2_gain: b.ones("norm2.gain", 1, d_model),
            norm2_bias: b.zeros("norm2.bias", 1, d_model),
            ff_in: b.linear("ff.in", d_model, d_ff),
            ff_in_bias: b.zeros("ff.in_bias", 1, d_ff),
            ff_out: b.linear("ff.out", d_ff, d_model),
            ff_out_bias: b.zeros("ff.out_bias", 1, d_model),
            d_head,
        }
    }

    /// Parameters whose zeroing turns the block into the identity map.
    pub fn residual_branch_outputs(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.heads.iter().map(|h| h.output).collect();
        ids.push(self.ff_out);
        ids.push(self.ff_out_bias);
        ids
    }

    /// `x + attn(norm(x))` followed by `x + ff(norm(x))`. `mask` selects
    /// which positions each row may attend to.
    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, x: Var, mask: &Arc<Tensor2>) -> Result<Var> {
        let h = tape.layer_norm(x, p.get(self.norm1_gain), p.get(self.norm1_bias))?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut attended: Option<Var> = None;
        for head in &self.heads {
            let q = tape.matmul(h, p.get(head.query))?;
            let k = tape.matmul(h, p.get(head.key))?;
            let v = tape.matmul(h, p.get(head.value))?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_row_softmax(scores, Arc::clone(mask), SoftmaxNorm::Masked)?;
            let mixed = tape.matmul(weights, v)?;
            let projected = tape.matmul(mixed, p.get(head.output))?;
            attended = Some(match attended {
                None => projected,
                Some(acc) => tape.add(acc, projected)?,
            });
        }
        let x = match attended {
            Some(a) => tape.add(x, a)?,
            None => x,
        };

        let h = tape.layer_norm(x, p.get(self.norm2_gain), p.get(self.norm2_bias))?;
        let h = tape.matmul(h, p.get(self.ff_in))?;
        let h = tape.add_row(h, p.get(self.ff_in_bias))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, p.get(self.ff_out))?;
        let h = tape.add_row(h, p.get(self.ff_out_bias))?;
        tape.add(x, h)
    }
}

/// Mask letting every position attend to every position.
pub fn full_mask(n: usize) -> Arc<Tensor2> {
    Arc::new(Tensor2::filled(n, n, 1.0))
}

/// Lower-triangular mask including the diagonal.
pub fn causal_mask(n: usize) -> Arc<Tensor2> {
    let mut m = Tensor2::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            m.set(r, c, 1.0);
        }
    }
    Arc::new(m)
}
