//! Cross-modal feature graph over slice and question-token nodes.
//!
//! Nodes `0..N` are slices and `N..N+M` are question tokens. Adjacent slices
//! are linked, every token is linked to every slice, tokens are not linked to
//! each other and every node carries a self-loop. Three encoders run over the
//! graph: the attentive GCN (bilinear neighbour attention), a plain GCN with
//! the raw binary adjacency, and a single-head GAT.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SoftmaxNorm, Tape, Tensor2, Var};
use crate::params::{ParamBuilder, ParamId, ParamVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphVariant {
    Agcn,
    Gcn,
    Gat,
    /// No graph: projected node features go straight to the prompt.
    None,
}

impl GraphVariant {
    pub const ALL: [GraphVariant; 4] = [Self::Agcn, Self::Gcn, Self::Gat, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Agcn => "agcn",
            Self::Gcn => "gcn",
            Self::Gat => "gat",
            Self::None => "none",
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown graph variant '{s}' (expected agcn|gcn|gat|none)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// Softmax over graph neighbours only.
    #[default]
    Masked,
    /// Neighbour-masked numerator over an all-node denominator.
    PaperLiteral,
}

impl AttentionNorm {
    fn softmax_norm(self) -> SoftmaxNorm {
        match self {
            Self::Masked => SoftmaxNorm::Masked,
            Self::PaperLiteral => SoftmaxNorm::Unmasked,
        }
    }
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Self::Masked),
            "paper_literal" => Ok(Self::PaperLiteral),
            _ => Err(Error::Config(format!(
                "unknown attention_norm '{s}' (expected masked|paper_literal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub variant: GraphVariant,
    pub attention_norm: AttentionNorm,
    pub layers: usize,
    pub d_graph: usize,
    /// Applied between graph layers, not after the last one.
    pub activation: Activation,
    pub gat_negative_slope: f64,
    /// Divide agcn logits by `sqrt(d_graph)`; off gives the raw bilinear form.
    pub scaled_logits: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            variant: GraphVariant::Agcn,
            attention_norm: AttentionNorm::Masked,
            layers: 2,
            d_graph: 32,
            activation: Activation::None,
            gat_negative_slope: 0.2,
            scaled_logits: true,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant != GraphVariant::None && self.layers == 0 {
            return Err(Error::Config("graph needs at least one layer".into()));
        }
        if self.d_graph == 0 {
            return Err(Error::Config("d_graph must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum NodeKind {
    Slice(usize),
    Token(usize),
}

pub fn node_kinds(n_slices: usize, n_tokens: usize) -> Vec<NodeKind> {
    (0..n_slices)
        .map(NodeKind::Slice)
        .chain((0..n_tokens).map(NodeKind::Token))
        .collect()
}

/// Binary adjacency over `n_slices + n_tokens` nodes.
pub fn build_adjacency(n_slices: usize, n_tokens: usize) -> Tensor2 {
    let size = n_slices + n_tokens;
    let mut a = Tensor2::zeros(size, size);
    for j in 0..size {
        a.set(j, j, 1.0);
    }
    for n in 1..n_slices {
        a.set(n - 1, n, 1.0);
        a.set(n, n - 1, 1.0);
    }
    for t in n_slices..size {
        for s in 0..n_slices {
            a.set(t, s, 1.0);
            a.set(s, t, 1.0);
        }
    }
    a
}

/// Node features with their adjacency and node labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalGraph {
    pub node_features: Tensor2,
    pub adjacency: Tensor2,
    pub node_kinds: Vec<NodeKind>,
}

impl CrossModalGraph {
    pub fn new(node_features: Tensor2, n_slices: usize, n_tokens: usize) -> Result<Self> {
        if node_features.rows() != n_slices + n_tokens {
            return Err(Error::shape(
                "cross_modal_graph",
                format!(
                    "{} node rows for {n_slices} slices and {n_tokens} tokens",
                    node_features.rows()
                ),
            ));
        }
        Ok(Self {
            node_features,
            adjacency: build_adjacency(n_slices, n_tokens),
            node_kinds: node_kinds(n_slices, n_tokens),
        })
    }

    pub fn n_slices(&self) -> usize {
        self.node_kinds
            .iter()
            .filter(|k| matches!(k, NodeKind::Slice(_)))
            .count()
    }

    pub fn n_tokens(&self) -> usize {
        self.node_kinds.len() - self.n_slices()
    }
}

/// Linear maps from the encoder widths into the shared graph width.
#[derive(Clone, Debug)]
pub struct NodeProjection {
    pub vision: ParamId,
    pub text: ParamId,
}

impl NodeProjection {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, d_vision: usize, d_text: usize, d_graph: usize) -> Self {
        Self {
            vision: b.linear("vision", d_vision, d_graph),
            text: b.linear("text", d_text, d_graph),
        }
    }
}

/// Stacks projected slice features followed by projected token features.
pub fn assemble_nodes(
    tape: &mut Tape,
    p: &ParamVars,
    proj: &NodeProjection,
    slices: &[Var],
    tokens: Var,
) -> Result<Var> {
    if slices.is_empty() {
        return Err(Error::Input("graph needs at least one slice".into()));
    }
    if tape.value(tokens).rows() == 0 {
        return Err(Error::Input("graph needs at least one question token".into()));
    }
    let stacked = tape.concat_rows(slices)?;
    let slice_nodes = tape.matmul(stacked, p.get(proj.vision))?;
    let token_nodes = tape.matmul(tokens, p.get(proj.text))?;
    tape.concat_rows(&[slice_nodes, token_nodes])
}

/// Parameters of one graph layer. Which optional tensors exist depends on
/// the variant the encoder was built for.
#[derive(Clone, Debug)]
pub struct GraphLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    /// Bilinear attention matrix of the attentive GCN.
    pub attention: Option<ParamId>,
    /// GAT scoring vector halves, applied to the source and neighbour rows.
    pub gat_source: Option<ParamId>,
    pub gat_target: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub layers: Vec<GraphLayer>,
    pub config: GraphConfig,
}

impl GraphEncoder {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, config: &GraphConfig) -> Self {
        let d = config.d_graph;
        let count = if config.variant == GraphVariant::None { 0 } else { config.layers };
        let layers = (0..count)
            .map(|l| {
                b.scoped(&format!("layer{l}"), |b| match config.variant {
                    GraphVariant::Agcn => GraphLayer {
                        weight: b.linear("weight", d, d),
                        bias: Some(b.zeros("bias", 1, d)),
                        attention: Some(b.normal("attention", d, d, 0.1 / (d as f64).sqrt())),
                        gat_source: None,
                        gat_target: None,
                    },
                    GraphVariant::Gcn => GraphLayer {
                        weight: b.linear("weight", d, d),
                        bias: Some(b.zeros("bias", 1, d)),
                        attention: None,
                        gat_source: None,
                        gat_target: None,
                    },
                    GraphVariant::Gat => GraphLayer {
                        weight: b.linear("weight", d, d),
                        bias: None,
                        attention: None,
                        gat_source: Some(b.linear("gat_source", d, 1)),
                        gat_target: Some(b.linear("gat_target", d, 1)),
                    },
                    GraphVariant::None => unreachable!("no layers are built for the graph-free variant"),
                })
            })
            .collect();
        Self {
            layers,
            config: config.clone(),
        }
    }

    /// Runs every layer and returns the final node features plus one
    /// attention matrix per layer.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        h: Var,
        adjacency: &Arc<Tensor2>,
    ) -> Result<(Var, Vec<Var>)> {
        encode_graph(tape, p, &self.layers, &self.config, h, adjacency)
    }
}

fn layer_param(id: Option<ParamId>, what: &str) -> Result<ParamId> {
    id.ok_or_else(|| Error::Config(format!("graph layer has no {what} parameter for this variant")))
}

/// Attentive GCN layer: bilinear neighbour scores, masked softmax, weighted
/// sum of transformed neighbours plus bias. Returns `(output, weights)`.
pub fn agcn_layer(
    tape: &mut Tape,
    p: &ParamVars,
    layer: &GraphLayer,
    h: Var,
    adjacency: &Arc<Tensor2>,
    norm: AttentionNorm,
    scaled: bool,
) -> Result<(Var, Var)> {
    let w_a = p.get(layer_param(layer.attention, "attention")?);
    let hw = tape.matmul(h, w_a)?;
    let ht = tape.transpose(h);
    let logits = tape.matmul(hw, ht)?;
    let d = tape.value(h).cols() as f64;
    let logits = if scaled { tape.scale(logits, 1.0 / d.sqrt()) } else { logits };
    let weights = tape.masked_row_softmax(logits, Arc::clone(adjacency), norm.softmax_norm())?;
    let transformed = tape.matmul(h, p.get(layer.weight))?;
    let mixed = tape.aggregate(weights, transformed)?;
    let out = tape.add_row(mixed, p.get(layer_param(layer.bias, "bias")?))?;
    Ok((out, weights))
}

/// Plain GCN layer over the unnormalised binary adjacency.
pub fn gcn_layer(
    tape: &mut Tape,
    p: &ParamVars,
    layer: &GraphLayer,
    h: Var,
    adjacency: &Arc<Tensor2>,
) -> Result<Var> {
    let a = tape.leaf(adjacency.as_ref().clone());
    let transformed = tape.matmul(h, p.get(layer.weight))?;
    let mixed = tape.aggregate(a, transformed)?;
    tape.add_row(mixed, p.get(layer_param(layer.bias, "bias")?))
}

/// Single-head GAT layer. Returns `(output, weights)`.
pub fn gat_layer(
    tape: &mut Tape,
    p: &ParamVars,
    layer: &GraphLayer,
    h: Var,
    adjacency: &Arc<Tensor2>,
    negative_slope: f64,
) -> Result<(Var, Var)> {
    let n = tape.value(h).rows();
    let transformed = tape.matmul(h, p.get(layer.weight))?;
    let src = tape.matmul(transformed, p.get(layer_param(layer.gat_source, "gat_source")?))?;
    let dst = tape.matmul(transformed, p.get(layer_param(layer.gat_target, "gat_target")?))?;
    // e_jk = src_j + dst_k, built as src·1ᵀ + 1·dstᵀ
    let ones_row = tape.leaf(Tensor2::filled(1, n, 1.0));
    let ones_col = tape.leaf(Tensor2::filled(n, 1, 1.0));
    let src_grid = tape.matmul(src, ones_row)?;
    let dst_t = tape.transpose(dst);
    let dst_grid = tape.matmul(ones_col, dst_t)?;
    let scores = tape.add(src_grid, dst_grid)?;
    let scores = tape.leaky_relu(scores, negative_slope);
    let weights = tape.masked_row_softmax(scores, Arc::clone(adjacency), SoftmaxNorm::Masked)?;
    let out = tape.aggregate(weights, transformed)?;
    Ok((out, weights))
}

/// Applies `config.layers` layers of the configured variant.
pub fn encode_graph(
    tape: &mut Tape,
    p: &ParamVars,
    layers: &[GraphLayer],
    config: &GraphConfig,
    h: Var,
    adjacency: &Arc<Tensor2>,
) -> Result<(Var, Vec<Var>)> {
    if config.variant == GraphVariant::None {
        return Err(Error::Config("the graph-free variant has no graph encoder".into()));
    }
    if layers.is_empty() {
        return Err(Error::Config("graph needs at least one layer".into()));
    }
    let size = tape.value(h).rows();
    if adjacency.shape() != (size, size) {
        return Err(Error::shape(
            "encode_graph",
            format!(
                "adjacency {}x{} for {size} nodes",
                adjacency.rows(),
                adjacency.cols()
            ),
        ));
    }
    let mut trace = Vec::with_capacity(layers.len());
    let mut h = h;
    for (l, layer) in layers.iter().enumerate() {
        if l > 0 && config.activation == Activation::Relu {
            h = tape.relu(h);
        }
        let (out, weights) = match config.variant {
            GraphVariant::Agcn => agcn_layer(tape, p, layer, h, adjacency, config.attention_norm, config.scaled_logits)?,
            GraphVariant::Gat => gat_layer(tape, p, layer, h, adjacency, config.gat_negative_slope)?,
            GraphVariant::Gcn => {
                let out = gcn_layer(tape, p, layer, h, adjacency)?;
                (out, tape.leaf(row_normalized(adjacency)))
            }
            GraphVariant::None => unreachable!(),
        };
        trace.push(weights);
        h = out;
    }
    Ok((h, trace))
}

/// Each row divided by its sum.
pub fn row_normalized(a: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let s: f64 = out.row(r).iter().sum();
        if s != 0.0 {
            for v in out.row_mut(r) {
                *v /= s;
            }
        }
    }
    out
}

/// Per-layer attention matrices with the derived per-slice importance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub num_nodes: usize,
    /// Row-major `num_nodes × num_nodes` weights, one entry per layer.
    pub layers: Vec<Vec<f64>>,
    /// Mean final-layer weight from token rows onto each slice column.
    pub slice_importance: Vec<f64>,
    pub node_kinds: Vec<NodeKind>,
}

impl AttentionTrace {
    pub fn from_layers(layers: &[Tensor2], n_slices: usize, n_tokens: usize) -> Result<Self> {
        let size = n_slices + n_tokens;
        let last = layers
            .last()
            .ok_or_else(|| Error::NoTrace("no graph layers were run".into()))?;
        if layers.iter().any(|l| l.shape() != (size, size)) {
            return Err(Error::shape("attention_trace", format!("layers must be {size}x{size}")));
        }
        let slice_importance = (0..n_slices)
            .map(|s| {
                if n_tokens == 0 {
                    return 0.0;
                }
                (n_slices..size).map(|j| last.get(j, s)).sum::<f64>() / n_tokens as f64
            })
            .collect();
        Ok(Self {
            num_nodes: size,
            layers: layers.iter().map(|l| l.data().to_vec()).collect(),
            slice_importance,
            node_kinds: node_kinds(n_slices, n_tokens),
        })
    }

    pub fn layer(&self, l: usize) -> Tensor2 {
        Tensor2::from_vec(self.num_nodes, self.num_nodes, self.layers[l].clone())
            .expect("trace layers are square")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `layer,j,k,w` rows for every matrix entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,j,k,w\n");
        for (l, weights) in self.layers.iter().enumerate() {
            for j in 0..self.num_nodes {
                for k in 0..self.num_nodes {
                    out.push_str(&format!("{l},{j},{k},{}\n", weights[j * self.num_nodes + k]));
                }
            }
        }
        out
    }
}
