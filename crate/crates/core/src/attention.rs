//! Bilinear word attention over a title's word embeddings.
//!
//! For word embeddings `w_1 … w_T` (rows of a `T×d` matrix):
//!
//! 1. global context `g = mean_j w_j`
//! 2. second-order map `F[j] = g ⊙ w_j`
//! 3. scores `s[j] = tanh(mean_k F[j, k])`
//! 4. attention `α = softmax(s)`
//! 5. semantic embedding `x_s = Σ_j α_j · w_j`
//!
//! The pipeline has no parameters of its own and is invariant to word order.
//! `mean_pooling` mode skips steps 2–5 and returns `g` with uniform weights.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::text::EmbeddingTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    #[default]
    BilinearAttention,
    MeanPooling,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::BilinearAttention => "bilinear_attention",
            PoolingMode::MeanPooling => "mean_pooling",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear_attention" => Ok(PoolingMode::BilinearAttention),
            "mean_pooling" => Ok(PoolingMode::MeanPooling),
            other => Err(Error::Spec(format!(
                "unknown mode `{other}` (expected bilinear_attention or mean_pooling)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemanticStreamConfig {
    pub dim: usize,
    pub mode: PoolingMode,
}

/// Graph handles for one title.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub scores: Option<Var>,
    pub alpha: Option<Var>,
    pub embedding: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub alpha: Vec<f64>,
    pub embedding: Vec<f64>,
    pub scores: Vec<f64>,
}

fn require_words(g: &Graph, words: Var) -> Result<()> {
    let shape = g.value(words).shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("word embeddings must be T×d, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(Error::EmptyTitle("title has no in-vocabulary words".into()));
    }
    Ok(())
}

pub fn global_context(g: &mut Graph, words: Var) -> Result<Var> {
    require_words(g, words)?;
    g.mean_over_axis(words, 0)
}

pub fn bilinear_feature_map(g: &mut Graph, context: Var, words: Var) -> Result<Var> {
    g.row_mul(words, context)
}

pub fn attention_scores(g: &mut Graph, feature_map: Var) -> Result<Var> {
    let pooled = g.mean_over_axis(feature_map, 1)?;
    Ok(g.tanh(pooled))
}

pub fn attention_weights(g: &mut Graph, scores: Var) -> Result<Var> {
    g.softmax(scores)
}

pub fn semantic_embedding(g: &mut Graph, alpha: Var, words: Var) -> Result<Var> {
    g.weighted_sum(alpha, words)
}

/// Full semantic stream for a `T×d` word-embedding node.
pub fn attend(g: &mut Graph, words: Var, mode: PoolingMode) -> Result<AttentionVars> {
    let context = global_context(g, words)?;
    match mode {
        PoolingMode::MeanPooling => Ok(AttentionVars {
            scores: None,
            alpha: None,
            embedding: context,
        }),
        PoolingMode::BilinearAttention => {
            let fmap = bilinear_feature_map(g, context, words)?;
            let scores = attention_scores(g, fmap)?;
            let alpha = attention_weights(g, scores)?;
            let embedding = semantic_embedding(g, alpha, words)?;
            Ok(AttentionVars {
                scores: Some(scores),
                alpha: Some(alpha),
                embedding,
            })
        }
    }
}

/// Looks up `tokens` in the table node and runs [`attend`].
pub fn semantic_forward_graph(
    g: &mut Graph,
    table: Var,
    tokens: &[usize],
    mode: PoolingMode,
) -> Result<AttentionVars> {
    if tokens.is_empty() {
        return Err(Error::EmptyTitle("title has no in-vocabulary words".into()));
    }
    let words = g.gather(table, tokens)?;
    attend(g, words, mode)
}

/// Forward-only evaluation for one title.
pub fn semantic_forward(
    tokens: &[usize],
    table: &EmbeddingTable,
    config: &SemanticStreamConfig,
) -> Result<AttentionOutput> {
    if table.dim() != config.dim {
        return Err(Error::dim(format!(
            "embedding width {} differs from semantic dim {}",
            table.dim(),
            config.dim
        )));
    }
    let mut g = Graph::new();
    let t = g.constant(table.matrix.clone());
    let vars = semantic_forward_graph(&mut g, t, tokens, config.mode)?;
    Ok(collect(&g, &vars, tokens.len()))
}

/// Forward-only evaluation over an explicit `T×d` word matrix.
pub fn attend_words(words: &Tensor, mode: PoolingMode) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let w = g.constant(words.clone());
    let vars = attend(&mut g, w, mode)?;
    Ok(collect(&g, &vars, words.shape()[0]))
}

fn collect(g: &Graph, vars: &AttentionVars, len: usize) -> AttentionOutput {
    let uniform = vec![1.0 / len as f64; len];
    AttentionOutput {
        alpha: vars.alpha.map_or_else(|| uniform.clone(), |a| g.value(a).data().to_vec()),
        embedding: g.value(vars.embedding).data().to_vec(),
        scores: vars
            .scores
            .map_or_else(|| vec![0.0; len], |s| g.value(s).data().to_vec()),
    }
}
