//! Minimal decoder-only causal transformer with a deterministic visual-token
//! front end.
//!
//! The engine exposes per-layer/per-head attention during both prefill and
//! decode through a streaming [`AttentionSink`], supports removing visual
//! tokens mid-stack (hidden states and KV entries for dropped positions are
//! discarded from the cut layer on), and scores fixed token sequences in one
//! teacher-forced parallel pass.
//!
//! Conventions, fixed once and used everywhere:
//!
//! - Tokens are laid out visual block first, prompt block second, generated
//!   tokens appended after.
//! - Positions are absolute learned indices assigned at ingestion; surviving
//!   tokens keep their original position indices after pruning.
//! - Decoding is greedy argmax; one reserved vocabulary id (the last one)
//!   terminates generation.
//! - Pruning "at layer k" (0-indexed here) means dropped tokens do not
//!   participate in layer k's attention; layers before k see all tokens.
//!   Command-line and document layer numbers are 1-indexed counts of layers
//!   that still see every token, which is numerically the same integer.

mod forward;
mod model;
mod serialize;
mod sink;

pub use forward::{
    DecodeStep, GenerationRun, KeptResolver, KvCache, PrefillRun, PrunePlan, TeacherForcedRun,
};
pub use model::{build_model, LayerWeights, Model, WeightRecipe};
pub use sink::{AttentionSink, NullSink, SinkError, TeeSink};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Immutable description of a model's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelSpec {
    /// Feed-forward width is fixed at four times the model width.
    pub fn ff_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Reserved end-of-sequence id (always the last vocabulary entry).
    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.num_layers == 0 {
            return Err(EngineError::InvalidSpec("num_layers must be >= 1".into()));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(EngineError::InvalidSpec(
                "num_heads and head_dim must be >= 1".into(),
            ));
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(EngineError::InvalidSpec(format!(
                "model_dim {} != num_heads {} * head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(EngineError::InvalidSpec("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len == 0 {
            return Err(EngineError::InvalidSpec("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Input sequence: a block of visual tokens followed by prompt tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_visual: usize,
    pub n_prompt: usize,
    pub token_ids: Vec<usize>,
}

impl TokenLayout {
    pub fn new(n_visual: usize, n_prompt: usize, token_ids: Vec<usize>) -> Result<Self, EngineError> {
        if n_visual == 0 || n_prompt == 0 {
            return Err(EngineError::InvalidLayout(
                "need at least one visual and one prompt token".into(),
            ));
        }
        if token_ids.len() != n_visual + n_prompt {
            return Err(EngineError::InvalidLayout(format!(
                "token_ids length {} != n_visual {} + n_prompt {}",
                token_ids.len(),
                n_visual,
                n_prompt
            )));
        }
        Ok(Self {
            n_visual,
            n_prompt,
            token_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Position of the last prompt token.
    pub fn last_prompt_pos(&self) -> usize {
        self.n_visual + self.n_prompt - 1
    }
}

/// Greedy generation output: chosen ids and their softmax probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub generated_ids: Vec<usize>,
    pub step_probs: Vec<f64>,
}

impl GenerationResult {
    /// Generated ids with a trailing end-of-sequence id stripped; what a
    /// caller compares against a ground-truth answer.
    pub fn answer_ids(&self, eos_id: usize) -> &[usize] {
        match self.generated_ids.split_last() {
            Some((&last, rest)) if last == eos_id => rest,
            _ => &self.generated_ids,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid token layout: {0}")]
    InvalidLayout(String),
    #[error("sequence of length {needed} exceeds capacity {max}")]
    Capacity { needed: usize, max: usize },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("non-finite value in weights: {0}")]
    NonFinite(String),
    #[error("prune directive kept no visual tokens")]
    EmptyKeptSet,
    #[error("prune layer {layer} out of range for {num_layers}-layer model")]
    PruneLayerOutOfRange { layer: usize, num_layers: usize },
    #[error("kept index {index} out of range for {n_visual} visual tokens")]
    KeptIndexOutOfRange { index: usize, n_visual: usize },
    #[error("deferred prune source layer {source_layer} not before cut layer {cut}")]
    PruneSourceAfterCut { source_layer: usize, cut: usize },
    #[error("attention sink rejected data: {0}")]
    Sink(#[from] SinkError),
    #[error("prune resolution failed: {0}")]
    PruneResolution(String),
    #[error("model file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad model container: {0}")]
    BadContainer(String),
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a slice into a fresh vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}
