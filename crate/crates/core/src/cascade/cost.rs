//! Analytic transformer FLOPs model.
//!
//! Multiply-accumulates are counted from the standard per-layer terms and
//! reported as 2 FLOPs each:
//!
//! - attention projections: `4 n C^2` MACs
//! - attention scores + value mixing: `2 n^2 C` MACs
//! - feed-forward (width `4C`): `2 n C C_ff` MACs
//! - one unembedding term at the top: `n C C_T` MACs
//!
//! with `n` the sequence length each layer actually ran at, so mid-stack
//! pruning shows up directly. Decode steps use per-layer attention length
//! equal to the retained sequence (history plus the new token).

use serde::{Deserialize, Serialize};

use crate::engine::ModelSpec;

/// One multiply-accumulate counts as a multiply and an add.
pub const FLOPS_PER_MAC: u64 = 2;

/// FLOPs split by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub projections: u64,
    pub attention: u64,
    pub feed_forward: u64,
    pub unembedding: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.feed_forward + self.unembedding
    }
}

/// FLOPs of one parallel forward pass given the per-layer sequence lengths.
pub fn flops_forward(spec: &ModelSpec, seq_len_per_layer: &[usize]) -> FlopsBreakdown {
    assert_eq!(seq_len_per_layer.len(), spec.num_layers);
    assert!(seq_len_per_layer.iter().all(|&n| n > 0));
    let c = spec.model_dim as u64;
    let ff = spec.ff_dim() as u64;
    let mut b = FlopsBreakdown::default();
    for &n in seq_len_per_layer {
        let n = n as u64;
        b.projections += FLOPS_PER_MAC * 4 * n * c * c;
        b.attention += FLOPS_PER_MAC * 2 * n * n * c;
        b.feed_forward += FLOPS_PER_MAC * 2 * n * c * ff;
    }
    let n_top = *seq_len_per_layer.last().expect("at least one layer") as u64;
    b.unembedding = FLOPS_PER_MAC * n_top * c * spec.vocab_size as u64;
    b
}

/// FLOPs of one KV-cached decode step given the per-layer attention lengths
/// (retained history plus the new token).
pub fn flops_decode_step(spec: &ModelSpec, ctx_len_per_layer: &[usize]) -> FlopsBreakdown {
    assert_eq!(ctx_len_per_layer.len(), spec.num_layers);
    let c = spec.model_dim as u64;
    let ff = spec.ff_dim() as u64;
    let mut b = FlopsBreakdown::default();
    for &ctx in ctx_len_per_layer {
        let ctx = ctx as u64;
        b.projections += FLOPS_PER_MAC * 4 * c * c;
        b.attention += FLOPS_PER_MAC * 2 * ctx * c;
        b.feed_forward += FLOPS_PER_MAC * 2 * c * ff;
    }
    b.unembedding = FLOPS_PER_MAC * c * spec.vocab_size as u64;
    b
}

/// Per-layer lengths of an unpruned prefill.
pub fn full_lens(spec: &ModelSpec, n: usize) -> Vec<usize> {
    vec![n; spec.num_layers]
}

/// Per-layer lengths of a prefill pruned at 1-indexed layer `k`: the first
/// `k` layers see all `n` tokens, the rest see `n - dropped`.
pub fn pruned_lens(spec: &ModelSpec, n: usize, n_visual: usize, kept: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= spec.num_layers);
    assert!(kept >= 1 && kept <= n_visual && n_visual <= n);
    (0..spec.num_layers)
        .map(|layer| if layer < k { n } else { n - (n_visual - kept) })
        .collect()
}
