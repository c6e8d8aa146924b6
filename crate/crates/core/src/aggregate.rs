//! Streaming accumulation of the global visual-token importance map across
//! all layers and heads of prefill and decode.
//!
//! A trace holds two length-`N_I` accumulators: the attention mass visual
//! tokens receive from prompt rows during prefill, and from generated tokens
//! during decode. Nothing else is retained, so peak memory is `O(N_I)`
//! regardless of depth, head count, or generation length.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AttentionSink, SinkError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("attention map of {got} entries does not match expected {want} ({detail})")]
    DimensionMismatch {
        got: usize,
        want: usize,
        detail: String,
    },
    #[error("trace is empty: {0}")]
    Empty(String),
}

/// Which token rows feed an importance readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSubset {
    LastPromptToken,
    PromptOnly,
    GeneratedOnly,
    PromptAndGenerated,
}

impl TokenSubset {
    pub const ALL: [TokenSubset; 4] = [
        TokenSubset::LastPromptToken,
        TokenSubset::PromptOnly,
        TokenSubset::GeneratedOnly,
        TokenSubset::PromptAndGenerated,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenSubset::LastPromptToken => "last_prompt_token",
            TokenSubset::PromptOnly => "prompt_only",
            TokenSubset::GeneratedOnly => "generated_only",
            TokenSubset::PromptAndGenerated => "prompt_and_generated",
        }
    }
}

/// Streaming accumulator for visual-token attention mass.
///
/// Exclusively owned by one inference; feeding it maps from a different run
/// (wrong dimensions) is rejected.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    n_visual: usize,
    n_prompt: usize,
    a_prefill: Vec<T>,
    a_decode: Vec<T>,
    last_prompt_row: Vec<T>,
    layers_seen: BTreeSet<usize>,
    prefill_maps_seen: usize,
    decode_steps_seen: usize,
    layer_filter: Option<BTreeSet<usize>>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn new(n_visual: usize, n_prompt: usize) -> Self {
        Self {
            n_visual,
            n_prompt,
            a_prefill: vec![T::zero(); n_visual],
            a_decode: vec![T::zero(); n_visual],
            last_prompt_row: vec![T::zero(); n_visual],
            layers_seen: BTreeSet::new(),
            prefill_maps_seen: 0,
            decode_steps_seen: 0,
            layer_filter: None,
        }
    }

    /// Restrict accumulation to a set of 0-indexed layers. Maps from other
    /// layers are silently skipped rather than rejected, so one sink can be
    /// attached to a full run.
    pub fn with_layer_filter(mut self, layers: BTreeSet<usize>) -> Self {
        self.layer_filter = Some(layers);
        self
    }

    fn layer_included(&self, layer: usize) -> bool {
        self.layer_filter.as_ref().is_none_or(|f| f.contains(&layer))
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    /// Fold one prefill attention map into the prefill accumulator: the
    /// bottom-left block (prompt rows over visual columns) is column-summed
    /// and added.
    pub fn accumulate_prefill(
        &mut self,
        map: &[T],
        n: usize,
        layer: usize,
        _head: usize,
    ) -> Result<(), TraceError> {
        if !self.layer_included(layer) {
            return Ok(());
        }
        let want = self.n_visual + self.n_prompt;
        if n != want || map.len() != n * n {
            return Err(TraceError::DimensionMismatch {
                got: map.len(),
                want: want * want,
                detail: format!("prefill map for {} visual + {} prompt tokens", self.n_visual, self.n_prompt),
            });
        }
        for prompt_row in self.n_visual..n {
            let row = &map[prompt_row * n..prompt_row * n + self.n_visual];
            for (acc, &x) in self.a_prefill.iter_mut().zip(row) {
                *acc += x;
            }
            if prompt_row == n - 1 {
                for (acc, &x) in self.last_prompt_row.iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        self.layers_seen.insert(layer);
        self.prefill_maps_seen += 1;
        Ok(())
    }

    /// Fold one decode attention vector into the decode accumulator: the
    /// first `N_I` entries are the visual block.
    pub fn accumulate_decode(
        &mut self,
        attn: &[T],
        step: usize,
        layer: usize,
        _head: usize,
    ) -> Result<(), TraceError> {
        if !self.layer_included(layer) {
            return Ok(());
        }
        let min_len = self.n_visual + self.n_prompt + step + 1;
        if attn.len() != min_len {
            return Err(TraceError::DimensionMismatch {
                got: attn.len(),
                want: min_len,
                detail: format!("decode vector at step {step}"),
            });
        }
        for (acc, &x) in self.a_decode.iter_mut().zip(&attn[..self.n_visual]) {
            *acc += x;
        }
        self.decode_steps_seen = self.decode_steps_seen.max(step + 1);
        Ok(())
    }

    /// Combined importance `a_prefill + a_decode`, elementwise. Pure: the
    /// trace can keep accumulating afterwards.
    pub fn finalize(&self) -> Result<Vec<T>, TraceError> {
        if self.prefill_maps_seen == 0 {
            return Err(TraceError::Empty("no prefill accumulation occurred".into()));
        }
        Ok(self
            .a_prefill
            .iter()
            .zip(&self.a_decode)
            .map(|(&p, &d)| p + d)
            .collect())
    }

    /// Combined importance with the decode side weighted; `finalize` is the
    /// `weight = 1` case.
    pub fn combined_importance(&self, decode_weight: f64) -> Result<Vec<T>, TraceError> {
        if self.prefill_maps_seen == 0 {
            return Err(TraceError::Empty("no prefill accumulation occurred".into()));
        }
        let w = T::from_f64(decode_weight);
        Ok(self
            .a_prefill
            .iter()
            .zip(&self.a_decode)
            .map(|(&p, &d)| p + w * d)
            .collect())
    }

    /// Importance restricted to a token subset.
    pub fn subset_importance(&self, mode: TokenSubset) -> Result<Vec<T>, TraceError> {
        match mode {
            TokenSubset::LastPromptToken | TokenSubset::PromptOnly => {
                if self.prefill_maps_seen == 0 {
                    return Err(TraceError::Empty("no prefill accumulation occurred".into()));
                }
            }
            TokenSubset::GeneratedOnly => {
                if self.decode_steps_seen == 0 {
                    return Err(TraceError::Empty("no decode accumulation occurred".into()));
                }
            }
            TokenSubset::PromptAndGenerated => {}
        }
        match mode {
            TokenSubset::LastPromptToken => Ok(self.last_prompt_row.clone()),
            TokenSubset::PromptOnly => Ok(self.a_prefill.clone()),
            TokenSubset::GeneratedOnly => Ok(self.a_decode.clone()),
            TokenSubset::PromptAndGenerated => self.finalize(),
        }
    }

    pub fn a_prefill(&self) -> &[T] {
        &self.a_prefill
    }

    pub fn a_decode(&self) -> &[T] {
        &self.a_decode
    }

    pub fn layers_seen(&self) -> usize {
        self.layers_seen.len()
    }

    pub fn decode_steps_seen(&self) -> usize {
        self.decode_steps_seen
    }

    /// Debug/plotting export with accumulators widened to f64.
    pub fn export(&self) -> TraceExport {
        TraceExport {
            n_visual: self.n_visual,
            a_prefill: self.a_prefill.iter().map(|x| x.to_f64_value()).collect(),
            a_decode: self.a_decode.iter().map(|x| x.to_f64_value()).collect(),
            counters: TraceCounters {
                layers_seen: self.layers_seen.len(),
                prefill_maps_seen: self.prefill_maps_seen,
                decode_steps_seen: self.decode_steps_seen,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceExport {
    pub n_visual: usize,
    pub a_prefill: Vec<f64>,
    pub a_decode: Vec<f64>,
    pub counters: TraceCounters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceCounters {
    pub layers_seen: usize,
    pub prefill_maps_seen: usize,
    pub decode_steps_seen: usize,
}

/// Adapter that lets an [`AttentionTrace`] consume an engine run directly.
pub struct TraceSink<'a, T> {
    trace: &'a mut AttentionTrace<T>,
}

impl<'a, T: Scalar> TraceSink<'a, T> {
    pub fn new(trace: &'a mut AttentionTrace<T>) -> Self {
        Self { trace }
    }
}

impl<T: Scalar> AttentionSink<T> for TraceSink<'_, T> {
    fn prefill_map(&mut self, layer: usize, head: usize, n: usize, map: &[T]) -> Result<(), SinkError> {
        self.trace
            .accumulate_prefill(map, n, layer, head)
            .map_err(|e| SinkError(e.to_string()))
    }

    fn decode_vec(&mut self, step: usize, layer: usize, head: usize, attn: &[T]) -> Result<(), SinkError> {
        self.trace
            .accumulate_decode(attn, step, layer, head)
            .map_err(|e| SinkError(e.to_string()))
    }
}
