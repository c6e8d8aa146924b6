//! Streaming consumer interface for attention maps.
//!
//! The engine materializes one (layer, head) attention map at a time, hands
//! it to the sink, and discards it. Nothing is retained across layers, so a
//! sink is the only place full attention ever exists.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct SinkError(pub String);

/// Receives attention as it is computed.
///
/// During prefill the engine delivers, per layer and head, the full
/// `n x n` lower-triangular row-stochastic map (row-major, upper entries
/// zero) where `n` is that layer's sequence length. During decode it
/// delivers the new token's attention vector over all retained cached
/// positions (self included), per layer and head.
pub trait AttentionSink<T: Scalar> {
    fn prefill_map(&mut self, layer: usize, head: usize, n: usize, map: &[T]) -> Result<(), SinkError>;

    fn decode_vec(
        &mut self,
        step: usize,
        layer: usize,
        head: usize,
        attn: &[T],
    ) -> Result<(), SinkError>;
}

/// Sink that drops everything.
pub struct NullSink;

impl<T: Scalar> AttentionSink<T> for NullSink {
    fn prefill_map(&mut self, _: usize, _: usize, _: usize, _: &[T]) -> Result<(), SinkError> {
        Ok(())
    }

    fn decode_vec(&mut self, _: usize, _: usize, _: usize, _: &[T]) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Fan-out to two sinks; handy when a run must feed a trace and a debug
/// capture at once.
pub struct TeeSink<'a, A, B>(pub &'a mut A, pub &'a mut B);

impl<T: Scalar, A: AttentionSink<T>, B: AttentionSink<T>> AttentionSink<T> for TeeSink<'_, A, B> {
    fn prefill_map(&mut self, layer: usize, head: usize, n: usize, map: &[T]) -> Result<(), SinkError> {
        self.0.prefill_map(layer, head, n, map)?;
        self.1.prefill_map(layer, head, n, map)
    }

    fn decode_vec(&mut self, step: usize, layer: usize, head: usize, attn: &[T]) -> Result<(), SinkError> {
        self.0.decode_vec(step, layer, head, attn)?;
        self.1.decode_vec(step, layer, head, attn)
    }
}
