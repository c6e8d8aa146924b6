//! Deterministic construction of toy model pairs with planted attention and
//! answer pathways, plus synthetic needle datasets; the ground truth every
//! pipeline claim is verified against, with no training anywhere.

mod dataset;
mod planted;
mod vocab;

pub use dataset::{
    dataset_from_jsonl, dataset_to_jsonl, gen_needle_dataset, gen_needle_dataset_with,
    heatmap_matrix, NeedleInstance,
};
pub use planted::build_planted_pair;
pub use vocab::{GridVocab, TokenKind};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, ModelSpec};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("construction infeasible: {0}")]
    Infeasible(String),
    #[error("shape mismatch: got {got}, want {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Whether the answer pathway emits the true symbol or a deterministic
/// wrong one (attention stays intact either way).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFidelity {
    Faithful,
    Corrupted,
}

/// Construction parameters for a planted model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecipe {
    /// (rows, cols) of the visual-token grid.
    pub grid: (usize, usize),
    /// Number of distinct cell symbols.
    pub symbols: usize,
    /// Cells the small model's query circuit covers. Queries outside this
    /// set get no designated attention, which is what makes an instance
    /// hard for the model. The large model in a pair always covers all
    /// cells via its own recipe copy; pass all cells for full coverage.
    pub planted_cells: BTreeSet<usize>,
    /// 1-indexed layers (of the small model) whose designated head carries
    /// the circuit; the large model uses the same relative depths.
    pub relevance_layers: BTreeSet<usize>,
    /// Target attention mass on the queried cell, in (0.5, 1).
    pub concentration: f64,
    pub answer_fidelity: AnswerFidelity,
}

impl PlantedRecipe {
    pub fn vocab(&self) -> GridVocab {
        GridVocab::new(self.grid.0, self.grid.1, self.symbols)
    }

    /// All-cells coverage for a grid.
    pub fn full_coverage(grid: (usize, usize)) -> BTreeSet<usize> {
        (0..grid.0 * grid.1).collect()
    }

    /// Spec with the vocabulary implied by the grid.
    pub fn model_spec(
        &self,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        max_seq_len: usize,
    ) -> ModelSpec {
        ModelSpec {
            num_layers,
            num_heads,
            model_dim: num_heads * head_dim,
            head_dim,
            vocab_size: self.vocab().vocab_size(),
            max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let cells = self.grid.0 * self.grid.1;
        if cells == 0 {
            return Err(SynthError::InvalidRecipe("grid must be nonempty".into()));
        }
        if self.symbols < 2 {
            return Err(SynthError::InvalidRecipe(
                "need at least 2 symbols (corrupted mode rotates by one)".into(),
            ));
        }
        if self.planted_cells.is_empty() {
            return Err(SynthError::InvalidRecipe("planted_cells must be nonempty".into()));
        }
        if self.planted_cells.iter().any(|&c| c >= cells) {
            return Err(SynthError::InvalidRecipe("planted cell outside the grid".into()));
        }
        if self.relevance_layers.is_empty() || self.relevance_layers.contains(&0) {
            return Err(SynthError::InvalidRecipe(
                "relevance_layers must be nonempty and 1-indexed".into(),
            ));
        }
        if !(self.concentration > 0.5 && self.concentration < 1.0) {
            return Err(SynthError::InvalidRecipe(format!(
                "concentration {} outside (0.5, 1)",
                self.concentration
            )));
        }
        Ok(())
    }
}
