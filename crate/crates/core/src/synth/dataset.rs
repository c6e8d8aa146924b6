//! Synthetic needle tasks: find the symbol at a queried grid cell.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::GridVocab;
use super::SynthError;
use crate::cascade::EvalInstance;
use crate::engine::TokenLayout;
use crate::scalar::Scalar;

/// One task instance: a populated grid plus a query, with the answer known
/// by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleInstance {
    /// (rows, cols).
    pub grid: (usize, usize),
    /// Visual cell tokens first, then `[prefix, query]` prompt tokens.
    pub token_ids: Vec<usize>,
    pub query_cell: usize,
    /// Vocabulary id of the symbol token at the queried cell.
    pub answer_id: usize,
    /// Cells the answer flows through; the queried cell.
    pub planted_cells: BTreeSet<usize>,
}

impl NeedleInstance {
    pub fn layout(&self) -> TokenLayout {
        let cells = self.grid.0 * self.grid.1;
        let n_prompt = self.token_ids.len() - cells;
        TokenLayout::new(cells, n_prompt, self.token_ids.clone())
            .expect("instance layouts are well-formed")
    }

    pub fn eval_instance(&self) -> EvalInstance {
        EvalInstance {
            layout: self.layout(),
            answer_ids: vec![self.answer_id],
        }
    }
}

/// Deterministic dataset of needle instances.
///
/// Every cell carries a symbol. The answer symbol appears only at the
/// queried cell; per instance, up to `difficulty` other cells share one
/// decoy symbol, a plausible wrong answer that dominates what an unfocused
/// model retrieves (the per-instance count is drawn from `0..=difficulty`
/// so decoy dominance varies across the set). Remaining cells draw
/// uniformly from the non-answer symbols.
pub fn gen_needle_dataset(
    vocab: &GridVocab,
    n_instances: usize,
    seed: u64,
    difficulty: usize,
) -> Result<Vec<NeedleInstance>, SynthError> {
    gen_needle_dataset_with(vocab, n_instances, seed, difficulty, true)
}

/// Dataset variant controlling the prompt shape: prefixed prompts are
/// `[prefix, query]` (two prompt tokens), bare prompts are just the query
/// token, which collapses last-prompt-token and prompt-only readouts.
pub fn gen_needle_dataset_with(
    vocab: &GridVocab,
    n_instances: usize,
    seed: u64,
    difficulty: usize,
    prefixed_prompt: bool,
) -> Result<Vec<NeedleInstance>, SynthError> {
    if n_instances == 0 {
        return Err(SynthError::InvalidRecipe("n_instances must be >= 1".into()));
    }
    if vocab.symbols < 2 {
        return Err(SynthError::InvalidRecipe("need at least 2 symbols".into()));
    }
    let cells = vocab.cells();
    let max_decoys = difficulty.min(cells.saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_instances);

    for _ in 0..n_instances {
        let decoys = if max_decoys == 0 {
            0
        } else {
            rng.gen_range(0..=max_decoys)
        };
        let query_cell = rng.gen_range(0..cells);
        let answer_sym = rng.gen_range(0..vocab.symbols);
        let decoy_sym = {
            let r = rng.gen_range(0..vocab.symbols - 1);
            if r >= answer_sym {
                r + 1
            } else {
                r
            }
        };

        let mut symbols: Vec<usize> = (0..cells)
            .map(|c| {
                if c == query_cell {
                    answer_sym
                } else {
                    let r = rng.gen_range(0..vocab.symbols - 1);
                    if r >= answer_sym {
                        r + 1
                    } else {
                        r
                    }
                }
            })
            .collect();

        let mut other_cells: Vec<usize> = (0..cells).filter(|&c| c != query_cell).collect();
        for _ in 0..decoys {
            let pick = rng.gen_range(0..other_cells.len());
            symbols[other_cells.swap_remove(pick)] = decoy_sym;
        }

        let mut token_ids: Vec<usize> = (0..cells).map(|c| vocab.cell_token(c, symbols[c])).collect();
        if prefixed_prompt {
            token_ids.push(vocab.prefix_token());
        }
        token_ids.push(vocab.query_token(query_cell));

        out.push(NeedleInstance {
            grid: (vocab.rows, vocab.cols),
            token_ids,
            query_cell,
            answer_id: vocab.symbol_token(answer_sym),
            planted_cells: BTreeSet::from([query_cell]),
        });
    }
    Ok(out)
}

/// Serialize instances as JSON lines, one per instance.
pub fn dataset_to_jsonl(instances: &[NeedleInstance]) -> String {
    instances
        .iter()
        .map(|i| serde_json::to_string(i).expect("instances serialize"))
        .fold(String::new(), |mut acc, line| {
            acc.push_str(&line);
            acc.push('\n');
            acc
        })
}

pub fn dataset_from_jsonl(text: &str) -> Result<Vec<NeedleInstance>, SynthError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SynthError::InvalidRecipe(format!("bad dataset line: {e}"))))
        .collect()
}

/// Reshape an importance vector onto the grid, row-major.
pub fn heatmap_matrix<T: Scalar>(
    importance: &[T],
    grid: (usize, usize),
) -> Result<Vec<Vec<f64>>, SynthError> {
    let (rows, cols) = grid;
    if importance.len() != rows * cols {
        return Err(SynthError::ShapeMismatch {
            got: importance.len(),
            want: rows * cols,
        });
    }
    Ok((0..rows)
        .map(|r| {
            importance[r * cols..(r + 1) * cols]
                .iter()
                .map(|x| x.to_f64_value())
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic() {
        let v = GridVocab::new(4, 4, 8);
        let a = gen_needle_dataset(&v, 20, 7, 3).unwrap();
        let b = gen_needle_dataset(&v, 20, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_needle_dataset(&v, 20, 8, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_grid_has_single_planted_cell() {
        let v = GridVocab::new(1, 1, 4);
        let d = gen_needle_dataset(&v, 5, 0, 3).unwrap();
        for inst in d {
            assert_eq!(inst.query_cell, 0);
            assert_eq!(inst.planted_cells, BTreeSet::from([0]));
            assert_eq!(inst.layout().n_visual, 1);
        }
    }

    #[test]
    fn answer_symbol_is_unique_to_the_queried_cell() {
        let v = GridVocab::new(4, 4, 8);
        for inst in gen_needle_dataset(&v, 50, 3, 6).unwrap() {
            let answer_sym = inst.answer_id - 1 - v.cells();
            for (cell, &id) in inst.token_ids[..v.cells()].iter().enumerate() {
                let off = id - (1 + v.cells() + v.symbols);
                let sym = off % v.symbols;
                if cell == inst.query_cell {
                    assert_eq!(sym, answer_sym);
                } else {
                    assert_ne!(sym, answer_sym, "decoys never carry the answer symbol");
                }
            }
        }
    }

    #[test]
    fn large_grid_answers_decode_independently() {
        // Validate 200 instances on an 8x8 grid with a decoder that inverts
        // the id arithmetic from scratch.
        let v = GridVocab::new(8, 8, 8);
        let (p, s) = (64_usize, 8_usize);
        for inst in gen_needle_dataset(&v, 200, 11, 4).unwrap() {
            let query_id = *inst.token_ids.last().unwrap();
            assert!((1..=p).contains(&query_id), "query token range");
            let queried = query_id - 1;
            assert_eq!(queried, inst.query_cell);

            let cell_id = inst.token_ids[queried];
            let off = cell_id - (1 + p + s);
            assert_eq!(off / s, queried, "cell token encodes its own position");
            let symbol = off % s;
            assert_eq!(inst.answer_id, 1 + p + symbol, "answer is the queried cell's symbol");
        }
    }

    #[test]
    fn bare_prompts_have_one_prompt_token() {
        let v = GridVocab::new(2, 2, 4);
        let d = gen_needle_dataset_with(&v, 5, 3, 0, false).unwrap();
        for inst in d {
            let layout = inst.layout();
            assert_eq!(layout.n_prompt, 1);
            assert_eq!(layout.token_ids.len(), 5);
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let v = GridVocab::new(2, 3, 4);
        let d = gen_needle_dataset(&v, 8, 1, 2).unwrap();
        let text = dataset_to_jsonl(&d);
        assert_eq!(dataset_from_jsonl(&text).unwrap(), d);
    }

    #[test]
    fn heatmap_reshapes_row_major() {
        let m = heatmap_matrix(&[1.0, 2.0, 3.0, 4.0], (2, 2)).unwrap();
        assert_eq!(m, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(heatmap_matrix(&[1.0; 3], (2, 2)).is_err());

        let uniform = heatmap_matrix(&[0.5; 4], (2, 2)).unwrap();
        assert!(uniform.iter().flatten().all(|&x| x == 0.5));
    }
}
