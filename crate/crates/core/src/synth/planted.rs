//! Analytic construction of model pairs whose attention provably
//! concentrates on queried grid cells.
//!
//! The circuit, per designated head in a relevance layer:
//!
//! - the query token's embedding carries a one-hot of the queried cell;
//!   the query projection scales it by an analytically chosen logit gap
//! - every visual token's key is the one-hot of its own cell, so the
//!   matching cell wins the softmax by the chosen gap
//! - values carry the cell's symbol one-hot, and the output projection
//!   routes the attention-weighted symbol into a retrieval subspace of the
//!   residual stream
//! - the unembedding reads the retrieval subspace into symbol-token logits;
//!   generated symbol tokens carry a done-marker that triggers the reserved
//!   end-of-sequence id on the next step
//!
//! Everything outside the designated structure is small seeded noise, which
//! keeps aggregation non-degenerate without disturbing the gaps. Corrupted
//! mode rotates the unembedding's retrieval readout by one symbol: the model
//! answers deterministically wrongly while its attention stays intact.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{DimLayout, TokenKind};
use super::{AnswerFidelity, PlantedRecipe, SynthError};
use crate::engine::{AttentionSink, LayerWeights, Model, ModelSpec, SinkError, TokenLayout};
use crate::scalar::Scalar;

/// Scale of the seeded noise on everything outside the designated circuit.
const NOISE_SCALE: f64 = 0.02;
/// Unembedding gain on the retrieval subspace.
const RETRIEVAL_GAIN: f64 = 4.0;
/// Unembedding gain on the end-of-sequence trigger.
const EOS_GAIN: f64 = 12.0;
/// Safety margin added to the analytic logit gap.
const GAP_MARGIN: f64 = 0.5;

/// Build a (small, large) pair for a recipe. The large model keeps the
/// recipe's relevance band at the same relative depth. The construction is
/// self-checked empirically before being returned: designated attention
/// must place at least `concentration - 0.02` mass on the queried cell.
pub fn build_planted_pair<T: Scalar>(
    small_spec: &ModelSpec,
    large_spec: &ModelSpec,
    recipe: &PlantedRecipe,
    seed: u64,
) -> Result<(Model<T>, Model<T>), SynthError> {
    recipe.validate()?;
    small_spec.validate()?;
    large_spec.validate()?;
    if small_spec.vocab_size != large_spec.vocab_size {
        return Err(SynthError::Infeasible(format!(
            "models must share the vocabulary: {} vs {}",
            small_spec.vocab_size, large_spec.vocab_size
        )));
    }
    if large_spec.num_layers <= small_spec.num_layers {
        return Err(SynthError::Infeasible(format!(
            "large model must be deeper: {} vs {}",
            large_spec.num_layers, small_spec.num_layers
        )));
    }
    if let Some(&max_rel) = recipe.relevance_layers.iter().max() {
        if max_rel > small_spec.num_layers {
            return Err(SynthError::Infeasible(format!(
                "relevance layer {max_rel} beyond the small model's {} layers",
                small_spec.num_layers
            )));
        }
    }

    let large_relevance: BTreeSet<usize> = recipe
        .relevance_layers
        .iter()
        .map(|&l| {
            let scaled =
                (l as f64 * large_spec.num_layers as f64 / small_spec.num_layers as f64).round() as usize;
            scaled.clamp(1, large_spec.num_layers)
        })
        .collect();

    let small = build_planted_model(
        small_spec,
        recipe,
        &recipe.relevance_layers,
        recipe.answer_fidelity,
        seed ^ 0x534d_414c,
    )?;
    // The large model is the fallback: always faithful and always covering
    // every cell, regardless of the small model's coverage or fidelity.
    let mut large_recipe = recipe.clone();
    large_recipe.planted_cells = PlantedRecipe::full_coverage(recipe.grid);
    large_recipe.answer_fidelity = AnswerFidelity::Faithful;
    let large = build_planted_model(
        large_spec,
        &large_recipe,
        &large_relevance,
        AnswerFidelity::Faithful,
        seed ^ 0x4c41_5247,
    )?;

    self_check(&small, recipe, &recipe.relevance_layers)?;
    self_check(&large, &large_recipe, &large_relevance)?;
    Ok((small, large))
}

fn build_planted_model<T: Scalar>(
    spec: &ModelSpec,
    recipe: &PlantedRecipe,
    relevance_layers: &BTreeSet<usize>,
    fidelity: AnswerFidelity,
    seed: u64,
) -> Result<Model<T>, SynthError> {
    let vocab = recipe.vocab();
    let cells = vocab.cells();
    let symbols = vocab.symbols;
    let dims = DimLayout::new(cells, symbols);

    if spec.vocab_size != vocab.vocab_size() {
        return Err(SynthError::Infeasible(format!(
            "spec vocab {} != grid vocab {}",
            spec.vocab_size,
            vocab.vocab_size()
        )));
    }
    if spec.model_dim < dims.required {
        return Err(SynthError::Infeasible(format!(
            "model_dim {} below the {} dimensions the construction needs",
            spec.model_dim, dims.required
        )));
    }
    if spec.head_dim < cells.max(symbols) {
        return Err(SynthError::Infeasible(format!(
            "head_dim {} cannot hold {} cells and {} symbols orthogonally",
            spec.head_dim, cells, symbols
        )));
    }

    let c = spec.model_dim;
    let hd = spec.head_dim;
    let v = spec.vocab_size;
    let p = recipe.concentration;
    // Softmax over at most max_seq_len positions: a logit gap of
    // ln(p/(1-p) * (n-1)) yields mass p against n-1 zero-logit competitors.
    let gap = (p / (1.0 - p) * (spec.max_seq_len - 1) as f64).ln() + GAP_MARGIN;
    // Attention divides by sqrt(head_dim); pre-scale so the gap survives.
    let gamma = gap * (hd as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Uniform::new_inclusive(-NOISE_SCALE, NOISE_SCALE);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| noise.sample(&mut rng)).collect() };

    // Token embeddings: noise plus the structured one-hots.
    let mut token_embed = draw(v * c);
    for id in 0..v {
        let row = &mut token_embed[id * c..(id + 1) * c];
        match vocab.decode(id).expect("id within vocab") {
            TokenKind::Prefix | TokenKind::Eos => {}
            TokenKind::Query { cell } => {
                row[dims.qpos + cell] += 1.0;
                row[dims.m_query] += 1.0;
            }
            TokenKind::Symbol { symbol } => {
                row[dims.esym + symbol] += 1.0;
                row[dims.m_done] += 1.0;
            }
            TokenKind::Cell { cell, symbol } => {
                row[dims.cpos + cell] += 1.0;
                row[dims.csym + symbol] += 1.0;
            }
        }
    }
    let pos_embed = draw(spec.max_seq_len * c);

    let mut layers = Vec::with_capacity(spec.num_layers);
    for layer_1idx in 1..=spec.num_layers {
        let mut w_q = draw(c * c);
        let mut w_k = draw(c * c);
        let mut w_v = draw(c * c);
        let mut w_o = draw(c * c);
        let w_ff1 = draw(c * spec.ff_dim());
        let w_ff2 = draw(spec.ff_dim() * c);

        if relevance_layers.contains(&layer_1idx) {
            // Designated head 0 gets the pure analytic circuit: clear its
            // blocks, then wire query/key/value/output.
            clear_columns(&mut w_q, c, 0..hd);
            clear_columns(&mut w_k, c, 0..hd);
            clear_columns(&mut w_v, c, 0..hd);
            clear_rows(&mut w_o, c, 0..hd);
            for &cell in &recipe.planted_cells {
                w_q[(dims.qpos + cell) * c + cell] = gamma;
            }
            for cell in 0..cells {
                w_k[(dims.cpos + cell) * c + cell] = 1.0;
            }
            for s in 0..symbols {
                w_v[(dims.csym + s) * c + s] = 1.0;
                w_o[s * c + (dims.ret + s)] = 1.0;
            }
        }

        layers.push(LayerWeights {
            w_q: convert(w_q),
            w_k: convert(w_k),
            w_v: convert(w_v),
            w_o: convert(w_o),
            w_ff1: convert(w_ff1),
            w_ff2: convert(w_ff2),
        });
    }

    // Unembedding: symbol tokens read the retrieval subspace (rotated by one
    // symbol in corrupted mode), end-of-sequence reads the done marker.
    let mut unembed = draw(c * v);
    for s in 0..symbols {
        let read = match fidelity {
            AnswerFidelity::Faithful => s,
            AnswerFidelity::Corrupted => (s + 1) % symbols,
        };
        unembed[(dims.ret + read) * v + vocab.symbol_token(s)] += RETRIEVAL_GAIN;
    }
    unembed[dims.m_done * v + vocab.eos_token()] += EOS_GAIN;

    Model::from_parts(
        *spec,
        seed,
        layers,
        convert(token_embed),
        convert(pos_embed),
        convert(unembed),
    )
    .map_err(SynthError::from)
}

fn convert<T: Scalar>(xs: Vec<f64>) -> Vec<T> {
    xs.into_iter().map(T::from_f64).collect()
}

fn clear_columns(w: &mut [f64], c: usize, cols: std::ops::Range<usize>) {
    for row in 0..c {
        for col in cols.clone() {
            w[row * c + col] = 0.0;
        }
    }
}

fn clear_rows(w: &mut [f64], c: usize, rows: std::ops::Range<usize>) {
    for row in rows {
        for col in 0..c {
            w[row * c + col] = 0.0;
        }
    }
}

/// Measures designated-head attention mass from the query row onto one cell.
struct ConcentrationSink {
    relevance_engine_layers: BTreeSet<usize>,
    query_row: usize,
    target_cell: usize,
    min_mass: f64,
}

impl<T: Scalar> AttentionSink<T> for ConcentrationSink {
    fn prefill_map(&mut self, layer: usize, head: usize, n: usize, map: &[T]) -> Result<(), SinkError> {
        if head == 0 && self.relevance_engine_layers.contains(&layer) {
            let mass = map[self.query_row * n + self.target_cell].to_f64_value();
            if mass < self.min_mass {
                self.min_mass = mass;
            }
        }
        Ok(())
    }

    fn decode_vec(&mut self, _: usize, _: usize, _: usize, _: &[T]) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Empirical soundness check run on every built model before it is used:
/// probe a few planted cells and require designated-head mass of at least
/// `concentration - 0.02` in every relevance layer.
fn self_check<T: Scalar>(
    model: &Model<T>,
    recipe: &PlantedRecipe,
    relevance_layers: &BTreeSet<usize>,
) -> Result<(), SynthError> {
    let vocab = recipe.vocab();
    let cells = vocab.cells();
    let planted: Vec<usize> = recipe.planted_cells.iter().copied().collect();
    let probes: Vec<usize> = if planted.len() <= 4 {
        planted
    } else {
        let last = planted.len() - 1;
        vec![planted[0], planted[last / 3], planted[2 * last / 3], planted[last]]
    };
    let engine_layers: BTreeSet<usize> = relevance_layers.iter().map(|&l| l - 1).collect();

    for (i, &cell) in probes.iter().enumerate() {
        let mut token_ids: Vec<usize> = (0..cells)
            .map(|cc| vocab.cell_token(cc, (cc + i) % vocab.symbols))
            .collect();
        token_ids.push(vocab.prefix_token());
        token_ids.push(vocab.query_token(cell));
        let layout = TokenLayout::new(cells, 2, token_ids).expect("probe layout is well-formed");

        let mut sink = ConcentrationSink {
            relevance_engine_layers: engine_layers.clone(),
            query_row: layout.last_prompt_pos(),
            target_cell: cell,
            min_mass: f64::INFINITY,
        };
        model
            .prefill(&layout, &mut sink)
            .map_err(SynthError::from)?;
        let bound = recipe.concentration - 0.02;
        if sink.min_mass < bound {
            return Err(SynthError::Infeasible(format!(
                "self-check: designated attention mass {:.4} on cell {cell} below {bound:.4}",
                sink.min_mass
            )));
        }
    }
    Ok(())
}
