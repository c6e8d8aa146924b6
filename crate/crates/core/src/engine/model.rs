//! Model weights and deterministic construction.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, ModelSpec};
use crate::scalar::Scalar;

/// One transformer block's weights, row-major `[in_dim x out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
    /// `model_dim x ff_dim`
    pub w_ff1: Vec<T>,
    /// `ff_dim x model_dim`
    pub w_ff2: Vec<T>,
}

/// Immutable transformer weights. Safe to share across concurrent
/// inferences; all per-run state lives in caches and sinks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    construction_seed: u64,
    pub(crate) layers: Vec<LayerWeights<T>>,
    /// `vocab_size x model_dim`
    pub(crate) token_embed: Vec<T>,
    /// `max_seq_len x model_dim`
    pub(crate) pos_embed: Vec<T>,
    /// `model_dim x vocab_size`
    pub(crate) unembed: Vec<T>,
}

/// How `build_model` fills the weight arrays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightRecipe {
    /// Every entry drawn uniformly from `[-scale, scale]`.
    Uniform { scale: f64 },
}

/// Deterministically construct a model: identical `(spec, seed, recipe)`
/// always yields bit-identical weights.
pub fn build_model<T: Scalar>(
    spec: &ModelSpec,
    seed: u64,
    recipe: WeightRecipe,
) -> Result<Model<T>, EngineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let WeightRecipe::Uniform { scale } = recipe;
    if !scale.is_finite() || scale < 0.0 {
        return Err(EngineError::InvalidSpec(format!(
            "recipe scale {scale} must be finite and non-negative"
        )));
    }
    let dist = Uniform::new_inclusive(-scale, scale);
    let mut draw = |len: usize| -> Vec<T> {
        (0..len).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
    };

    let c = spec.model_dim;
    let ff = spec.ff_dim();
    let layers = (0..spec.num_layers)
        .map(|_| LayerWeights {
            w_q: draw(c * c),
            w_k: draw(c * c),
            w_v: draw(c * c),
            w_o: draw(c * c),
            w_ff1: draw(c * ff),
            w_ff2: draw(ff * c),
        })
        .collect();
    let token_embed = draw(spec.vocab_size * c);
    let pos_embed = draw(spec.max_seq_len * c);
    let unembed = draw(c * spec.vocab_size);

    Model::from_parts(*spec, seed, layers, token_embed, pos_embed, unembed)
}

impl<T: Scalar> Model<T> {
    /// Assemble a model from explicit weight arrays, validating shapes and
    /// finiteness. This is the entry point for analytic constructions.
    pub fn from_parts(
        spec: ModelSpec,
        construction_seed: u64,
        layers: Vec<LayerWeights<T>>,
        token_embed: Vec<T>,
        pos_embed: Vec<T>,
        unembed: Vec<T>,
    ) -> Result<Self, EngineError> {
        spec.validate()?;
        let c = spec.model_dim;
        let ff = spec.ff_dim();
        if layers.len() != spec.num_layers {
            return Err(EngineError::InvalidSpec(format!(
                "expected {} layers, got {}",
                spec.num_layers,
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            let shapes = [
                ("w_q", l.w_q.len(), c * c),
                ("w_k", l.w_k.len(), c * c),
                ("w_v", l.w_v.len(), c * c),
                ("w_o", l.w_o.len(), c * c),
                ("w_ff1", l.w_ff1.len(), c * ff),
                ("w_ff2", l.w_ff2.len(), ff * c),
            ];
            for (name, got, want) in shapes {
                if got != want {
                    return Err(EngineError::InvalidSpec(format!(
                        "layer {i} {name}: expected {want} entries, got {got}"
                    )));
                }
            }
        }
        if token_embed.len() != spec.vocab_size * c {
            return Err(EngineError::InvalidSpec("token_embed shape".into()));
        }
        if pos_embed.len() != spec.max_seq_len * c {
            return Err(EngineError::InvalidSpec("pos_embed shape".into()));
        }
        if unembed.len() != c * spec.vocab_size {
            return Err(EngineError::InvalidSpec("unembed shape".into()));
        }

        let model = Self {
            spec,
            construction_seed,
            layers,
            token_embed,
            pos_embed,
            unembed,
        };
        model.check_finite()?;
        Ok(model)
    }

    fn check_finite(&self) -> Result<(), EngineError> {
        let arrays: Vec<(&str, &[T])> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (i, "w_q", l.w_q.as_slice()),
                    (i, "w_k", l.w_k.as_slice()),
                    (i, "w_v", l.w_v.as_slice()),
                    (i, "w_o", l.w_o.as_slice()),
                    (i, "w_ff1", l.w_ff1.as_slice()),
                    (i, "w_ff2", l.w_ff2.as_slice()),
                ]
            })
            .map(|(_, name, arr)| (name, arr))
            .chain([
                ("token_embed", self.token_embed.as_slice()),
                ("pos_embed", self.pos_embed.as_slice()),
                ("unembed", self.unembed.as_slice()),
            ])
            .collect();
        for (name, arr) in arrays {
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(EngineError::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn construction_seed(&self) -> u64 {
        self.construction_seed
    }

    pub fn eos_id(&self) -> usize {
        self.spec.eos_id()
    }

    pub fn layer(&self, i: usize) -> &LayerWeights<T> {
        &self.layers[i]
    }

    /// Raw `vocab_size x model_dim` token embedding table.
    pub fn token_embedding(&self) -> &[T] {
        &self.token_embed
    }

    /// Raw `max_seq_len x model_dim` position embedding table.
    pub fn position_embedding(&self) -> &[T] {
        &self.pos_embed
    }

    /// Raw `model_dim x vocab_size` unembedding matrix.
    pub fn unembedding(&self) -> &[T] {
        &self.unembed
    }

    /// Token embedding row plus absolute position embedding row.
    pub(crate) fn embed(&self, token_id: usize, position: usize) -> Result<Vec<T>, EngineError> {
        if token_id >= self.spec.vocab_size {
            return Err(EngineError::TokenOutOfRange {
                id: token_id,
                vocab: self.spec.vocab_size,
            });
        }
        if position >= self.spec.max_seq_len {
            return Err(EngineError::Capacity {
                needed: position + 1,
                max: self.spec.max_seq_len,
            });
        }
        let c = self.spec.model_dim;
        let tok = &self.token_embed[token_id * c..(token_id + 1) * c];
        let pos = &self.pos_embed[position * c..(position + 1) * c];
        Ok(tok.iter().zip(pos).map(|(&a, &b)| a + b).collect())
    }

    /// Unembedding of one hidden row into vocabulary logits.
    pub fn logits_for(&self, hidden: &[T]) -> Vec<T> {
        let c = self.spec.model_dim;
        let v = self.spec.vocab_size;
        debug_assert_eq!(hidden.len(), c);
        let mut out = vec![T::zero(); v];
        for (i, &h) in hidden.iter().enumerate() {
            let row = &self.unembed[i * v..(i + 1) * v];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += h * w;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            vocab_size: 16,
            max_seq_len: 32,
        }
    }

    #[test]
    fn construction_is_deterministic_and_finite() {
        let spec = toy_spec();
        let a: Model<f64> = build_model(&spec, 0, WeightRecipe::Uniform { scale: 0.5 }).unwrap();
        let b: Model<f64> = build_model(&spec, 0, WeightRecipe::Uniform { scale: 0.5 }).unwrap();
        assert_eq!(a, b, "same (spec, seed, recipe) must be bit-identical");
        assert!(a.layers[0].w_q.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn different_seeds_differ_elementwise_somewhere() {
        let spec = toy_spec();
        let a: Model<f64> = build_model(&spec, 0, WeightRecipe::Uniform { scale: 0.5 }).unwrap();
        let b: Model<f64> = build_model(&spec, 1, WeightRecipe::Uniform { scale: 0.5 }).unwrap();
        let differs = a
            .layers[0]
            .w_q
            .iter()
            .zip(&b.layers[0].w_q)
            .any(|(x, y)| x != y);
        assert!(differs, "seed 0 and seed 1 should give different weights");
    }

    #[test]
    fn invalid_spec_is_a_construction_error() {
        let mut spec = toy_spec();
        spec.model_dim = 7;
        let r: Result<Model<f64>, _> = build_model(&spec, 0, WeightRecipe::Uniform { scale: 0.5 });
        assert!(r.is_err());
    }

    #[test]
    fn models_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Model<f64>>();
        assert_send_sync::<Model<f32>>();
    }

    #[test]
    fn embed_checks_bounds() {
        let spec = toy_spec();
        let m: Model<f64> = build_model(&spec, 0, WeightRecipe::Uniform { scale: 0.5 }).unwrap();
        assert!(m.embed(99, 0).is_err());
        assert!(m.embed(0, 99).is_err());
        assert_eq!(m.embed(0, 0).unwrap().len(), 8);
    }
}
