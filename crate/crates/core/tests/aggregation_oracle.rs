//! Streaming aggregation against a brute-force oracle that materializes the
//! full attention tensor and sums it directly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cascade_core::aggregate::{AttentionTrace, TraceSink};
use cascade_core::engine::{
    build_model, AttentionSink, ModelSpec, SinkError, TokenLayout, WeightRecipe,
};
use cascade_core::Model64;

/// Oracle sink: stores every map and vector whole, the thing the streaming
/// trace exists to avoid.
#[derive(Default)]
struct Materialize {
    prefill: Vec<(usize, usize, usize, Vec<f64>)>,
    decode: Vec<(usize, usize, usize, Vec<f64>)>,
}

impl AttentionSink<f64> for Materialize {
    fn prefill_map(&mut self, layer: usize, head: usize, n: usize, map: &[f64]) -> Result<(), SinkError> {
        self.prefill.push((layer, head, n, map.to_vec()));
        Ok(())
    }

    fn decode_vec(&mut self, step: usize, layer: usize, head: usize, attn: &[f64]) -> Result<(), SinkError> {
        self.decode.push((step, layer, head, attn.to_vec()));
        Ok(())
    }
}

impl Materialize {
    /// Direct summation over the whole stored tensor, restricted to layers
    /// that pass the filter.
    fn brute_force_importance(
        &self,
        n_visual: usize,
        include_layer: impl Fn(usize) -> bool,
    ) -> Vec<f64> {
        let mut total = vec![0.0; n_visual];
        for (layer, _head, n, map) in &self.prefill {
            if !include_layer(*layer) {
                continue;
            }
            for row in n_visual..*n {
                for col in 0..n_visual {
                    total[col] += map[row * n + col];
                }
            }
        }
        for (_step, layer, _head, attn) in &self.decode {
            if !include_layer(*layer) {
                continue;
            }
            for col in 0..n_visual {
                total[col] += attn[col];
            }
        }
        total
    }
}

struct Case {
    model: Model64,
    layout: TokenLayout,
    max_new: usize,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..=4);
    let head_dim = rng.gen_range(2..=4);
    let spec = ModelSpec {
        num_layers: rng.gen_range(1..=4),
        num_heads: heads,
        model_dim: heads * head_dim,
        head_dim,
        vocab_size: rng.gen_range(8..=24),
        max_seq_len: 80,
    };
    let model = build_model(&spec, seed, WeightRecipe::Uniform { scale: 0.4 }).unwrap();
    let n_visual = rng.gen_range(1..=48);
    let n_prompt = rng.gen_range(1..=16);
    let ids = (0..n_visual + n_prompt)
        .map(|_| rng.gen_range(0..spec.vocab_size - 1))
        .collect();
    Case {
        model,
        layout: TokenLayout::new(n_visual, n_prompt, ids).unwrap(),
        max_new: rng.gen_range(1..=8),
    }
}

#[test]
fn streaming_finalize_matches_brute_force_on_fifty_models() {
    for seed in 0..50 {
        let case = random_case(seed);
        let mut trace = AttentionTrace::<f64>::new(case.layout.n_visual, case.layout.n_prompt);
        let mut oracle = Materialize::default();
        {
            let mut sink = TraceSink::new(&mut trace);
            let mut tee = cascade_core::engine::TeeSink(&mut sink, &mut oracle);
            case.model.generate(&case.layout, case.max_new, &mut tee).unwrap();
        }
        let streaming = trace.finalize().unwrap();
        let brute = oracle.brute_force_importance(case.layout.n_visual, |_| true);
        for (s, b) in streaming.iter().zip(&brute) {
            assert!((s - b).abs() < 1e-9, "seed {seed}: streaming {s} vs brute {b}");
        }
    }
}

#[test]
fn layer_filter_matches_filtered_brute_force() {
    let case = random_case(1234);
    let layers = case.model.spec().num_layers;
    let keep = 0..(layers / 2).max(1);

    let mut trace = AttentionTrace::<f64>::new(case.layout.n_visual, case.layout.n_prompt)
        .with_layer_filter(keep.clone().collect());
    let mut oracle = Materialize::default();
    {
        let mut sink = TraceSink::new(&mut trace);
        let mut tee = cascade_core::engine::TeeSink(&mut sink, &mut oracle);
        case.model.generate(&case.layout, case.max_new, &mut tee).unwrap();
    }
    let streaming = trace.finalize().unwrap();
    let brute = oracle.brute_force_importance(case.layout.n_visual, |l| keep.contains(&l));
    for (s, b) in streaming.iter().zip(&brute) {
        assert!((s - b).abs() < 1e-9);
    }
}

#[test]
fn accumulation_is_order_independent() {
    let case = random_case(999);
    let n_visual = case.layout.n_visual;
    let n_prompt = case.layout.n_prompt;
    let mut oracle = Materialize::default();
    case.model.generate(&case.layout, case.max_new, &mut oracle).unwrap();

    let mut forward = AttentionTrace::<f64>::new(n_visual, n_prompt);
    for (layer, head, n, map) in &oracle.prefill {
        forward.accumulate_prefill(map, *n, *layer, *head).unwrap();
    }
    for (step, layer, head, attn) in &oracle.decode {
        forward.accumulate_decode(attn, *step, *layer, *head).unwrap();
    }

    let mut shuffled = AttentionTrace::<f64>::new(n_visual, n_prompt);
    let mut prefill = oracle.prefill.clone();
    let mut decode = oracle.decode.clone();
    prefill.reverse();
    decode.reverse();
    for (layer, head, n, map) in &prefill {
        shuffled.accumulate_prefill(map, *n, *layer, *head).unwrap();
    }
    for (step, layer, head, attn) in &decode {
        shuffled.accumulate_decode(attn, *step, *layer, *head).unwrap();
    }

    let a = forward.finalize().unwrap();
    let b = shuffled.finalize().unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn accumulator_bounds_hold() {
    // Each prefill row sums to 1, so every accumulator entry is bounded by
    // rows x layers x heads.
    let case = random_case(31);
    let spec = case.model.spec();
    let mut trace = AttentionTrace::<f64>::new(case.layout.n_visual, case.layout.n_prompt);
    {
        let mut sink = TraceSink::new(&mut trace);
        case.model.generate(&case.layout, case.max_new, &mut sink).unwrap();
    }
    let prefill_bound = (case.layout.n_prompt * spec.num_layers * spec.num_heads) as f64;
    for &x in trace.a_prefill() {
        assert!(x >= 0.0 && x <= prefill_bound + 1e-9);
    }
    let decode_bound = (trace.decode_steps_seen() * spec.num_layers * spec.num_heads) as f64;
    for &x in trace.a_decode() {
        assert!(x >= 0.0 && x <= decode_bound + 1e-9);
    }
}
