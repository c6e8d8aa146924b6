//! Prefill, KV-cached decode, greedy generation, and teacher-forced scoring.

use super::model::Model;
use super::sink::AttentionSink;
use super::{softmax, softmax_in_place, EngineError, GenerationResult, TokenLayout};
use crate::scalar::Scalar;

/// Per-layer key/value rows retained for decoding.
///
/// After a mid-stack prune at layer `k`, layers `>= k` hold entries only for
/// retained positions while layers `< k` hold every position. Positions are
/// original sequence indices and stay strictly increasing.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    layers: Vec<LayerCache<T>>,
    n_visual: usize,
    n_prompt: usize,
    next_position: usize,
    decode_steps: usize,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    positions: Vec<usize>,
    k_rows: Vec<T>,
    v_rows: Vec<T>,
}

impl<T: Scalar> KvCache<T> {
    fn new(num_layers: usize, n_visual: usize, n_prompt: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| LayerCache {
                    positions: Vec::new(),
                    k_rows: Vec::new(),
                    v_rows: Vec::new(),
                })
                .collect(),
            n_visual,
            n_prompt,
            next_position: 0,
            decode_steps: 0,
        }
    }

    /// Original position indices retained at a layer.
    pub fn layer_positions(&self, layer: usize) -> &[usize] {
        &self.layers[layer].positions
    }

    /// Number of retained entries at a layer.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].positions.len()
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_prompt(&self) -> usize {
        self.n_prompt
    }

    /// Original-index length of the sequence seen so far (pruned or not).
    pub fn sequence_len(&self) -> usize {
        self.next_position
    }

    pub fn decode_steps(&self) -> usize {
        self.decode_steps
    }

    fn push_row(&mut self, layer: usize, position: usize, k: &[T], v: &[T]) {
        let lc = &mut self.layers[layer];
        debug_assert!(lc.positions.last().is_none_or(|&p| p < position));
        lc.positions.push(position);
        lc.k_rows.extend_from_slice(k);
        lc.v_rows.extend_from_slice(v);
    }
}

/// Resolves a captured attention row into the kept visual-index set.
pub type KeptResolver<'a> = Box<dyn FnOnce(&[f64]) -> Result<Vec<usize>, String> + 'a>;

/// How a forward pass decides which visual tokens survive the cut.
pub enum PrunePlan<'a> {
    /// No pruning.
    None,
    /// Kept set resolved before the pass begins.
    Fixed {
        /// Dropped tokens do not participate in this layer's attention
        /// (0-indexed).
        cut_layer: usize,
        /// Ascending visual indices to keep.
        kept_visual: &'a [usize],
    },
    /// Kept set resolved mid-pass from the last prompt token's attention row
    /// (summed over heads) captured at `source_layer`. This is how
    /// single-layer ranking baselines prune within one pass: layers up to
    /// the cut run with every token, the captured row is handed to
    /// `resolve`, and the returned kept set applies from `cut_layer` on.
    DeferredLastPromptRow {
        source_layer: usize,
        cut_layer: usize,
        resolve: KeptResolver<'a>,
    },
}

/// Outcome of a prefill pass.
pub struct PrefillRun<T> {
    pub cache: KvCache<T>,
    /// Logits of the final position.
    pub last_logits: Vec<T>,
    /// Final hidden rows for all surviving positions.
    final_hidden: Vec<Vec<T>>,
    /// Original position index of each surviving row, ascending.
    positions: Vec<usize>,
    /// Sequence length each layer's attention ran at; input to the cost model.
    pub layer_lens: Vec<usize>,
}

impl<T: Scalar> PrefillRun<T> {
    /// Logits at an original position, if that position survived pruning.
    pub fn logits_at(&self, model: &Model<T>, position: usize) -> Option<Vec<T>> {
        let row = self.positions.iter().position(|&p| p == position)?;
        Some(model.logits_for(&self.final_hidden[row]))
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

/// One decode step's output.
pub struct DecodeStep<T> {
    pub logits: Vec<T>,
    /// Attention length per layer (retained history plus the new token).
    pub ctx_lens: Vec<usize>,
}

/// Generation output plus the per-layer lengths the cost model needs.
pub struct GenerationRun<T> {
    pub result: GenerationResult,
    pub prefill_lens: Vec<usize>,
    /// Per decode step, per layer attention length.
    pub decode_ctx_lens: Vec<Vec<usize>>,
    /// Full vocabulary distribution at each step, when requested.
    pub distributions: Option<Vec<Vec<T>>>,
}

/// Teacher-forced scoring output.
pub struct TeacherForcedRun<T> {
    /// Probability of each forced token given all preceding tokens.
    pub probs: Vec<T>,
    pub prefill_lens: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// Parallel forward pass over the whole layout, populating a KV cache
    /// and streaming every (layer, head) attention map to `sink`.
    pub fn prefill(
        &self,
        layout: &TokenLayout,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<PrefillRun<T>, EngineError> {
        self.prefill_with(layout, PrunePlan::None, sink)
    }

    /// Prefill with an optional mid-stack visual-token prune.
    pub fn prefill_with(
        &self,
        layout: &TokenLayout,
        plan: PrunePlan<'_>,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<PrefillRun<T>, EngineError> {
        self.forward_sequence(
            &layout.token_ids,
            layout.n_visual,
            layout.n_prompt,
            plan,
            sink,
        )
    }

    fn forward_sequence(
        &self,
        token_ids: &[usize],
        n_visual: usize,
        n_prompt: usize,
        plan: PrunePlan<'_>,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<PrefillRun<T>, EngineError> {
        let spec = *self.spec();
        let n0 = token_ids.len();
        if n0 > spec.max_seq_len {
            return Err(EngineError::Capacity {
                needed: n0,
                max: spec.max_seq_len,
            });
        }

        // Split the plan into a capture request and a cut action so the key
        // layers can be checked up front.
        let mut capture_layer: Option<usize> = None;
        let mut cut: Option<(usize, CutAction)> = None;
        match plan {
            PrunePlan::None => {}
            PrunePlan::Fixed {
                cut_layer,
                kept_visual,
            } => {
                check_cut_layer(cut_layer, spec.num_layers)?;
                validate_kept(kept_visual, n_visual)?;
                cut = Some((cut_layer, CutAction::Fixed(kept_visual.to_vec())));
            }
            PrunePlan::DeferredLastPromptRow {
                source_layer,
                cut_layer,
                resolve,
            } => {
                check_cut_layer(cut_layer, spec.num_layers)?;
                if source_layer >= cut_layer {
                    return Err(EngineError::PruneSourceAfterCut {
                        source_layer,
                        cut: cut_layer,
                    });
                }
                capture_layer = Some(source_layer);
                cut = Some((cut_layer, CutAction::Deferred(resolve)));
            }
        }

        let c = spec.model_dim;
        let hd = spec.head_dim;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let last_prompt_pos = n_visual + n_prompt - 1;

        let mut hidden: Vec<Vec<T>> = token_ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| self.embed(id, pos))
            .collect::<Result<_, _>>()?;
        let mut positions: Vec<usize> = (0..n0).collect();

        let mut cache = KvCache::new(spec.num_layers, n_visual, n_prompt);
        cache.next_position = n0;
        let mut layer_lens = Vec::with_capacity(spec.num_layers);
        let mut captured_row: Option<Vec<f64>> = None;

        for layer_idx in 0..spec.num_layers {
            if let Some((cut_layer, _)) = &cut {
                if *cut_layer == layer_idx {
                    let (_, resolver) = cut.take().expect("cut checked above");
                    let kept = match resolver {
                        CutAction::Fixed(kept) => kept,
                        CutAction::Deferred(resolve) => {
                            let row = captured_row
                                .take()
                                .expect("source_layer < cut_layer guarantees capture");
                            let kept = resolve(&row)
                                .map_err(EngineError::PruneResolution)?;
                            validate_kept(&kept, n_visual)?;
                            kept
                        }
                    };
                    apply_cut(&mut hidden, &mut positions, &kept, n_visual);
                }
            }

            let n = hidden.len();
            layer_lens.push(n);
            let weights = self.layer(layer_idx);
            let q = mat_rows(&hidden, &weights.w_q, c, c);
            let k = mat_rows(&hidden, &weights.w_k, c, c);
            let v = mat_rows(&hidden, &weights.w_v, c, c);

            let mut ctx = vec![vec![T::zero(); c]; n];
            let mut map = vec![T::zero(); n * n];
            for head in 0..spec.num_heads {
                let off = head * hd;
                map.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..n {
                    let qi = &q[i][off..off + hd];
                    let row = &mut map[i * n..i * n + i + 1];
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = dot(qi, &k[j][off..off + hd]) * scale;
                    }
                    softmax_in_place(row);
                }
                sink.prefill_map(layer_idx, head, n, &map)?;

                if capture_layer == Some(layer_idx) {
                    // Last prompt token's attention over visual columns,
                    // summed across heads. Runs pre-cut, so row index equals
                    // original position.
                    let row = &map[last_prompt_pos * n..last_prompt_pos * n + n_visual];
                    let acc = captured_row.get_or_insert_with(|| vec![0.0; n_visual]);
                    for (a, &x) in acc.iter_mut().zip(row) {
                        *a += x.to_f64_value();
                    }
                }

                for i in 0..n {
                    let out = &mut ctx[i][off..off + hd];
                    for j in 0..=i {
                        let a = map[i * n + j];
                        for (o, &vv) in out.iter_mut().zip(&v[j][off..off + hd]) {
                            *o += a * vv;
                        }
                    }
                }
            }

            for (i, row) in hidden.iter_mut().enumerate() {
                let attn_out = vec_mat(&ctx[i], &weights.w_o, c, c);
                add_assign(row, &attn_out);
                let ff = feed_forward(row, weights, c, spec.ff_dim());
                add_assign(row, &ff);
            }

            for (i, &pos) in positions.iter().enumerate() {
                cache.push_row(layer_idx, pos, &k[i], &v[i]);
            }
        }

        let last_row = positions
            .iter()
            .position(|&p| p == n0 - 1)
            .expect("final position is never pruned");
        let last_logits = self.logits_for(&hidden[last_row]);

        Ok(PrefillRun {
            cache,
            last_logits,
            final_hidden: hidden,
            positions,
            layer_lens,
        })
    }

    /// Advance one token against the cache.
    ///
    /// The new token's attention vector over all retained positions (itself
    /// included) is delivered per layer and head; the cache is extended by
    /// one position in every layer.
    pub fn decode_step(
        &self,
        cache: &mut KvCache<T>,
        token_id: usize,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<DecodeStep<T>, EngineError> {
        let spec = *self.spec();
        if cache.next_position >= spec.max_seq_len {
            return Err(EngineError::Capacity {
                needed: cache.next_position + 1,
                max: spec.max_seq_len,
            });
        }
        let c = spec.model_dim;
        let hd = spec.head_dim;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let position = cache.next_position;
        let step = cache.decode_steps;

        let mut x = self.embed(token_id, position)?;
        let mut ctx_lens = Vec::with_capacity(spec.num_layers);

        for layer_idx in 0..spec.num_layers {
            let weights = self.layer(layer_idx);
            let q = vec_mat(&x, &weights.w_q, c, c);
            let k_new = vec_mat(&x, &weights.w_k, c, c);
            let v_new = vec_mat(&x, &weights.w_v, c, c);

            let hist = cache.layer_len(layer_idx);
            let total = hist + 1;
            ctx_lens.push(total);

            let mut ctx = vec![T::zero(); c];
            let mut attn = vec![T::zero(); total];
            for head in 0..spec.num_heads {
                let off = head * hd;
                let qh = &q[off..off + hd];
                for (j, slot) in attn[..hist].iter_mut().enumerate() {
                    let krow = &cache.layers[layer_idx].k_rows[j * c + off..j * c + off + hd];
                    *slot = dot(qh, krow) * scale;
                }
                attn[hist] = dot(qh, &k_new[off..off + hd]) * scale;
                softmax_in_place(&mut attn);
                sink.decode_vec(step, layer_idx, head, &attn)?;

                let out = &mut ctx[off..off + hd];
                for (j, &a) in attn[..hist].iter().enumerate() {
                    let vrow = &cache.layers[layer_idx].v_rows[j * c + off..j * c + off + hd];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += a * vv;
                    }
                }
                let a = attn[hist];
                for (o, &vv) in out.iter_mut().zip(&v_new[off..off + hd]) {
                    *o += a * vv;
                }
            }

            let attn_out = vec_mat(&ctx, &weights.w_o, c, c);
            add_assign(&mut x, &attn_out);
            let ff = feed_forward(&x, weights, c, spec.ff_dim());
            add_assign(&mut x, &ff);

            cache.push_row(layer_idx, position, &k_new, &v_new);
        }

        cache.next_position += 1;
        cache.decode_steps += 1;
        Ok(DecodeStep {
            logits: self.logits_for(&x),
            ctx_lens,
        })
    }

    /// Greedy decoding until the reserved end-of-sequence id or `max_new`.
    pub fn generate(
        &self,
        layout: &TokenLayout,
        max_new: usize,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<GenerationRun<T>, EngineError> {
        self.generate_with(layout, max_new, PrunePlan::None, false, sink)
    }

    /// Generation with an optional prune plan and optional capture of the
    /// full per-step vocabulary distributions.
    pub fn generate_with(
        &self,
        layout: &TokenLayout,
        max_new: usize,
        plan: PrunePlan<'_>,
        record_distributions: bool,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<GenerationRun<T>, EngineError> {
        assert!(max_new >= 1, "max_new must be >= 1");
        let prefill = self.prefill_with(layout, plan, sink)?;
        let mut cache = prefill.cache;
        let prefill_lens = prefill.layer_lens;
        let eos = self.eos_id();

        let mut generated_ids = Vec::new();
        let mut step_probs = Vec::new();
        let mut decode_ctx_lens = Vec::new();
        let mut distributions = record_distributions.then(Vec::new);

        let mut logits = prefill.last_logits;
        loop {
            let probs = softmax(&logits);
            let token = argmax(&probs);
            generated_ids.push(token);
            step_probs.push(probs[token].to_f64_value());
            if let Some(d) = distributions.as_mut() {
                d.push(probs);
            }
            if token == eos || generated_ids.len() == max_new {
                break;
            }
            let step = self.decode_step(&mut cache, token, sink)?;
            decode_ctx_lens.push(step.ctx_lens);
            logits = step.logits;
        }

        Ok(GenerationRun {
            result: GenerationResult {
                generated_ids,
                step_probs,
            },
            prefill_lens,
            decode_ctx_lens,
            distributions,
        })
    }

    /// Score a fixed token sequence in one parallel pass: one prefill over
    /// `[visual || prompt || forced]` returning, per forced position, the
    /// model's probability of that token given everything before it.
    pub fn teacher_forced_probs(
        &self,
        layout: &TokenLayout,
        forced_ids: &[usize],
        plan: PrunePlan<'_>,
        sink: &mut dyn AttentionSink<T>,
    ) -> Result<TeacherForcedRun<T>, EngineError> {
        if forced_ids.is_empty() {
            return Err(EngineError::InvalidLayout("forced_ids must be nonempty".into()));
        }
        let mut tokens = layout.token_ids.clone();
        tokens.extend_from_slice(forced_ids);
        let run = self.forward_sequence(&tokens, layout.n_visual, layout.n_prompt, plan, sink)?;

        let base = layout.len();
        let probs = forced_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let logits = run
                    .logits_at(self, base + i - 1)
                    .expect("prompt and forced positions are never pruned");
                softmax(&logits)[id]
            })
            .collect();
        Ok(TeacherForcedRun {
            probs,
            prefill_lens: run.layer_lens,
        })
    }
}

enum CutAction<'a> {
    Fixed(Vec<usize>),
    Deferred(KeptResolver<'a>),
}

fn check_cut_layer(cut: usize, num_layers: usize) -> Result<(), EngineError> {
    if cut >= num_layers {
        return Err(EngineError::PruneLayerOutOfRange {
            layer: cut,
            num_layers,
        });
    }
    Ok(())
}

fn validate_kept(kept: &[usize], n_visual: usize) -> Result<(), EngineError> {
    if kept.is_empty() {
        return Err(EngineError::EmptyKeptSet);
    }
    for window in kept.windows(2) {
        if window[0] >= window[1] {
            return Err(EngineError::InvalidLayout(
                "kept set must be strictly ascending".into(),
            ));
        }
    }
    if let Some(&max) = kept.last() {
        if max >= n_visual {
            return Err(EngineError::KeptIndexOutOfRange {
                index: max,
                n_visual,
            });
        }
    }
    Ok(())
}

/// Drop hidden rows of visual positions outside the kept set. Prompt and
/// generated positions always survive; relative order is preserved.
fn apply_cut<T>(hidden: &mut Vec<Vec<T>>, positions: &mut Vec<usize>, kept: &[usize], n_visual: usize) {
    let mut keep_mask = vec![false; n_visual];
    for &k in kept {
        keep_mask[k] = true;
    }
    let mut rows = std::mem::take(hidden).into_iter();
    let mut new_hidden = Vec::with_capacity(positions.len());
    let mut new_positions = Vec::with_capacity(positions.len());
    for &pos in positions.iter() {
        let row = rows.next().expect("hidden and positions stay in lockstep");
        if pos >= n_visual || keep_mask[pos] {
            new_hidden.push(row);
            new_positions.push(pos);
        }
    }
    *hidden = new_hidden;
    *positions = new_positions;
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn add_assign<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// `rows x in_dim` times `in_dim x out_dim`, row by row.
fn mat_rows<T: Scalar>(rows: &[Vec<T>], w: &[T], in_dim: usize, out_dim: usize) -> Vec<Vec<T>> {
    rows.iter().map(|r| vec_mat(r, w, in_dim, out_dim)).collect()
}

fn vec_mat<T: Scalar>(x: &[T], w: &[T], in_dim: usize, out_dim: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    let mut out = vec![T::zero(); out_dim];
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn feed_forward<T: Scalar>(x: &[T], weights: &super::LayerWeights<T>, c: usize, ff: usize) -> Vec<T> {
    let mut mid = vec_mat(x, &weights.w_ff1, c, ff);
    for m in mid.iter_mut() {
        if *m < T::zero() {
            *m = T::zero();
        }
    }
    vec_mat(&mid, &weights.w_ff2, ff, c)
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
