//! Rankings, retention schedules, and kept-index sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AttentionSink, SinkError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("importance vector contains NaN at index {0}")]
    NanImportance(usize),
    #[error("ranking is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("retain fraction {0} outside (0, 1]")]
    InvalidRetain(f64),
    #[error("prune layer {0} must be >= 1 (1-indexed)")]
    InvalidLayer(usize),
    #[error("single-layer row for layer {0} was not captured")]
    LayerNotCaptured(usize),
}

/// Where a ranking came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingSource {
    /// Small model's attention aggregated over all layers, heads, and stages.
    Aggregated,
    /// Last prompt token's attention at one early layer of the pruned model.
    FastvSingleLayer,
    /// Seeded uniform permutation; control baseline.
    Random,
    /// The large model's own full-pass aggregation; evaluation only.
    OracleLarge,
}

impl RankingSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            RankingSource::Aggregated => "aggregated",
            RankingSource::FastvSingleLayer => "fastv_single_layer",
            RankingSource::Random => "random",
            RankingSource::OracleLarge => "oracle_large",
        }
    }
}

impl std::str::FromStr for RankingSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aggregated" => Ok(RankingSource::Aggregated),
            "fastv_single_layer" => Ok(RankingSource::FastvSingleLayer),
            "random" => Ok(RankingSource::Random),
            "oracle_large" => Ok(RankingSource::OracleLarge),
            other => Err(format!("unknown ranking source '{other}'")),
        }
    }
}

/// A resolved pruning decision: ranking, cut layer, retention, kept set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDirective {
    pub source: RankingSource,
    /// Cut layer, 1-indexed as in command-line and docs: this many layers
    /// still see every token (numerically equal to the engine's 0-indexed
    /// cut layer).
    pub k: usize,
    #[serde(rename = "R")]
    pub retain: f64,
    pub ranking: Vec<usize>,
    /// Ascending kept visual indices; the top `max(1, round(R * N_I))` of
    /// the ranking.
    pub kept: Vec<usize>,
}

impl PruneDirective {
    /// Engine cut-layer index (0-indexed); same integer, different reading.
    pub fn engine_cut(&self) -> usize {
        self.k
    }
}

/// Indices in strictly descending importance; ties broken by lower index.
pub fn rank_tokens<T: Scalar>(importance: &[T]) -> Result<Vec<usize>, PruneError> {
    if let Some(i) = importance.iter().position(|x| x.is_nan()) {
        return Err(PruneError::NanImportance(i));
    }
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .expect("NaN ruled out above")
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// Number of tokens kept under retention `r`: round half up, never zero.
pub fn kept_count(n_visual: usize, retain: f64) -> usize {
    let rounded = (retain * n_visual as f64 + 0.5).floor() as usize;
    rounded.clamp(1, n_visual)
}

/// Resolve a ranking into a directive.
pub fn make_directive(
    ranking: Vec<usize>,
    retain: f64,
    k: usize,
    n_visual: usize,
    source: RankingSource,
) -> Result<PruneDirective, PruneError> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(PruneError::InvalidRetain(retain));
    }
    if k == 0 {
        return Err(PruneError::InvalidLayer(k));
    }
    if ranking.len() != n_visual {
        return Err(PruneError::NotAPermutation(n_visual));
    }
    let mut seen = vec![false; n_visual];
    for &i in &ranking {
        if i >= n_visual || seen[i] {
            return Err(PruneError::NotAPermutation(n_visual));
        }
        seen[i] = true;
    }
    let mut kept: Vec<usize> = ranking[..kept_count(n_visual, retain)].to_vec();
    kept.sort_unstable();
    Ok(PruneDirective {
        source,
        k,
        retain,
        ranking,
        kept,
    })
}

/// Average fraction of visual tokens alive across the stack when pruning to
/// fraction `retain` at 1-indexed layer `k` of an `num_layers`-layer model:
/// full tokens through layers `1..=k`, fraction `retain` afterwards.
pub fn avg_retention(num_layers: usize, k: usize, retain: f64) -> f64 {
    assert!(k >= 1 && k <= num_layers, "prune layer out of range");
    (k as f64 + (num_layers - k) as f64 * retain) / num_layers as f64
}

/// Capture of one layer's last-prompt-token attention row over visual
/// columns, summed across heads. Feeds the single-layer ranking baseline.
#[derive(Debug, Clone)]
pub struct SingleLayerCapture {
    pub layer: usize,
    pub row: Option<Vec<f64>>,
    n_visual: usize,
    last_prompt_pos: usize,
}

impl SingleLayerCapture {
    /// `layer` is 0-indexed engine numbering.
    pub fn new(layer: usize, n_visual: usize, n_prompt: usize) -> Self {
        Self {
            layer,
            row: None,
            n_visual,
            last_prompt_pos: n_visual + n_prompt - 1,
        }
    }
}

impl<T: Scalar> AttentionSink<T> for SingleLayerCapture {
    fn prefill_map(&mut self, layer: usize, _head: usize, n: usize, map: &[T]) -> Result<(), SinkError> {
        if layer != self.layer {
            return Ok(());
        }
        if self.last_prompt_pos >= n {
            return Err(SinkError(format!(
                "map of {n} positions lacks prompt row {}",
                self.last_prompt_pos
            )));
        }
        let row = &map[self.last_prompt_pos * n..self.last_prompt_pos * n + self.n_visual];
        let acc = self.row.get_or_insert_with(|| vec![0.0; self.n_visual]);
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x.to_f64_value();
        }
        Ok(())
    }

    fn decode_vec(&mut self, _: usize, _: usize, _: usize, _: &[T]) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Descending ranking from a captured single-layer row.
pub fn fastv_rank(capture: &SingleLayerCapture) -> Result<Vec<usize>, PruneError> {
    let row = capture
        .row
        .as_ref()
        .ok_or(PruneError::LayerNotCaptured(capture.layer))?;
    rank_tokens(row)
}

/// Seeded uniform permutation of `0..n_visual`.
pub fn random_rank(n_visual: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_visual).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_sorts_descending_with_index_tiebreak() {
        assert_eq!(rank_tokens(&[0.1, 0.9, 0.5]).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_tokens(&[0.5, 0.5]).unwrap(), vec![0, 1]);
        assert!(matches!(
            rank_tokens(&[0.1, f64::NAN]),
            Err(PruneError::NanImportance(1))
        ));
    }

    #[test]
    fn kept_count_rounds_half_up_with_floor_one() {
        assert_eq!(kept_count(20, 0.05), 1);
        assert_eq!(kept_count(7, 0.5), 4);
        assert_eq!(kept_count(10, 0.4), 4);
        assert_eq!(kept_count(16, 0.05), 1);
        assert_eq!(kept_count(5, 1.0), 5);
        assert_eq!(kept_count(3, 0.01), 1, "never prune to zero tokens");
    }

    #[test]
    fn directive_resolves_kept_set() {
        let ranking: Vec<usize> = (0..10).rev().collect();
        let d = make_directive(ranking, 0.40, 2, 10, RankingSource::Aggregated).unwrap();
        assert_eq!(d.kept, vec![6, 7, 8, 9]);
        assert_eq!(d.engine_cut(), 2);

        assert!(matches!(
            make_directive((0..4).collect(), 0.0, 2, 4, RankingSource::Random),
            Err(PruneError::InvalidRetain(_))
        ));
        assert!(matches!(
            make_directive((0..4).collect(), 1.5, 2, 4, RankingSource::Random),
            Err(PruneError::InvalidRetain(_))
        ));
        assert!(matches!(
            make_directive(vec![0, 0, 1, 2], 0.5, 2, 4, RankingSource::Random),
            Err(PruneError::NotAPermutation(_))
        ));
    }

    #[test]
    fn directive_construction_is_pure() {
        let r: Vec<usize> = vec![3, 1, 0, 2];
        let a = make_directive(r.clone(), 0.5, 2, 4, RankingSource::Aggregated).unwrap();
        let b = make_directive(r, 0.5, 2, 4, RankingSource::Aggregated).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn retention_arithmetic_matches_reported_ratios() {
        assert!((avg_retention(48, 19, 0.40) - 0.6375).abs() < 1e-12);
        assert!((avg_retention(48, 9, 0.20) - 0.3500).abs() < 1e-12);
        // (2 + 46 * 0.05) / 48 reported as 9% after rounding.
        assert!((avg_retention(48, 2, 0.05) - 0.0896).abs() < 5e-5);
    }

    #[test]
    fn retention_edges() {
        assert!((avg_retention(8, 8, 0.1) - 1.0).abs() < 1e-12, "cut after last layer prunes nothing");
        assert!((avg_retention(8, 3, 1.0) - 1.0).abs() < 1e-12, "retain everything");
    }

    #[test]
    fn fastv_rank_requires_capture() {
        let empty = SingleLayerCapture::new(1, 3, 1);
        assert!(matches!(fastv_rank(&empty), Err(PruneError::LayerNotCaptured(1))));

        let mut cap = SingleLayerCapture::new(0, 3, 1);
        let n = 4;
        let mut map = vec![0.0; n * n];
        map[3 * n..3 * n + 4].copy_from_slice(&[0.7, 0.2, 0.1, 0.0]);
        <SingleLayerCapture as AttentionSink<f64>>::prefill_map(&mut cap, 0, 0, n, &map).unwrap();
        assert_eq!(fastv_rank(&cap).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn random_rank_is_seeded_and_uniformish() {
        assert_eq!(random_rank(1, 9), vec![0]);
        assert_eq!(random_rank(8, 3), random_rank(8, 3));

        // Over many draws each index lands in the top half about half the time.
        let n = 8;
        let draws = 10_000;
        let mut top_half_counts = vec![0usize; n];
        for seed in 0..draws {
            let order = random_rank(n, seed as u64);
            for &i in &order[..n / 2] {
                top_half_counts[i] += 1;
            }
        }
        for &c in &top_half_counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "frequency {freq} drifted from 0.5");
        }
    }
}
