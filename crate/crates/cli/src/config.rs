//! Run configuration: a single JSON document covering model construction,
//! dataset generation, and sweep grids. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "grid": [4, 4],
//!   "symbols": 8,
//!   "concentration": 0.85,
//!   "answer_fidelity": "faithful",
//!   "coverage_cells": null,
//!   "relevance_layers": [4, 5, 6],
//!   "small_layers": 6,
//!   "large_layers": 48,
//!   "num_heads": 4,
//!   "head_dim": 16,
//!   "max_seq_len": 64,
//!   "dataset": { "n_instances": 64, "difficulty": 0 },
//!   "run": {
//!     "max_new_tokens": 4,
//!     "decode_weight": 1.0,
//!     "consistency": { "k": 2, "retain": 0.05 },
//!     "fastv_layer": 2,
//!     "heatmap_samples": 3,
//!     "baselines": true,
//!     "sweep": [
//!       { "k": 2, "retain": 0.05, "criterion": "combined",
//!         "source": "aggregated", "exit_target": 0.4 }
//!     ]
//!   },
//!   "ablate": {
//!     "coverage_fraction": 0.75,
//!     "corrupted_fraction": 0.3,
//!     "difficulty": 6,
//!     "exit_targets": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
//!   }
//! }
//! ```
//!
//! Sweep entries carry either a raw `threshold` or an `exit_target`;
//! targets are calibrated against the dataset's decision scores at run
//! time. Layer indices (`k`, `fastv_layer`, `relevance_layers`,
//! `consistency.k`) are 1-indexed as in the docs.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use cascade_core::engine::ModelSpec;
use cascade_core::gate::ExitCriterion;
use cascade_core::pruner::RankingSource;
use cascade_core::synth::{AnswerFidelity, PlantedRecipe};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: (usize, usize),
    pub symbols: usize,
    pub concentration: f64,
    pub answer_fidelity: AnswerFidelity,
    /// Cells the small model's circuit covers; `null` covers every cell.
    #[serde(default)]
    pub coverage_cells: Option<Vec<usize>>,
    pub relevance_layers: Vec<usize>,
    pub small_layers: usize,
    pub large_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
    pub dataset: DatasetConfig,
    pub run: RunSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_instances: usize,
    #[serde(default)]
    pub difficulty: usize,
    /// Prompt shape: `prefixed` is `[prefix, query]`, `bare` is the query
    /// token alone (one prompt token).
    #[serde(default)]
    pub prompt_style: PromptStyle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    Prefixed,
    Bare,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub max_new_tokens: usize,
    #[serde(default = "default_decode_weight")]
    pub decode_weight: f64,
    pub consistency: ConsistencyConfig,
    #[serde(default = "default_fastv_layer")]
    pub fastv_layer: usize,
    #[serde(default = "default_heatmap_samples")]
    pub heatmap_samples: usize,
    #[serde(default = "default_true")]
    pub baselines: bool,
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub k: usize,
    pub retain: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub k: usize,
    pub retain: f64,
    pub criterion: ExitCriterion,
    pub source: RankingSource,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub exit_target: Option<f64>,
}

/// Knobs for the criteria ablation's mixed suite. The defaults are tuned
/// for the default 4x4 grid: a soft concentration and a tight sequence
/// budget keep answer probabilities unsaturated, and high decoy counts
/// produce confidently-wrong generations that only the consistency pathway
/// can flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub coverage_fraction: f64,
    pub corrupted_fraction: f64,
    pub difficulty: usize,
    pub exit_targets: Vec<f64>,
    pub concentration: f64,
    pub max_seq_len: usize,
}

fn default_decode_weight() -> f64 {
    1.0
}

fn default_fastv_layer() -> usize {
    2
}

fn default_heatmap_samples() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            coverage_fraction: 0.75,
            corrupted_fraction: 0.25,
            difficulty: 15,
            exit_targets: (0..=10).map(|i| i as f64 / 10.0).collect(),
            concentration: 0.65,
            max_seq_len: 24,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid: (4, 4),
            symbols: 8,
            concentration: 0.85,
            answer_fidelity: AnswerFidelity::Faithful,
            coverage_cells: None,
            relevance_layers: vec![4, 5, 6],
            small_layers: 6,
            large_layers: 48,
            num_heads: 4,
            head_dim: 16,
            max_seq_len: 64,
            dataset: DatasetConfig {
                n_instances: 64,
                difficulty: 0,
                prompt_style: PromptStyle::Prefixed,
            },
            run: RunSection {
                max_new_tokens: 4,
                decode_weight: 1.0,
                consistency: ConsistencyConfig { k: 2, retain: 0.05 },
                fastv_layer: 2,
                heatmap_samples: 3,
                baselines: true,
                sweep: vec![
                    SweepEntry {
                        k: 19,
                        retain: 0.40,
                        criterion: ExitCriterion::Combined,
                        source: RankingSource::Aggregated,
                        threshold: None,
                        exit_target: Some(0.4),
                    },
                    SweepEntry {
                        k: 9,
                        retain: 0.20,
                        criterion: ExitCriterion::Combined,
                        source: RankingSource::Aggregated,
                        threshold: None,
                        exit_target: Some(0.4),
                    },
                    SweepEntry {
                        k: 2,
                        retain: 0.05,
                        criterion: ExitCriterion::Combined,
                        source: RankingSource::Aggregated,
                        threshold: None,
                        exit_target: Some(0.4),
                    },
                ],
            },
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let cells = self.grid.0 * self.grid.1;
        if cells == 0 {
            bail!("grid must be nonempty");
        }
        if self.symbols < 2 {
            bail!("symbols must be >= 2");
        }
        if !(self.concentration > 0.5 && self.concentration < 1.0) {
            bail!("concentration {} outside (0.5, 1)", self.concentration);
        }
        if let Some(cov) = &self.coverage_cells {
            if cov.is_empty() || cov.iter().any(|&c| c >= cells) {
                bail!("coverage_cells must be nonempty and within the grid");
            }
        }
        if self.relevance_layers.is_empty()
            || self.relevance_layers.iter().any(|&l| l == 0 || l > self.small_layers)
        {
            bail!("relevance_layers must be 1-indexed layers of the small model");
        }
        if self.large_layers <= self.small_layers {
            bail!(
                "large_layers {} must exceed small_layers {}",
                self.large_layers,
                self.small_layers
            );
        }
        if self.dataset.n_instances == 0 {
            bail!("dataset.n_instances must be >= 1");
        }
        if self.run.sweep.is_empty() {
            bail!("run.sweep must contain at least one entry");
        }
        for (i, e) in self.run.sweep.iter().enumerate() {
            if e.k == 0 || e.k > self.large_layers {
                bail!("sweep[{i}].k {} outside 1..={}", e.k, self.large_layers);
            }
            if !(e.retain > 0.0 && e.retain <= 1.0) {
                bail!("sweep[{i}].retain {} outside (0, 1]", e.retain);
            }
            match (e.threshold, e.exit_target) {
                (Some(_), Some(_)) => bail!("sweep[{i}] sets both threshold and exit_target"),
                (None, None) => bail!("sweep[{i}] needs a threshold or an exit_target"),
                (None, Some(t)) if !(0.0..=1.0).contains(&t) => {
                    bail!("sweep[{i}].exit_target {t} outside [0, 1]")
                }
                _ => {}
            }
            if e.source == RankingSource::FastvSingleLayer && self.run.fastv_layer > e.k {
                bail!(
                    "sweep[{i}]: fastv_layer {} must be <= k {}",
                    self.run.fastv_layer,
                    e.k
                );
            }
        }
        if self.run.consistency.k == 0 || self.run.consistency.k > self.small_layers {
            bail!("consistency.k outside the small model's stack");
        }
        if !(self.run.consistency.retain > 0.0 && self.run.consistency.retain <= 1.0) {
            bail!("consistency.retain outside (0, 1]");
        }
        if self.run.max_new_tokens == 0 {
            bail!("max_new_tokens must be >= 1");
        }
        let a = &self.ablate;
        if !(a.coverage_fraction > 0.0 && a.coverage_fraction <= 1.0) {
            bail!("ablate.coverage_fraction outside (0, 1]");
        }
        if !(0.0..=1.0).contains(&a.corrupted_fraction) {
            bail!("ablate.corrupted_fraction outside [0, 1]");
        }
        if a.exit_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            bail!("ablate.exit_targets must lie in [0, 1]");
        }
        if !(a.concentration > 0.5 && a.concentration < 1.0) {
            bail!("ablate.concentration outside (0.5, 1)");
        }
        if a.max_seq_len < cells + 2 + self.run.max_new_tokens {
            bail!(
                "ablate.max_seq_len {} too small for {} cells plus prompt and generation",
                a.max_seq_len,
                cells
            );
        }
        // Construction feasibility is checked again at build time; catching
        // the obvious cases here gives config errors instead of runtime ones.
        if self.head_dim < cells.max(self.symbols) {
            bail!(
                "head_dim {} cannot hold {} cells / {} symbols orthogonally",
                self.head_dim,
                cells,
                self.symbols
            );
        }
        Ok(())
    }

    pub fn recipe(&self) -> PlantedRecipe {
        PlantedRecipe {
            grid: self.grid,
            symbols: self.symbols,
            planted_cells: match &self.coverage_cells {
                Some(cells) => cells.iter().copied().collect(),
                None => PlantedRecipe::full_coverage(self.grid),
            },
            relevance_layers: self.relevance_layers.iter().copied().collect(),
            concentration: self.concentration,
            answer_fidelity: self.answer_fidelity,
        }
    }

    pub fn small_spec(&self) -> ModelSpec {
        self.recipe()
            .model_spec(self.small_layers, self.num_heads, self.head_dim, self.max_seq_len)
    }

    pub fn large_spec(&self) -> ModelSpec {
        self.recipe()
            .model_spec(self.large_layers, self.num_heads, self.head_dim, self.max_seq_len)
    }

    /// First `fraction` of the small model's layers, 0-indexed, at least one.
    pub fn layer_filter_for_fraction(&self, fraction: f64) -> BTreeSet<usize> {
        let count = ((fraction * self.small_layers as f64).floor() as usize).max(1);
        (0..count.min(self.small_layers)).collect()
    }
}
