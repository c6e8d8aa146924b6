//! Orchestration of the full pipeline: small-model inference with trace
//! capture, the exit decision, and conditional large-model inference with
//! mid-stack pruning guided by the small model's ranking, all with analytic
//! cost accounting.

pub mod cost;

use std::cell::RefCell;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AttentionTrace, TokenSubset, TraceError, TraceExport, TraceSink};
use crate::engine::{EngineError, GenerationRun, NullSink, PrunePlan, TokenLayout};
use crate::gate::{
    confidence_score, consistency_score, decision_score, entropy_score, quantile_score,
    ExitCriterion, ExitDecision, GateError,
};
use crate::pruner::{self, PruneDirective, PruneError, RankingSource};
use crate::Model64;
use cost::{flops_decode_step, flops_forward};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("incompatible model pair: {0}")]
    Incompatible(String),
    #[error("invalid cascade config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// One evaluation instance: an input layout plus its ground-truth answer.
/// Answers match by exact token-id sequence equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalInstance {
    pub layout: TokenLayout,
    pub answer_ids: Vec<usize>,
}

/// Full cascade configuration. Models are borrowed; everything else is a
/// plain value so sweep points can copy and override.
#[derive(Clone)]
pub struct CascadeConfig<'a> {
    pub small: &'a Model64,
    pub large: &'a Model64,
    /// Cut layer in the large model, 1-indexed (that many layers see all
    /// tokens).
    pub prune_layer: usize,
    /// Fraction of visual tokens retained past the cut.
    pub retain: f64,
    pub ranking_source: RankingSource,
    pub exit_criterion: ExitCriterion,
    pub threshold: f64,
    /// Cut layer for the consistency pass in the small model, 1-indexed.
    pub consistency_prune_layer: usize,
    pub consistency_retain: f64,
    pub max_new_tokens: usize,
    /// Weight on the decode-stage accumulator when combining importance.
    pub decode_weight: f64,
    /// Which token rows feed the ranking.
    pub token_subset: TokenSubset,
    /// Source layer for the single-layer ranking baseline, 1-indexed.
    pub fastv_source_layer: usize,
    /// Base seed for the random-ranking baseline.
    pub random_seed: u64,
    /// Restrict the small model's trace to these 0-indexed layers.
    pub layer_filter: Option<BTreeSet<usize>>,
    /// Attach the finalized trace and directive to the outcome.
    pub capture_trace_export: bool,
}

impl<'a> CascadeConfig<'a> {
    /// A config with the shipped defaults: aggressive consistency pruning
    /// (cut 2, 5% retained), combined criterion, unweighted importance.
    pub fn new(small: &'a Model64, large: &'a Model64) -> Self {
        Self {
            small,
            large,
            prune_layer: 2,
            retain: 0.05,
            ranking_source: RankingSource::Aggregated,
            exit_criterion: ExitCriterion::Combined,
            threshold: 0.8,
            consistency_prune_layer: 2,
            consistency_retain: 0.05,
            max_new_tokens: 8,
            decode_weight: 1.0,
            token_subset: TokenSubset::PromptAndGenerated,
            fastv_source_layer: 2,
            random_seed: 0,
            layer_filter: None,
            capture_trace_export: false,
        }
    }

    pub fn validate(&self) -> Result<(), CascadeError> {
        let s = self.small.spec();
        let l = self.large.spec();
        if s.vocab_size != l.vocab_size {
            return Err(CascadeError::Incompatible(format!(
                "vocab {} vs {}",
                s.vocab_size, l.vocab_size
            )));
        }
        if self.prune_layer < 1 || self.prune_layer > l.num_layers {
            return Err(CascadeError::InvalidConfig(format!(
                "prune layer {} outside 1..={}",
                self.prune_layer, l.num_layers
            )));
        }
        if self.consistency_prune_layer < 1 || self.consistency_prune_layer > s.num_layers {
            return Err(CascadeError::InvalidConfig(format!(
                "consistency prune layer {} outside 1..={}",
                self.consistency_prune_layer, s.num_layers
            )));
        }
        for (name, r) in [("retain", self.retain), ("consistency_retain", self.consistency_retain)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CascadeError::InvalidConfig(format!("{name} {r} outside (0, 1]")));
            }
        }
        if self.fastv_source_layer < 1 || self.fastv_source_layer > self.prune_layer {
            return Err(CascadeError::InvalidConfig(format!(
                "single-layer source {} must lie in 1..=prune_layer {}",
                self.fastv_source_layer, self.prune_layer
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(CascadeError::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        if self.decode_weight < 0.0 || !self.decode_weight.is_finite() {
            return Err(CascadeError::InvalidConfig("decode_weight must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Configured average token retention over the large model's stack.
    pub fn avg_retention(&self) -> f64 {
        pruner::avg_retention(self.large.spec().num_layers, self.prune_layer, self.retain)
    }
}

/// Analytic FLOPs tally of one cascade run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub small_prefill_flops: u64,
    pub small_decode_flops: u64,
    pub consistency_flops: u64,
    pub large_prefill_flops: u64,
    pub large_decode_flops: u64,
    pub total_flops: u64,
    pub avg_retention: f64,
    pub exited_early: bool,
}

impl CostReport {
    fn finish(mut self) -> Self {
        self.total_flops = self.small_prefill_flops
            + self.small_decode_flops
            + self.consistency_flops
            + self.large_prefill_flops
            + self.large_decode_flops;
        self
    }
}

/// Which model produced the returned answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Small,
    Large,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeOutcome {
    pub answer_ids: Vec<usize>,
    pub source: AnswerSource,
    pub decision: ExitDecision,
    pub cost: CostReport,
    pub trace_export: Option<TraceExport>,
    /// The directive applied to the large model, when it ran pruned.
    pub directive: Option<PruneDirective>,
}

/// Small-model stage: generation with trace capture plus the decision score.
struct SmallPass {
    run: GenerationRun<f64>,
    trace: AttentionTrace<f64>,
    decision: ExitDecision,
    prefill_flops: u64,
    decode_flops: u64,
    consistency_flops: u64,
}

fn generation_flops(spec: &crate::engine::ModelSpec, run: &GenerationRun<f64>) -> (u64, u64) {
    let prefill = flops_forward(spec, &run.prefill_lens).total();
    let decode = run
        .decode_ctx_lens
        .iter()
        .map(|lens| flops_decode_step(spec, lens).total())
        .sum();
    (prefill, decode)
}

fn small_pass(layout: &TokenLayout, config: &CascadeConfig<'_>) -> Result<SmallPass, CascadeError> {
    let spec = *config.small.spec();
    let mut trace = AttentionTrace::new(layout.n_visual, layout.n_prompt);
    if let Some(filter) = &config.layer_filter {
        trace = trace.with_layer_filter(filter.clone());
    }
    let run = {
        let mut sink = TraceSink::new(&mut trace);
        config.small.generate_with(
            layout,
            config.max_new_tokens,
            PrunePlan::None,
            config.exit_criterion.needs_distributions(),
            &mut sink,
        )?
    };
    let (prefill_flops, decode_flops) = generation_flops(&spec, &run);

    let s_confidence = confidence_score(&run.result.step_probs)?;
    let (s_consistency, consistency_flops) = if config.exit_criterion.needs_consistency() {
        // Consistency prunes the small model with its own combined ranking,
        // then re-scores the generated tokens in one parallel pass.
        let importance = trace.combined_importance(config.decode_weight)?;
        let ranking = pruner::rank_tokens(&importance)?;
        let directive = pruner::make_directive(
            ranking,
            config.consistency_retain,
            config.consistency_prune_layer,
            layout.n_visual,
            RankingSource::Aggregated,
        )?;
        let plan = plan_for(&directive, layout.n_visual);
        let tf = config.small.teacher_forced_probs(
            layout,
            &run.result.generated_ids,
            plan,
            &mut NullSink,
        )?;
        let flops = flops_forward(&spec, &tf.prefill_lens).total();
        (Some(consistency_score(&tf.probs)?), flops)
    } else {
        (None, 0)
    };

    let s = match config.exit_criterion {
        ExitCriterion::Combined => {
            decision_score(s_confidence, s_consistency.expect("computed for combined"))
        }
        ExitCriterion::Confidence => s_confidence,
        ExitCriterion::Consistency => s_consistency.expect("computed for consistency"),
        ExitCriterion::QuantileQ1 => quantile_score(&run.result.step_probs, 0.25)?,
        ExitCriterion::QuantileQ2 => quantile_score(&run.result.step_probs, 0.50)?,
        ExitCriterion::QuantileQ3 => quantile_score(&run.result.step_probs, 0.75)?,
        ExitCriterion::Entropy => {
            entropy_score(run.distributions.as_ref().expect("recorded for entropy"))?
        }
    };

    let decision = ExitDecision {
        criterion: config.exit_criterion,
        s_confidence,
        s_consistency,
        s,
        threshold: config.threshold,
        exit: s >= config.threshold,
    };

    Ok(SmallPass {
        run,
        trace,
        decision,
        prefill_flops,
        decode_flops,
        consistency_flops,
    })
}

/// Identity pruning (retain 1) compiles to no plan at all; the engine
/// guarantees a full kept set is a bitwise no-op, so this only skips work.
fn plan_for<'a>(directive: &'a PruneDirective, n_visual: usize) -> PrunePlan<'a> {
    if directive.kept.len() == n_visual {
        PrunePlan::None
    } else {
        PrunePlan::Fixed {
            cut_layer: directive.engine_cut(),
            kept_visual: &directive.kept,
        }
    }
}

/// Identity directive for runs that prune nothing.
fn identity_directive(n_visual: usize, k: usize, source: RankingSource) -> PruneDirective {
    PruneDirective {
        source,
        k,
        retain: 1.0,
        ranking: (0..n_visual).collect(),
        kept: (0..n_visual).collect(),
    }
}

/// Run the full cascade on one instance.
///
/// `rng_salt` individualizes the random-ranking baseline per instance;
/// everything else is deterministic in the inputs.
pub fn run_cascade(
    layout: &TokenLayout,
    config: &CascadeConfig<'_>,
    rng_salt: u64,
) -> Result<CascadeOutcome, CascadeError> {
    config.validate()?;
    let pass = small_pass(layout, config)?;
    let mut cost = CostReport {
        small_prefill_flops: pass.prefill_flops,
        small_decode_flops: pass.decode_flops,
        consistency_flops: pass.consistency_flops,
        avg_retention: config.avg_retention(),
        exited_early: pass.decision.exit,
        ..CostReport::default()
    };

    if pass.decision.exit {
        let eos = config.small.eos_id();
        return Ok(CascadeOutcome {
            answer_ids: pass.run.result.answer_ids(eos).to_vec(),
            source: AnswerSource::Small,
            decision: pass.decision,
            cost: cost.finish(),
            trace_export: config.capture_trace_export.then(|| pass.trace.export()),
            directive: None,
        });
    }

    let large = run_large(layout, config, Some(&pass.trace), rng_salt, &mut cost)?;
    Ok(CascadeOutcome {
        answer_ids: large.answer_ids,
        source: AnswerSource::Large,
        decision: pass.decision,
        cost: cost.finish(),
        trace_export: config.capture_trace_export.then(|| pass.trace.export()),
        directive: Some(large.directive),
    })
}

/// Large-model-only run with pruning guided by a non-cascade source
/// (single-layer, random, or the large model's own aggregation). This is the
/// comparison row: no small model is involved and none of its cost accrues.
pub fn run_baseline(
    layout: &TokenLayout,
    config: &CascadeConfig<'_>,
    rng_salt: u64,
) -> Result<CascadeOutcome, CascadeError> {
    config.validate()?;
    if config.ranking_source == RankingSource::Aggregated && config.retain < 1.0 {
        return Err(CascadeError::InvalidConfig(
            "aggregated ranking needs the small model; use run_cascade with a never-exit threshold".into(),
        ));
    }
    let mut cost = CostReport {
        avg_retention: config.avg_retention(),
        exited_early: false,
        ..CostReport::default()
    };
    let large = run_large(layout, config, None, rng_salt, &mut cost)?;
    Ok(CascadeOutcome {
        answer_ids: large.answer_ids,
        source: AnswerSource::Large,
        decision: ExitDecision {
            criterion: config.exit_criterion,
            s_confidence: 0.0,
            s_consistency: None,
            s: 0.0,
            threshold: f64::INFINITY,
            exit: false,
        },
        cost: cost.finish(),
        trace_export: None,
        directive: Some(large.directive),
    })
}

struct LargeRun {
    answer_ids: Vec<usize>,
    directive: PruneDirective,
}

fn run_large(
    layout: &TokenLayout,
    config: &CascadeConfig<'_>,
    small_trace: Option<&AttentionTrace<f64>>,
    rng_salt: u64,
    cost: &mut CostReport,
) -> Result<LargeRun, CascadeError> {
    let spec = *config.large.spec();
    let n_visual = layout.n_visual;
    let k = config.prune_layer;
    let eos = config.large.eos_id();
    let no_cut = k >= spec.num_layers || config.retain >= 1.0;

    // Sources that resolve the kept set before the pass.
    let prebuilt: Option<PruneDirective> = if no_cut {
        Some(identity_directive(n_visual, k, config.ranking_source))
    } else {
        match config.ranking_source {
            RankingSource::Aggregated => {
                let trace = small_trace.ok_or_else(|| {
                    CascadeError::InvalidConfig("aggregated ranking without a small-model trace".into())
                })?;
                let importance = match config.token_subset {
                    TokenSubset::PromptAndGenerated => trace.combined_importance(config.decode_weight)?,
                    subset => trace.subset_importance(subset)?,
                };
                let ranking = pruner::rank_tokens(&importance)?;
                Some(pruner::make_directive(
                    ranking,
                    config.retain,
                    k,
                    n_visual,
                    RankingSource::Aggregated,
                )?)
            }
            RankingSource::Random => {
                let ranking = pruner::random_rank(n_visual, config.random_seed ^ rng_salt);
                Some(pruner::make_directive(
                    ranking,
                    config.retain,
                    k,
                    n_visual,
                    RankingSource::Random,
                )?)
            }
            RankingSource::OracleLarge => {
                // Full unpruned pass of the large model itself, aggregating
                // its own trace; its cost is charged to the large side.
                let mut trace = AttentionTrace::new(n_visual, layout.n_prompt);
                let run = {
                    let mut sink = TraceSink::new(&mut trace);
                    config.large.generate_with(
                        layout,
                        config.max_new_tokens,
                        PrunePlan::None,
                        false,
                        &mut sink,
                    )?
                };
                let (p, d) = generation_flops(&spec, &run);
                cost.large_prefill_flops += p;
                cost.large_decode_flops += d;
                let importance = trace.combined_importance(config.decode_weight)?;
                let ranking = pruner::rank_tokens(&importance)?;
                Some(pruner::make_directive(
                    ranking,
                    config.retain,
                    k,
                    n_visual,
                    RankingSource::OracleLarge,
                )?)
            }
            RankingSource::FastvSingleLayer => None,
        }
    };

    let (run, directive) = match prebuilt {
        Some(directive) => {
            let plan = plan_for(&directive, n_visual);
            let run = config
                .large
                .generate_with(layout, config.max_new_tokens, plan, false, &mut NullSink)?;
            (run, directive)
        }
        None => {
            // Single-layer baseline: the ranking comes from the last prompt
            // token's attention row captured mid-pass, pre-cut.
            let captured: RefCell<Option<PruneDirective>> = RefCell::new(None);
            let retain = config.retain;
            let plan = PrunePlan::DeferredLastPromptRow {
                source_layer: config.fastv_source_layer - 1,
                cut_layer: k,
                resolve: Box::new(|row| {
                    let ranking = pruner::rank_tokens(row).map_err(|e| e.to_string())?;
                    let d = pruner::make_directive(
                        ranking,
                        retain,
                        k,
                        n_visual,
                        RankingSource::FastvSingleLayer,
                    )
                    .map_err(|e| e.to_string())?;
                    let kept = d.kept.clone();
                    *captured.borrow_mut() = Some(d);
                    Ok(kept)
                }),
            };
            let run = config
                .large
                .generate_with(layout, config.max_new_tokens, plan, false, &mut NullSink)?;
            let directive = captured
                .into_inner()
                .expect("deferred plan resolves during prefill");
            (run, directive)
        }
    };

    let (p, d) = generation_flops(&spec, &run);
    cost.large_prefill_flops += p;
    cost.large_decode_flops += d;
    Ok(LargeRun {
        answer_ids: run.result.answer_ids(eos).to_vec(),
        directive,
    })
}

/// Decision scores of the small model over a dataset, in dataset order;
/// the pool thresholds are calibrated against.
pub fn decision_scores(
    instances: &[EvalInstance],
    config: &CascadeConfig<'_>,
) -> Result<Vec<f64>, CascadeError> {
    config.validate()?;
    instances
        .par_iter()
        .map(|inst| small_pass(&inst.layout, config).map(|p| p.decision.s))
        .collect()
}

/// One sweep point overrides the sweepable dimensions of a base config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub retain: f64,
    pub threshold: f64,
    pub criterion: ExitCriterion,
    pub source: RankingSource,
}

/// Aggregate metrics for one sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_id: String,
    pub k: usize,
    #[serde(rename = "R")]
    pub retain: f64,
    pub threshold: f64,
    pub criterion: ExitCriterion,
    pub accuracy: f64,
    pub exit_ratio: f64,
    pub avg_retention: f64,
    pub mean_flops: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "config_id,k,R,threshold,criterion,accuracy,exit_ratio,avg_retention,mean_flops";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.config_id,
            self.k,
            self.retain,
            self.threshold,
            self.criterion.as_str(),
            self.accuracy,
            self.exit_ratio,
            self.avg_retention,
            self.mean_flops
        )
    }
}

/// The metrics table as CSV with the pinned header.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    for r in rows {
        out.push('\n');
        out.push_str(&r.csv_line());
    }
    out.push('\n');
    out
}

/// The metrics table as JSON lines, one row per line.
pub fn metrics_to_jsonl(rows: &[MetricsRow]) -> String {
    rows.iter().fold(String::new(), |mut acc, r| {
        acc.push_str(&serde_json::to_string(r).expect("rows serialize"));
        acc.push('\n');
        acc
    })
}

/// Per-instance record emitted alongside the aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub config_id: String,
    pub instance: usize,
    pub k: usize,
    pub retain: f64,
    pub threshold: f64,
    pub criterion: ExitCriterion,
    pub source: RankingSource,
    pub exited: bool,
    pub correct: bool,
    pub answer_ids: Vec<usize>,
    pub expected_ids: Vec<usize>,
    pub score: f64,
    pub s_confidence: f64,
    pub s_consistency: Option<f64>,
    pub total_flops: u64,
}

pub struct EvaluateOutput {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<InstanceRecord>,
}

/// Run every sweep point over every instance. Instances execute in parallel;
/// results are aggregated in dataset order, so output is identical at any
/// parallelism level.
pub fn evaluate(
    instances: &[EvalInstance],
    base: &CascadeConfig<'_>,
    sweep: &[SweepPoint],
) -> Result<EvaluateOutput, CascadeError> {
    assert!(!instances.is_empty(), "evaluate needs a nonempty dataset");
    let mut rows = Vec::with_capacity(sweep.len());
    let mut records = Vec::with_capacity(sweep.len() * instances.len());

    for (idx, point) in sweep.iter().enumerate() {
        let config_id = format!("c{idx:03}");
        let mut config = base.clone();
        config.prune_layer = point.k;
        config.retain = point.retain;
        config.threshold = point.threshold;
        config.exit_criterion = point.criterion;
        config.ranking_source = point.source;
        config.validate()?;

        let outcomes: Vec<CascadeOutcome> = instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| run_cascade(&inst.layout, &config, salt(i)))
            .collect::<Result<_, _>>()?;

        let n = instances.len() as f64;
        let correct = outcomes
            .iter()
            .zip(instances)
            .filter(|(o, inst)| o.answer_ids == inst.answer_ids)
            .count();
        let exits = outcomes.iter().filter(|o| o.decision.exit).count();
        let flops_sum: u64 = outcomes.iter().map(|o| o.cost.total_flops).sum();

        for (i, (o, inst)) in outcomes.iter().zip(instances).enumerate() {
            records.push(InstanceRecord {
                config_id: config_id.clone(),
                instance: i,
                k: point.k,
                retain: point.retain,
                threshold: point.threshold,
                criterion: point.criterion,
                source: point.source,
                exited: o.decision.exit,
                correct: o.answer_ids == inst.answer_ids,
                answer_ids: o.answer_ids.clone(),
                expected_ids: inst.answer_ids.clone(),
                score: o.decision.s,
                s_confidence: o.decision.s_confidence,
                s_consistency: o.decision.s_consistency,
                total_flops: o.cost.total_flops,
            });
        }

        rows.push(MetricsRow {
            config_id,
            k: point.k,
            retain: point.retain,
            threshold: point.threshold,
            criterion: point.criterion,
            accuracy: correct as f64 / n,
            exit_ratio: exits as f64 / n,
            avg_retention: config.avg_retention(),
            mean_flops: flops_sum as f64 / n,
        });
    }

    Ok(EvaluateOutput { rows, records })
}

/// Per-instance salt for the random-ranking baseline: decorrelated from the
/// instance index but independent of execution order.
pub fn salt(instance_index: usize) -> u64 {
    (instance_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
