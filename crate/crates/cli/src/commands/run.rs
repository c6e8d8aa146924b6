//! `run`: execute the sweep over the built dataset, emitting aggregate CSV,
//! per-instance JSONL, and heatmap captures.

use std::collections::BTreeMap;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cascade_core::cascade::{
    self, decision_scores, run_baseline, run_cascade, salt, CascadeConfig, EvalInstance,
    InstanceRecord, MetricsRow, SweepPoint, METRICS_CSV_HEADER,
};
use cascade_core::gate::{calibrate_threshold, ExitCriterion};
use cascade_core::pruner::{avg_retention, RankingSource};
use cascade_core::synth::heatmap_matrix;

use super::{load_artifacts, write_text, Artifacts, Ctx};
use crate::config::RunConfig;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSONL: &str = "results.jsonl";

/// Importance capture for one sampled instance, consumed by `plot`.
#[derive(Debug, Serialize, Deserialize)]
pub struct HeatmapDump {
    pub grid: (usize, usize),
    pub importance: Vec<Vec<f64>>,
    pub kept: Vec<usize>,
    pub planted: Vec<usize>,
    pub query_cell: usize,
    pub k: usize,
    pub retain: f64,
    pub source: RankingSource,
}

pub fn base_config<'a>(config: &RunConfig, art: &'a Artifacts) -> CascadeConfig<'a> {
    let mut base = CascadeConfig::new(&art.small, &art.large);
    base.max_new_tokens = config.run.max_new_tokens;
    base.decode_weight = config.run.decode_weight;
    base.consistency_prune_layer = config.run.consistency.k;
    base.consistency_retain = config.run.consistency.retain;
    base.fastv_source_layer = config.run.fastv_layer;
    base.random_seed = config.seed;
    base
}

/// Calibrate `exit_target` entries into raw thresholds. Score pools depend
/// only on the criterion, so they are computed once per distinct criterion.
fn resolve_sweep(
    config: &RunConfig,
    base: &CascadeConfig<'_>,
    instances: &[EvalInstance],
) -> anyhow::Result<Vec<SweepPoint>> {
    let mut pools: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut points = Vec::with_capacity(config.run.sweep.len());
    for entry in &config.run.sweep {
        let threshold = match (entry.threshold, entry.exit_target) {
            (Some(t), _) => t,
            (None, Some(target)) => {
                let key = entry.criterion.as_str();
                if !pools.contains_key(key) {
                    let mut c = base.clone();
                    c.exit_criterion = entry.criterion;
                    pools.insert(key, decision_scores(instances, &c)?);
                }
                calibrate_threshold(&pools[key], target)
            }
            (None, None) => unreachable!("config validation requires one"),
        };
        points.push(SweepPoint {
            k: entry.k,
            retain: entry.retain,
            threshold,
            criterion: entry.criterion,
            source: entry.source,
        });
    }
    Ok(points)
}

/// Large-model-only comparison rows: the unpruned reference plus single-layer
/// and random pruning at each swept (k, retain).
fn baseline_rows(
    config: &RunConfig,
    base: &CascadeConfig<'_>,
    instances: &[EvalInstance],
    points: &[SweepPoint],
) -> anyhow::Result<(Vec<MetricsRow>, Vec<InstanceRecord>)> {
    let mut settings: Vec<(usize, f64, RankingSource)> =
        vec![(config.large_layers, 1.0, RankingSource::OracleLarge)];
    let mut seen = std::collections::BTreeSet::new();
    for p in points {
        if p.retain < 1.0 && seen.insert((p.k, p.retain.to_bits())) {
            settings.push((p.k, p.retain, RankingSource::FastvSingleLayer));
            settings.push((p.k, p.retain, RankingSource::Random));
        }
    }

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (idx, (k, retain, source)) in settings.iter().enumerate() {
        let config_id = format!("b{idx:03}");
        let mut c = base.clone();
        c.prune_layer = *k;
        c.retain = *retain;
        c.ranking_source = *source;
        c.threshold = 2.0;
        let outcomes: Vec<_> = instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| run_baseline(&inst.layout, &c, salt(i)))
            .collect::<Result<_, _>>()?;

        let n = instances.len() as f64;
        let correct = outcomes
            .iter()
            .zip(instances)
            .filter(|(o, inst)| o.answer_ids == inst.answer_ids)
            .count();
        let flops_sum: u64 = outcomes.iter().map(|o| o.cost.total_flops).sum();
        for (i, (o, inst)) in outcomes.iter().zip(instances).enumerate() {
            records.push(InstanceRecord {
                config_id: config_id.clone(),
                instance: i,
                k: *k,
                retain: *retain,
                threshold: 2.0,
                criterion: ExitCriterion::Confidence,
                source: *source,
                exited: false,
                correct: o.answer_ids == inst.answer_ids,
                answer_ids: o.answer_ids.clone(),
                expected_ids: inst.answer_ids.clone(),
                score: 0.0,
                s_confidence: 0.0,
                s_consistency: None,
                total_flops: o.cost.total_flops,
            });
        }
        rows.push(MetricsRow {
            config_id,
            k: *k,
            retain: *retain,
            threshold: 2.0,
            criterion: ExitCriterion::Confidence,
            accuracy: correct as f64 / n,
            exit_ratio: 0.0,
            avg_retention: avg_retention(config.large_layers, *k, *retain),
            mean_flops: flops_sum as f64 / n,
        });
    }
    Ok((rows, records))
}

fn heatmap_dumps(
    config: &RunConfig,
    base: &CascadeConfig<'_>,
    instances: &[EvalInstance],
    first_point: &SweepPoint,
    art: &Artifacts,
) -> anyhow::Result<Vec<HeatmapDump>> {
    let samples = config.run.heatmap_samples.min(instances.len());
    let mut dumps = Vec::with_capacity(samples);
    for (i, (inst, needle)) in instances.iter().zip(&art.dataset).enumerate().take(samples) {
        let mut c = base.clone();
        c.prune_layer = first_point.k;
        c.retain = first_point.retain;
        c.ranking_source = first_point.source;
        c.threshold = 2.0;
        c.capture_trace_export = true;
        let outcome = match first_point.source {
            RankingSource::Aggregated | RankingSource::OracleLarge => {
                run_cascade(&inst.layout, &c, salt(i))?
            }
            _ => run_baseline(&inst.layout, &c, salt(i))?,
        };
        let directive = outcome
            .directive
            .as_ref()
            .expect("never-exit runs always prune");
        let importance: Vec<f64> = match &outcome.trace_export {
            Some(t) => t
                .a_prefill
                .iter()
                .zip(&t.a_decode)
                .map(|(p, d)| p + config.run.decode_weight * d)
                .collect(),
            // Ranking sources without a trace: visualize the ranking itself.
            None => {
                let n = inst.layout.n_visual;
                let mut v = vec![0.0; n];
                for (rank, &cell) in directive.ranking.iter().enumerate() {
                    v[cell] = (n - rank) as f64;
                }
                v
            }
        };
        dumps.push(HeatmapDump {
            grid: needle.grid,
            importance: heatmap_matrix(&importance, needle.grid)?,
            kept: directive.kept.clone(),
            planted: needle.planted_cells.iter().copied().collect(),
            query_cell: needle.query_cell,
            k: first_point.k,
            retain: first_point.retain,
            source: first_point.source,
        });
    }
    Ok(dumps)
}

pub fn run(ctx: &Ctx) -> anyhow::Result<()> {
    let config = &ctx.config;
    let art = load_artifacts(&ctx.out_dir)?;
    let instances: Vec<EvalInstance> = art.dataset.iter().map(|i| i.eval_instance()).collect();
    let base = base_config(config, &art);

    let points = resolve_sweep(config, &base, &instances)?;
    let out = cascade::evaluate(&instances, &base, &points)?;

    let (mut rows, mut records) = (out.rows, out.records);
    if config.run.baselines {
        let (brows, brecords) = baseline_rows(config, &base, &instances, &points)?;
        rows.extend(brows);
        records.extend(brecords);
    }

    // Score ratio: accuracy relative to the unpruned large model. The
    // unpruned baseline row is the denominator and scores 1 by definition;
    // without baselines the column is left empty.
    let unpruned_acc = rows
        .iter()
        .find(|r| r.config_id.starts_with('b'))
        .map(|r| r.accuracy);
    let mut csv = format!("{METRICS_CSV_HEADER},score_ratio");
    for r in &rows {
        let ratio = match unpruned_acc {
            Some(denom) if denom > 0.0 => format!("{}", r.accuracy / denom),
            Some(_) => "0".to_string(),
            None => String::new(),
        };
        csv.push('\n');
        csv.push_str(&r.csv_line());
        csv.push(',');
        csv.push_str(&ratio);
    }
    csv.push('\n');
    write_text(&ctx.out_dir.join(RESULTS_CSV), &csv)?;

    let mut jsonl = String::new();
    for rec in &records {
        jsonl.push_str(&serde_json::to_string(rec).context("serializing record")?);
        jsonl.push('\n');
    }
    write_text(&ctx.out_dir.join(RESULTS_JSONL), &jsonl)?;

    for (i, dump) in heatmap_dumps(config, &base, &instances, &points[0], &art)?
        .iter()
        .enumerate()
    {
        let path = ctx.out_dir.join(format!("heatmap_{i:03}.json"));
        write_text(&path, &format!("{}\n", serde_json::to_string_pretty(dump)?))?;
    }

    println!(
        "wrote {} sweep rows over {} instances -> {}",
        rows.len(),
        instances.len(),
        ctx.out_dir.join(RESULTS_CSV).display()
    );
    Ok(())
}
