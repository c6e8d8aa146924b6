//! `ablate`: attention-map sources (layer fractions), token subsets, and
//! exit-criterion comparisons.

use anyhow::Context;
use rayon::prelude::*;

use cascade_core::aggregate::{AttentionTrace, TokenSubset, TraceSink};
use cascade_core::cascade::{self, CascadeConfig, EvalInstance, SweepPoint};
use cascade_core::engine::{NullSink, PrunePlan};
use cascade_core::gate::{
    calibrate_threshold, confidence_score, consistency_score, decision_score, entropy_score,
    quantile_score, ExitCriterion,
};
use cascade_core::pruner::{self, RankingSource};
use cascade_core::synth::{build_planted_pair, gen_needle_dataset, AnswerFidelity};
use cascade_core::Model64;

use super::{load_artifacts, write_text, Ctx};
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateKind {
    /// Attention aggregated from growing fractions of the small model's
    /// layers, plus the large model's own full-stack aggregation.
    Layers,
    /// Which token rows feed the importance ranking.
    Tokens,
    /// Early-exit criteria compared by accuracy-vs-exit-ratio curves.
    Criteria,
}

pub fn run(ctx: &Ctx, which: AblateKind) -> anyhow::Result<()> {
    match which {
        AblateKind::Layers => layers(ctx),
        AblateKind::Tokens => tokens(ctx),
        AblateKind::Criteria => criteria(ctx),
    }
}

/// Never-exit sweep accuracy under a base config.
fn pruned_accuracy(
    base: &CascadeConfig<'_>,
    instances: &[EvalInstance],
    k: usize,
    retain: f64,
    source: RankingSource,
) -> anyhow::Result<(f64, f64)> {
    let mut config = base.clone();
    config.threshold = 2.0;
    config.exit_criterion = ExitCriterion::Confidence;
    let sweep = [SweepPoint {
        k,
        retain,
        threshold: 2.0,
        criterion: ExitCriterion::Confidence,
        source,
    }];
    let out = cascade::evaluate(instances, &config, &sweep)?;
    Ok((out.rows[0].accuracy, out.rows[0].mean_flops))
}

fn prune_point(config: &RunConfig) -> (usize, f64) {
    let e = &config.run.sweep[0];
    (e.k, e.retain)
}

fn layers(ctx: &Ctx) -> anyhow::Result<()> {
    let config = &ctx.config;
    let art = load_artifacts(&ctx.out_dir)?;
    let instances: Vec<EvalInstance> = art.dataset.iter().map(|i| i.eval_instance()).collect();
    let base = super::run::base_config(config, &art);
    let (k, retain) = prune_point(config);

    let unpruned = reference_accuracy(&base, &instances, config)?;
    let mut csv = String::from("source,layer_fraction,layers_used,accuracy,score_ratio\n");
    for fraction in [0.1, 0.3, 0.5, 0.7, 1.0] {
        let filter = config.layer_filter_for_fraction(fraction);
        let used = filter.len();
        let mut c = base.clone();
        c.layer_filter = Some(filter);
        let (acc, _) = pruned_accuracy(&c, &instances, k, retain, RankingSource::Aggregated)?;
        csv.push_str(&format!(
            "small_layers,{fraction},{used},{acc},{}\n",
            ratio(acc, unpruned)
        ));
    }
    let (oracle_acc, _) = pruned_accuracy(&base, &instances, k, retain, RankingSource::OracleLarge)?;
    csv.push_str(&format!(
        "oracle_large,1,{},{oracle_acc},{}\n",
        config.large_layers,
        ratio(oracle_acc, unpruned)
    ));

    let path = ctx.out_dir.join("ablate_layers.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn tokens(ctx: &Ctx) -> anyhow::Result<()> {
    let config = &ctx.config;
    let art = load_artifacts(&ctx.out_dir)?;
    let instances: Vec<EvalInstance> = art.dataset.iter().map(|i| i.eval_instance()).collect();
    let base = super::run::base_config(config, &art);
    let (k, retain) = prune_point(config);

    let unpruned = reference_accuracy(&base, &instances, config)?;
    let mut csv = String::from("used_tokens,accuracy,score_ratio\n");
    for mode in TokenSubset::ALL {
        let mut c = base.clone();
        c.token_subset = mode;
        let (acc, _) = pruned_accuracy(&c, &instances, k, retain, RankingSource::Aggregated)?;
        csv.push_str(&format!("{},{acc},{}\n", mode.as_str(), ratio(acc, unpruned)));
    }

    let path = ctx.out_dir.join("ablate_tokens.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn reference_accuracy(
    base: &CascadeConfig<'_>,
    instances: &[EvalInstance],
    config: &RunConfig,
) -> anyhow::Result<f64> {
    let (acc, _) = pruned_accuracy(
        base,
        instances,
        config.large_layers,
        1.0,
        RankingSource::OracleLarge,
    )?;
    Ok(acc)
}

fn ratio(acc: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        acc / reference
    } else {
        0.0
    }
}

/// Per-instance measurements the criterion curves are computed from. The
/// underlying model runs do not depend on the threshold, so each instance
/// runs once and every (criterion, target) point reuses the outcomes.
struct CriteriaProbe {
    scores: Vec<(ExitCriterion, f64)>,
    small_correct: bool,
    large_correct: bool,
}

fn probe_instance(
    small: &Model64,
    large: &Model64,
    inst: &EvalInstance,
    config: &RunConfig,
) -> anyhow::Result<CriteriaProbe> {
    let layout = &inst.layout;
    let mut trace = AttentionTrace::<f64>::new(layout.n_visual, layout.n_prompt);
    let run = {
        let mut sink = TraceSink::new(&mut trace);
        small.generate_with(layout, config.run.max_new_tokens, PrunePlan::None, true, &mut sink)?
    };
    let probs = &run.result.step_probs;
    let s_conf = confidence_score(probs)?;

    let importance = trace.combined_importance(config.run.decode_weight)?;
    let ranking = pruner::rank_tokens(&importance)?;
    let directive = pruner::make_directive(
        ranking,
        config.run.consistency.retain,
        config.run.consistency.k,
        layout.n_visual,
        RankingSource::Aggregated,
    )?;
    let forced = small.teacher_forced_probs(
        layout,
        &run.result.generated_ids,
        PrunePlan::Fixed {
            cut_layer: directive.engine_cut(),
            kept_visual: &directive.kept,
        },
        &mut NullSink,
    )?;
    let s_cons = consistency_score(&forced.probs)?;
    let distributions = run.distributions.as_ref().expect("recorded above");

    let scores = vec![
        (ExitCriterion::Combined, decision_score(s_conf, s_cons)),
        (ExitCriterion::Confidence, s_conf),
        (ExitCriterion::Consistency, s_cons),
        (ExitCriterion::QuantileQ1, quantile_score(probs, 0.25)?),
        (ExitCriterion::QuantileQ2, quantile_score(probs, 0.50)?),
        (ExitCriterion::QuantileQ3, quantile_score(probs, 0.75)?),
        (ExitCriterion::Entropy, entropy_score(distributions)?),
    ];

    let small_correct = run.result.answer_ids(small.eos_id()) == inst.answer_ids;
    let large_run = large.generate(layout, config.run.max_new_tokens, &mut NullSink)?;
    let large_correct = large_run.result.answer_ids(large.eos_id()) == inst.answer_ids;

    Ok(CriteriaProbe {
        scores,
        small_correct,
        large_correct,
    })
}

/// Criterion comparison on a mixed suite: a partial-coverage small model
/// (some queries are genuinely hard), a corrupted sibling on a fraction of
/// instances, decoy-heavy grids, and the large model as unpruned fallback.
/// Pruning is deliberately off so the curves isolate the exit decision.
fn criteria(ctx: &Ctx) -> anyhow::Result<()> {
    let config = &ctx.config;
    load_artifacts(&ctx.out_dir)?;

    let cells = config.grid.0 * config.grid.1;
    let covered = ((config.ablate.coverage_fraction * cells as f64).floor() as usize)
        .clamp(1, cells);
    let mut recipe = config.recipe();
    recipe.planted_cells = (0..covered).collect();
    recipe.concentration = config.ablate.concentration;
    recipe.answer_fidelity = AnswerFidelity::Faithful;
    let small_spec = recipe.model_spec(
        config.small_layers,
        config.num_heads,
        config.head_dim,
        config.ablate.max_seq_len,
    );
    let large_spec = recipe.model_spec(
        config.large_layers,
        config.num_heads,
        config.head_dim,
        config.ablate.max_seq_len,
    );
    let (faithful_small, large) =
        build_planted_pair::<f64>(&small_spec, &large_spec, &recipe, config.seed)?;
    recipe.answer_fidelity = AnswerFidelity::Corrupted;
    let (corrupted_small, _) =
        build_planted_pair::<f64>(&small_spec, &large_spec, &recipe, config.seed)?;

    let instances: Vec<EvalInstance> =
        gen_needle_dataset(&recipe.vocab(), config.dataset.n_instances, config.seed, config.ablate.difficulty)?
            .iter()
            .map(|i| i.eval_instance())
            .collect();

    // Deterministic per-instance choice of the corrupted sibling.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0xab1a7e);
    let corrupted_mask: Vec<bool> = (0..instances.len())
        .map(|_| rng.gen_bool(config.ablate.corrupted_fraction))
        .collect();

    let probes: Vec<CriteriaProbe> = instances
        .par_iter()
        .zip(&corrupted_mask)
        .map(|(inst, &corrupt)| {
            let small = if corrupt { &corrupted_small } else { &faithful_small };
            probe_instance(small, &large, inst, config)
        })
        .collect::<Result<_, _>>()?;

    let n = probes.len() as f64;
    let small_only_acc = probes.iter().filter(|p| p.small_correct).count() as f64 / n;

    let mut csv = String::from("criterion,exit_target,threshold,exit_ratio,accuracy\n");
    let mut summary = String::from("criterion,curve_area\n");
    for criterion in ExitCriterion::ALL {
        let pool: Vec<f64> = probes
            .iter()
            .map(|p| p.scores.iter().find(|(c, _)| *c == criterion).unwrap().1)
            .collect();
        let mut curve: Vec<(f64, f64)> = Vec::new();
        for &target in &config.ablate.exit_targets {
            let threshold = calibrate_threshold(&pool, target);
            let mut exits = 0;
            let mut correct = 0;
            for (p, &s) in probes.iter().zip(&pool) {
                let exit = s >= threshold;
                if exit {
                    exits += 1;
                }
                if (exit && p.small_correct) || (!exit && p.large_correct) {
                    correct += 1;
                }
            }
            let exit_ratio = exits as f64 / n;
            let accuracy = correct as f64 / n;
            curve.push((exit_ratio, accuracy));
            csv.push_str(&format!(
                "{},{target},{threshold},{exit_ratio},{accuracy}\n",
                criterion.as_str()
            ));
        }
        summary.push_str(&format!(
            "{},{}\n",
            criterion.as_str(),
            curve_area(&curve, small_only_acc)
        ));
    }

    let curve_path = ctx.out_dir.join("ablate_criteria.csv");
    write_text(&curve_path, &csv)?;
    let summary_path = ctx.out_dir.join("ablate_criteria_summary.csv");
    write_text(&summary_path, &summary).context("writing summary")?;
    println!("wrote {} and {}", curve_path.display(), summary_path.display());
    Ok(())
}

/// Trapezoid area between an accuracy curve over exit ratio and the
/// all-small horizontal reference; larger means the criterion keeps
/// accuracy higher while exiting more.
pub fn curve_area(curve: &[(f64, f64)], small_accuracy: f64) -> f64 {
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("ratios are finite"));
    pts.dedup_by(|a, b| a.0 == b.0);
    let mut area = 0.0;
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * ((y0 - small_accuracy) + (y1 - small_accuracy)) / 2.0;
    }
    area
}
