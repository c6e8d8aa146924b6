//! `build`: construct the model pair and dataset, write them with a
//! content-hash manifest.

use std::collections::BTreeMap;

use cascade_core::synth::{build_planted_pair, dataset_to_jsonl, gen_needle_dataset_with};

use crate::config::PromptStyle;

use super::{sha256_hex, write_text, Ctx, DATASET_FILE, LARGE_MODEL_FILE, MANIFEST_FILE, SMALL_MODEL_FILE};

pub fn run(ctx: &Ctx) -> anyhow::Result<()> {
    let config = &ctx.config;
    let recipe = config.recipe();
    let (small, large) = build_planted_pair::<f64>(
        &config.small_spec(),
        &config.large_spec(),
        &recipe,
        config.seed,
    )?;
    let dataset = gen_needle_dataset_with(
        &recipe.vocab(),
        config.dataset.n_instances,
        config.seed,
        config.dataset.difficulty,
        config.dataset.prompt_style == PromptStyle::Prefixed,
    )?;

    let small_bytes = small.to_bytes();
    let large_bytes = large.to_bytes();
    let dataset_text = dataset_to_jsonl(&dataset);

    let mut hashes = BTreeMap::new();
    hashes.insert(SMALL_MODEL_FILE.to_string(), sha256_hex(&small_bytes));
    hashes.insert(LARGE_MODEL_FILE.to_string(), sha256_hex(&large_bytes));
    hashes.insert(DATASET_FILE.to_string(), sha256_hex(dataset_text.as_bytes()));

    std::fs::write(ctx.out_dir.join(SMALL_MODEL_FILE), &small_bytes)?;
    std::fs::write(ctx.out_dir.join(LARGE_MODEL_FILE), &large_bytes)?;
    write_text(&ctx.out_dir.join(DATASET_FILE), &dataset_text)?;

    let manifest = super::Manifest {
        seed: config.seed,
        grid: config.grid,
        symbols: config.symbols,
        answer_fidelity: config.answer_fidelity,
        small_layers: config.small_layers,
        large_layers: config.large_layers,
        n_instances: config.dataset.n_instances,
        difficulty: config.dataset.difficulty,
        hashes,
    };
    write_text(
        &ctx.out_dir.join(MANIFEST_FILE),
        &format!("{}\n", serde_json::to_string_pretty(&manifest)?),
    )?;

    println!(
        "built {} ({} layers) and {} ({} layers), {} instances -> {}",
        SMALL_MODEL_FILE,
        config.small_layers,
        LARGE_MODEL_FILE,
        config.large_layers,
        dataset.len(),
        ctx.out_dir.display()
    );
    Ok(())
}
