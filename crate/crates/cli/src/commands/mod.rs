//! Subcommand implementations and shared artifact plumbing.

pub mod ablate;
pub mod build;
pub mod plot;
pub mod run;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cascade_core::synth::{dataset_from_jsonl, NeedleInstance};
use cascade_core::Model64;

use crate::config::RunConfig;

pub const SMALL_MODEL_FILE: &str = "small.model.bin";
pub const LARGE_MODEL_FILE: &str = "large.model.bin";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub grid: (usize, usize),
    pub symbols: usize,
    pub answer_fidelity: cascade_core::synth::AnswerFidelity,
    pub small_layers: usize,
    pub large_layers: usize,
    pub n_instances: usize,
    pub difficulty: usize,
    /// File name to sha256 hex digest.
    pub hashes: std::collections::BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Artifacts {
    pub small: Model64,
    pub large: Model64,
    pub dataset: Vec<NeedleInstance>,
}

pub fn load_artifacts(out_dir: &Path) -> anyhow::Result<Artifacts> {
    let manifest = out_dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        bail!(
            "no built artifacts in {}: missing {}; run `cascade-bench build --out {}` first",
            out_dir.display(),
            MANIFEST_FILE,
            out_dir.display()
        );
    }
    let small = Model64::load(&out_dir.join(SMALL_MODEL_FILE))
        .with_context(|| format!("loading {SMALL_MODEL_FILE}"))?;
    let large = Model64::load(&out_dir.join(LARGE_MODEL_FILE))
        .with_context(|| format!("loading {LARGE_MODEL_FILE}"))?;
    let text = std::fs::read_to_string(out_dir.join(DATASET_FILE))
        .with_context(|| format!("loading {DATASET_FILE}"))?;
    let dataset = dataset_from_jsonl(&text)?;
    Ok(Artifacts { small, large, dataset })
}

/// Resolved invocation context shared by all commands.
pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
