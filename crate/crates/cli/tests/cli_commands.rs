//! End-to-end command tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cascade-bench")
}

fn base_config(n_instances: usize) -> serde_json::Value {
    serde_json::json!({
        "seed": 7,
        "grid": [4, 4],
        "symbols": 8,
        "concentration": 0.85,
        "answer_fidelity": "faithful",
        "relevance_layers": [4, 5, 6],
        "small_layers": 6,
        "large_layers": 12,
        "num_heads": 4,
        "head_dim": 16,
        "max_seq_len": 64,
        "dataset": { "n_instances": n_instances, "difficulty": 0 },
        "run": {
            "max_new_tokens": 4,
            "consistency": { "k": 2, "retain": 0.05 },
            "sweep": [
                { "k": 2, "retain": 0.05, "criterion": "combined",
                  "source": "aggregated", "exit_target": 0.4 },
                { "k": 2, "retain": 0.25, "criterion": "combined",
                  "source": "aggregated", "exit_target": 0.4 },
                { "k": 6, "retain": 0.5, "criterion": "combined",
                  "source": "aggregated", "threshold": 0.9 }
            ]
        }
    })
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace(config: &serde_json::Value) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let out = dir.path().join("out");
    Workspace {
        config: config_path,
        out,
        _dir: dir,
    }
}

fn invoke(ws: &Workspace, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .args(["--config", ws.config.to_str().unwrap(), "--out", ws.out.to_str().unwrap()])
        .output()
        .unwrap()
}

fn expect_success(ws: &Workspace, args: &[&str]) {
    let out = invoke(ws, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_manifest(out_dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn build_writes_artifacts_with_stable_hashes() {
    let ws = workspace(&base_config(8));
    expect_success(&ws, &["build"]);
    for file in ["small.model.bin", "large.model.bin", "dataset.jsonl", "manifest.json"] {
        assert!(ws.out.join(file).exists(), "{file} missing");
    }
    let first = read_manifest(&ws.out);
    assert_eq!(first["answer_fidelity"], "faithful");

    expect_success(&ws, &["build"]);
    let second = read_manifest(&ws.out);
    assert_eq!(first["hashes"], second["hashes"], "rebuild must be content-identical");
}

#[test]
fn corrupted_mode_is_recorded_in_the_manifest() {
    let mut config = base_config(4);
    config["answer_fidelity"] = "corrupted".into();
    let ws = workspace(&config);
    expect_success(&ws, &["build"]);
    assert_eq!(read_manifest(&ws.out)["answer_fidelity"], "corrupted");
}

#[test]
fn run_emits_one_aggregate_row_per_sweep_point_plus_baselines() {
    let ws = workspace(&base_config(12));
    expect_success(&ws, &["build"]);
    expect_success(&ws, &["run"]);

    let rows = csv_rows(&ws.out.join("results.csv"));
    let cascade_rows: Vec<_> = rows.iter().filter(|r| r[0].starts_with('c')).collect();
    assert_eq!(cascade_rows.len(), 3, "one row per sweep entry");

    // The unpruned-large baseline row has score ratio 1 by definition.
    let header: Vec<String> = std::fs::read_to_string(ws.out.join("results.csv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    assert_eq!(
        header,
        [
            "config_id",
            "k",
            "R",
            "threshold",
            "criterion",
            "accuracy",
            "exit_ratio",
            "avg_retention",
            "mean_flops",
            "score_ratio"
        ]
    );
    let unpruned = rows.iter().find(|r| r[0] == "b000").expect("unpruned baseline row");
    assert_eq!(unpruned[9], "1");
    assert_eq!(unpruned[2], "1", "unpruned baseline retains everything");

    let jsonl = std::fs::read_to_string(ws.out.join("results.jsonl")).unwrap();
    let records = jsonl.lines().count();
    assert!(records >= 3 * 12, "per-instance records for every sweep point");
}

#[test]
fn layers_ablation_emits_five_fractions_plus_oracle() {
    let ws = workspace(&base_config(8));
    expect_success(&ws, &["build"]);
    expect_success(&ws, &["ablate", "layers"]);
    let rows = csv_rows(&ws.out.join("ablate_layers.csv"));
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r[0] == "small_layers").count(), 5);
    assert_eq!(rows.iter().filter(|r| r[0] == "oracle_large").count(), 1);
}

#[test]
fn tokens_ablation_collapses_for_single_prompt_token() {
    let mut config = base_config(10);
    config["dataset"]["prompt_style"] = "bare".into();
    let ws = workspace(&config);
    expect_success(&ws, &["build"]);
    expect_success(&ws, &["ablate", "tokens"]);

    let rows = csv_rows(&ws.out.join("ablate_tokens.csv"));
    assert_eq!(rows.len(), 4);
    let find = |mode: &str| -> Vec<String> {
        rows.iter().find(|r| r[0] == mode).unwrap_or_else(|| panic!("{mode} row")).clone()
    };
    assert_eq!(
        find("last_prompt_token")[1..],
        find("prompt_only")[1..],
        "one prompt token collapses the two readouts"
    );
}

#[test]
fn criteria_ablation_ranks_combined_at_least_confidence() {
    let mut config = base_config(96);
    config["seed"] = 11.into();
    let ws = workspace(&config);
    expect_success(&ws, &["build"]);
    expect_success(&ws, &["ablate", "criteria"]);

    let rows = csv_rows(&ws.out.join("ablate_criteria_summary.csv"));
    assert_eq!(rows.len(), 7, "one summary row per criterion");
    let area = |name: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == name)
            .unwrap_or_else(|| panic!("{name} row"))[1]
            .parse()
            .unwrap()
    };
    assert!(
        area("combined") >= area("confidence"),
        "combined {} vs confidence {}",
        area("combined"),
        area("confidence")
    );

    let curve_rows = csv_rows(&ws.out.join("ablate_criteria.csv"));
    assert_eq!(curve_rows.len(), 7 * 11, "7 criteria x 11 exit targets");
}

#[test]
fn plot_renders_curves_and_heatmaps() {
    let ws = workspace(&base_config(12));
    expect_success(&ws, &["build"]);
    expect_success(&ws, &["run"]);
    expect_success(&ws, &["plot"]);

    // Three same-family sweep points become one polyline with 3 vertices.
    let svg = std::fs::read_to_string(ws.out.join("curve_cascade_combined.svg")).unwrap();
    let points_attr = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(points_attr.split_whitespace().count(), 3);

    // Ranking recovery rendered: the kept set covers the planted cells.
    for i in 0..3 {
        let dump: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(ws.out.join(format!("heatmap_{i:03}.json"))).unwrap(),
        )
        .unwrap();
        let kept: Vec<u64> = dump["kept"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        let planted: Vec<u64> =
            dump["planted"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        for p in &planted {
            assert!(kept.contains(p), "heatmap {i}: planted {p} not kept in {kept:?}");
        }
        assert!(ws.out.join(format!("heatmap_{i:03}.svg")).exists());
    }
}

#[test]
fn plot_warns_and_succeeds_on_empty_results() {
    let ws = workspace(&base_config(4));
    std::fs::create_dir_all(&ws.out).unwrap();
    std::fs::write(
        ws.out.join("results.csv"),
        "config_id,k,R,threshold,criterion,accuracy,exit_ratio,avg_retention,mean_flops,score_ratio\n",
    )
    .unwrap();
    let out = invoke(&ws, &["plot"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(!ws.out.join("curve_cascade_combined.svg").exists());
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    // Unknown config key: exit 1.
    let mut bad = base_config(4);
    bad["bogus_key"] = 1.into();
    let ws = workspace(&bad);
    let out = invoke(&ws, &["build"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    // Missing artifacts: runtime error, exit 2, with a remediation hint.
    let ws = workspace(&base_config(4));
    let out = invoke(&ws, &["run"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("build"), "hint missing from: {stderr}");

    // Unknown ablation name: usage error, exit 1.
    let out = invoke(&ws, &["ablate", "bogus"]);
    assert_eq!(out.status.code(), Some(1));

    // Machine-readable errors on demand.
    let out = invoke(&ws, &["run", "--json"]);
    assert_eq!(out.status.code(), Some(2));
    let parsed: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(parsed["error"]["kind"], "runtime");
}

#[test]
fn seed_precedence_env_then_flag() {
    let ws = workspace(&base_config(4));
    let out = Command::new(bin())
        .args(["build", "--config", ws.config.to_str().unwrap(), "--out", ws.out.to_str().unwrap()])
        .env("CASCADE_PRUNE_SEED", "123")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_manifest(&ws.out)["seed"], 123);

    // An explicit flag wins over the environment.
    let out = Command::new(bin())
        .args([
            "build",
            "--config",
            ws.config.to_str().unwrap(),
            "--out",
            ws.out.to_str().unwrap(),
            "--seed",
            "456",
        ])
        .env("CASCADE_PRUNE_SEED", "123")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read_manifest(&ws.out)["seed"], 456);
}

#[test]
fn lock_file_blocks_concurrent_commands() {
    let ws = workspace(&base_config(4));
    std::fs::create_dir_all(&ws.out).unwrap();
    std::fs::write(ws.out.join(".lock"), "").unwrap();
    let out = invoke(&ws, &["build"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
}
