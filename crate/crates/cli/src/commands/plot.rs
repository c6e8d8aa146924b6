//! `plot`: accuracy-vs-FLOPs curves from results.csv and SVG heatmaps from
//! the run's importance captures.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};

use super::run::{HeatmapDump, RESULTS_CSV};
use super::{write_text, Ctx};
use crate::svg;

struct ResultRow {
    config_id: String,
    criterion: String,
    accuracy: f64,
    mean_flops: f64,
}

fn parse_results(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}; run `cascade-bench run` first", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let columns: Vec<&str> = header.split(',').collect();
    let col = |name: &str| -> anyhow::Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .with_context(|| format!("results file lacks column {name}"))
    };
    let (id_col, crit_col, acc_col, flops_col) = (
        col("config_id")?,
        col("criterion")?,
        col("accuracy")?,
        col("mean_flops")?,
    );

    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < columns.len() {
            bail!("malformed results line: {line}");
        }
        rows.push(ResultRow {
            config_id: fields[id_col].to_string(),
            criterion: fields[crit_col].to_string(),
            accuracy: fields[acc_col].parse().context("accuracy column")?,
            mean_flops: fields[flops_col].parse().context("mean_flops column")?,
        });
    }
    Ok(rows)
}

pub fn run(ctx: &Ctx) -> anyhow::Result<()> {
    let rows = parse_results(&ctx.out_dir.join(RESULTS_CSV))?;
    if rows.is_empty() {
        eprintln!("warning: results file has no rows; nothing to plot");
        return Ok(());
    }

    // One curve per configuration family: cascade rows grouped by criterion,
    // baseline rows as their own family.
    let mut families: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for row in &rows {
        let family = if row.config_id.starts_with('b') {
            "baseline".to_string()
        } else {
            format!("cascade_{}", row.criterion)
        };
        families.entry(family).or_default().push(row);
    }

    let mut written = 0;
    for (family, mut members) in families {
        members.sort_by(|a, b| a.mean_flops.partial_cmp(&b.mean_flops).expect("finite flops"));
        let points: Vec<(f64, f64)> = members.iter().map(|r| (r.mean_flops, r.accuracy)).collect();
        let svg = svg::polyline_chart(
            &points,
            &format!("accuracy vs mean FLOPs ({family})"),
            "mean FLOPs",
            "accuracy",
        );
        let path = ctx.out_dir.join(format!("curve_{family}.svg"));
        write_text(&path, &svg)?;
        written += 1;
    }

    // Heatmaps captured by the run command.
    let mut index = 0;
    loop {
        let json_path = ctx.out_dir.join(format!("heatmap_{index:03}.json"));
        if !json_path.exists() {
            break;
        }
        let dump: HeatmapDump = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
            .with_context(|| format!("parsing {}", json_path.display()))?;
        let svg = svg::heatmap(
            &dump.importance,
            &dump.kept,
            &dump.planted,
            &format!(
                "importance, kept {} of {} (cut {}, retain {})",
                dump.kept.len(),
                dump.grid.0 * dump.grid.1,
                dump.k,
                dump.retain
            ),
        );
        write_text(&ctx.out_dir.join(format!("heatmap_{index:03}.svg")), &svg)?;
        written += 1;
        index += 1;
    }

    println!("wrote {written} svg files -> {}", ctx.out_dir.display());
    Ok(())
}
