//! Aggregation of attack run directories into summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attack::{AttackSummary, MetricsRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub summary: AttackSummary,
    pub metrics: Vec<MetricsRecord>,
}

fn opt_field(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Validation(format!("bad number {s:?} in metrics")))
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != crate::attack::METRICS_HEADER {
        return Err(Error::Validation(format!("unexpected metrics header {header:?}")));
    }
    let num = |s: &str| -> Result<f64> { opt_field(s)?.ok_or_else(|| Error::Validation("missing value".into())) };
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricsRecord {
                queries_used: num(&rec[0])? as u64,
                accuracy: num(&rec[1])?,
                fidelity: num(&rec[2])?,
                loss_mean: opt_field(&rec[3])?,
                grad_norm_l1: opt_field(&rec[4])?,
                grad_norm_kl: opt_field(&rec[5])?,
                wall_ms: num(&rec[6])? as u64,
            })
        })
        .collect()
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let summary: AttackSummary = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?;
    let metrics = parse_metrics_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?;
    Ok(RunRecord { dir: dir.to_path_buf(), summary, metrics })
}

/// Every directory under `root` (inclusive) holding `summary.json` and `metrics.csv`, sorted by path.
pub fn collect_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("summary.json").is_file() && dir.join("metrics.csv").is_file() {
            dirs.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_run(d)).collect()
}

fn run_name(run: &RunRecord, root: &Path) -> String {
    run.dir.strip_prefix(root).ok().map(|p| p.display().to_string()).filter(|s| !s.is_empty()).unwrap_or_else(|| ".".into())
}

/// One row per run: final accuracy and normalized accuracy.
pub fn table1_csv(runs: &[RunRecord], root: &Path) -> String {
    let mut out = String::from("run,loss,logits,m,budget,queries_used,accuracy,victim_accuracy,normalized_accuracy,fidelity\n");
    for r in runs {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            run_name(r, root),
            s.config.loss,
            s.config.logit_mode,
            s.config.fwd.m,
            s.config.budget,
            s.queries_used,
            s.accuracy,
            s.victim_accuracy,
            s.normalized_accuracy,
            s.fidelity
        );
    }
    out
}

/// Queries at the first evaluation reaching `target` accuracy.
pub fn queries_to_reach(metrics: &[MetricsRecord], target: f64) -> Option<u64> {
    metrics.iter().find(|r| r.accuracy >= target).map(|r| r.queries_used)
}

/// Per `m`: number of runs, how many reached `target`, and the mean queries
/// (raw and in millions) over those that did.
pub fn table3_csv(runs: &[RunRecord], target: f64) -> String {
    let mut by_m: BTreeMap<usize, Vec<Option<u64>>> = BTreeMap::new();
    for r in runs {
        by_m.entry(r.summary.config.fwd.m).or_default().push(queries_to_reach(&r.metrics, target));
    }
    let mut out = String::from("m,target_accuracy,runs,runs_reaching,queries,queries_millions\n");
    for (m, hits) in by_m {
        let reached: Vec<u64> = hits.iter().flatten().copied().collect();
        let (q, qm) = if reached.is_empty() {
            (String::new(), String::new())
        } else {
            let mean = reached.iter().sum::<u64>() as f64 / reached.len() as f64;
            (format!("{mean}"), format!("{:.6}", mean / 1e6))
        };
        let _ = writeln!(out, "{m},{target},{},{},{q},{qm}", hits.len(), reached.len());
    }
    out
}
