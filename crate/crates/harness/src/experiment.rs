//! Runs the (method × seed) grid of a config and writes its artifacts.
//!
//! Layout under the output root:
//!
//! ```text
//! <out>/<dataset>/config.txt                 resolved config
//! <out>/<dataset>/manifest.json              every cell, its config and artifacts
//! <out>/<dataset>/summary.txt                mean ± std per method
//! <out>/<dataset>/aggregate.csv              the same, full precision
//! <out>/<dataset>/<method>/seed<k>/R.csv
//! <out>/<dataset>/<method>/seed<k>/summary.txt
//! <out>/<dataset>/<method>/seed<k>/probe.csv when probing is enabled
//! <out>/<dataset>/<method>/seed<k>/model.ckpt when checkpoints are enabled
//! ```

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use genreplay_core::replay::ProbePoint;
use genreplay_core::{accuracy, flatness_probe, mean_std, run_method, AccMatrix, LabeledSet, Method, RunOutcome};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::build_stream;
use crate::HarnessError;

/// Everything one cell computed.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub outcome: RunOutcome,
    /// Test splits of every segment, concatenated.
    pub test_union: LabeledSet,
    /// Final-model accuracy on `test_union`.
    pub final_accuracy: f64,
    pub probe: Option<Vec<ProbePoint>>,
    pub dropped_rows: usize,
    pub label_map: Vec<i64>,
}

pub fn run_cell(cfg: &RunConfig, method: Method, seed: u64) -> Result<CellResult, HarnessError> {
    let stream = build_stream(cfg, seed)?;
    let outcome = run_method(method, &stream.gold, &stream.segments, &cfg.pipeline, seed)?;
    let classes = stream.gold.classes();
    let mut test_union = LabeledSet::empty(stream.gold.dims(), classes);
    for seg in &stream.segments {
        test_union = test_union.concat(&seg.test_set(classes)?)?;
    }
    let final_accuracy = accuracy(&outcome.model.predict(test_union.features())?, test_union.labels())?;
    let probe = match &cfg.probe {
        Some(p) => Some(flatness_probe(&outcome.model, &test_union, &p.bounds, p.draws, seed)?),
        None => None,
    };
    Ok(CellResult {
        method,
        seed,
        outcome,
        test_union,
        final_accuracy,
        probe,
        dropped_rows: stream.dropped,
        label_map: stream.label_map,
    })
}

fn number(v: f64) -> String {
    format!("{v:?}")
}

pub fn r_matrix_csv(r: &AccMatrix) -> String {
    let t = r.steps();
    let mut s = String::from("step");
    for j in 1..=t {
        let _ = write!(s, ",t{j}");
    }
    s.push('\n');
    for i in 1..=t {
        let _ = write!(s, "{i}");
        for j in 1..=t {
            s.push(',');
            if let Some(v) = r.get(i, j) {
                s.push_str(&number(v));
            }
        }
        s.push('\n');
    }
    s
}

pub fn probe_csv(points: &[ProbePoint]) -> String {
    let mut s = String::from("b,mean_acc,std_acc\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", number(p.bound), number(p.mean_acc), number(p.std_acc));
    }
    s
}

fn run_id(cfg: &RunConfig, method: Method, seed: u64) -> String {
    format!("{}/{}/seed{}", cfg.dataset_name, method, seed)
}

pub fn summary_text(cfg: &RunConfig, cell: &CellResult) -> Result<String, HarnessError> {
    let mut s = String::new();
    let _ = writeln!(s, "run_id = {:?}", run_id(cfg, cell.method, cell.seed));
    let _ = writeln!(s, "dataset = {:?}", cfg.dataset_name);
    let _ = writeln!(s, "method = {:?}", cell.method.name());
    let _ = writeln!(s, "seed = {}", cell.seed);
    let _ = writeln!(s, "acc_t = {}", number(cell.outcome.acc.acc_t()?));
    let _ = writeln!(s, "acc_T = {}", number(cell.outcome.acc.acc_final()?));
    if let Some(pl) = cell.outcome.mean_pseudo_label_accuracy() {
        let _ = writeln!(s, "pseudo_label_accuracy = {}", number(pl));
    }
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn write_cell(cfg: &RunConfig, dir: &Path, cell: &CellResult) -> Result<Vec<String>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files = vec!["R.csv".to_string(), "summary.txt".to_string()];
    write(&dir.join("R.csv"), &r_matrix_csv(&cell.outcome.acc))?;
    write(&dir.join("summary.txt"), &summary_text(cfg, cell)?)?;
    if let Some(points) = &cell.probe {
        write(&dir.join("probe.csv"), &probe_csv(points))?;
        files.push("probe.csv".into());
    }
    if cfg.checkpoints {
        checkpoint::save(&dir.join("model.ckpt"), &cell.outcome.model)?;
        files.push("model.ckpt".into());
    }
    Ok(files)
}

/// Outcome of one cell as seen by the report.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub method: Method,
    pub seed: u64,
    /// `(acc_t, acc_T)` or the failure message.
    pub result: Result<(f64, f64), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }

    /// 0 when every cell succeeded, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        u8::from(self.failures() > 0)
    }
}

fn manifest_json(cfg: &RunConfig, entries: &[(usize, usize, Value)]) -> String {
    // config order, whatever order the cells finished in
    let mut sorted: Vec<&(usize, usize, Value)> = entries.iter().collect();
    sorted.sort_by_key(|(m, s, _)| (*m, *s));
    let doc = json!({
        "dataset": cfg.dataset_name,
        "config": cfg.to_text(),
        "cells": sorted.iter().map(|e| e.2.clone()).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest is plain json");
    text.push('\n');
    text
}

fn aggregate(report: &ExperimentReport, methods: &[Method]) -> (String, String) {
    let mut text = String::new();
    let mut csv = String::from("method,runs,acc_t_mean,acc_t_std,acc_T_mean,acc_T_std\n");
    for &m in methods {
        let ok: Vec<(f64, f64)> = report
            .cells
            .iter()
            .filter(|c| c.method == m)
            .filter_map(|c| c.result.clone().ok())
            .collect();
        let a: Vec<f64> = ok.iter().map(|v| v.0).collect();
        let b: Vec<f64> = ok.iter().map(|v| v.1).collect();
        match (mean_std(&a), mean_std(&b)) {
            (Ok(x), Ok(y)) => {
                let _ = writeln!(
                    text,
                    "{:<12} acc_t = {:.4} ± {:.4}   acc_T = {:.4} ± {:.4}   ({} runs)",
                    m.name(),
                    x.mean,
                    x.std,
                    y.mean,
                    y.std,
                    x.count
                );
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    m.name(),
                    x.count,
                    number(x.mean),
                    number(x.std),
                    number(y.mean),
                    number(y.std)
                );
            }
            _ => {
                let _ = writeln!(text, "{:<12} no successful runs", m.name());
                let _ = writeln!(csv, "{},0,,,,", m.name());
            }
        }
    }
    (text, csv)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs every (method, seed) cell in parallel. A failing cell is recorded
/// in the manifest and the rest proceed; only setup failures are errors.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport, HarnessError> {
    let root = cfg.output_dir.join(&cfg.dataset_name);
    std::fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
    write(&root.join("config.txt"), &cfg.to_text())?;
    let manifest_path = root.join("manifest.json");
    let manifest = Mutex::new(Vec::new());
    write(&manifest_path, &manifest_json(cfg, &[]))?;

    let grid: Vec<(usize, usize, Method, u64)> = cfg
        .methods
        .iter()
        .enumerate()
        .flat_map(|(mi, &m)| cfg.seeds.iter().enumerate().map(move |(si, &s)| (mi, si, m, s)))
        .collect();
    let cells: Vec<CellReport> = grid
        .par_iter()
        .map(|&(mi, si, method, seed)| {
            let rel = format!("{}/seed{}", method.name(), seed);
            let dir = root.join(&rel);
            let outcome = catch_unwind(AssertUnwindSafe(|| {
                let cell = run_cell(cfg, method, seed)?;
                let files = write_cell(cfg, &dir, &cell)?;
                let acc = (cell.outcome.acc.acc_t()?, cell.outcome.acc.acc_final()?);
                Ok::<_, HarnessError>((acc, files, cell.dropped_rows, cell.label_map))
            }))
            .unwrap_or_else(|p| Err(HarnessError::Panic(panic_message(p))));
            let mut entry = json!({
                "run_id": run_id(cfg, method, seed),
                "method": method.name(),
                "seed": seed,
                "config": cfg.cell(method, seed).to_text(),
            });
            let result = match outcome {
                Ok((acc, files, dropped, label_map)) => {
                    entry["status"] = json!("ok");
                    entry["acc_t"] = json!(acc.0);
                    entry["acc_T"] = json!(acc.1);
                    entry["artifacts"] = json!(files.iter().map(|f| format!("{rel}/{f}")).collect::<Vec<_>>());
                    entry["dropped_rows"] = json!(dropped);
                    entry["label_map"] = json!(label_map);
                    Ok(acc)
                }
                Err(e) => {
                    entry["status"] = json!("failed");
                    entry["error"] = json!(e.to_string());
                    eprintln!("cell {} failed: {e}", run_id(cfg, method, seed));
                    Err(e.to_string())
                }
            };
            {
                let mut guard = manifest.lock().unwrap_or_else(|p| p.into_inner());
                guard.push((mi, si, entry));
                if let Err(e) = write(&manifest_path, &manifest_json(cfg, &guard)) {
                    eprintln!("{e}");
                }
            }
            CellReport { method, seed, result }
        })
        .collect();

    let report = ExperimentReport { dir: root.clone(), cells };
    let entries = manifest.into_inner().unwrap_or_else(|p| p.into_inner());
    write(&manifest_path, &manifest_json(cfg, &entries))?;
    let (text, csv) = aggregate(&report, &cfg.methods);
    write(&root.join("summary.txt"), &text)?;
    write(&root.join("aggregate.csv"), &csv)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_matrix_leaves_the_upper_triangle_empty() {
        let r = AccMatrix::from_lower_rows(&[vec![0.5], vec![0.25, 1.0]]).unwrap();
        assert_eq!(r_matrix_csv(&r), "step,t1,t2\n1,0.5,\n2,0.25,1.0\n");
    }

    #[test]
    fn probe_rows_follow_the_bounds() {
        let pts = [ProbePoint {
            bound: 0.1,
            mean_acc: 0.75,
            std_acc: 0.0,
        }];
        assert_eq!(probe_csv(&pts), "b,mean_acc,std_acc\n0.1,0.75,0.0\n");
    }
}
