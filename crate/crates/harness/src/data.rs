//! CSV tables and stream construction.
//!
//! A table has one row per instance: feature columns followed by an
//! integer label column, comma separated. An optional first header line is
//! skipped when asked for.

use std::path::Path;

use genreplay_core::stream::{generate_drift_stream, induce_drift_order, segment_stream};
use genreplay_core::{LabeledSet, RealMatrix, StreamSegment};

use crate::config::{DatasetSource, RunConfig};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Distinct labels, sorted, become `0..C`.
    Dense,
    /// Labels are already class indices below `classes`.
    Raw { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub data: LabeledSet,
    /// `label_map[k]` is the file's label for class `k`.
    pub label_map: Vec<i64>,
}

fn parse_label(cell: &str) -> Option<i64> {
    if let Ok(v) = cell.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = cell.parse().ok()?;
    (v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

pub fn load_csv(path: &Path, header: bool, mode: LabelMode) -> Result<Table, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_csv(file, header, mode).map_err(|e| match e {
        HarnessError::Table { line, reason, .. } => HarnessError::Table {
            path: path.display().to_string(),
            line,
            reason,
        },
        other => other,
    })
}

pub fn read_csv<R: std::io::Read>(input: R, header: bool, mode: LabelMode) -> Result<Table, HarnessError> {
    let err = |line: u64, reason: String| HarnessError::Table {
        path: String::new(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    let mut last_line = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        last_line = line;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(err(line, format!("expected {w} fields, found {}", record.len())));
        }
        if w < 2 {
            return Err(err(line, "need at least one feature column and a label".into()));
        }
        for (col, cell) in record.iter().take(w - 1).enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| err(line, format!("column {}: \"{cell}\" is not a finite number", col + 1)))?;
            values.push(v);
        }
        let cell = &record[w - 1];
        raw_labels.push(parse_label(cell).ok_or_else(|| err(line, format!("label \"{cell}\" is not an integer")))?);
    }
    let Some(w) = width else {
        return Err(err(last_line.max(1), "no data rows".into()));
    };
    let n = raw_labels.len();
    let (labels, label_map, classes) = match mode {
        LabelMode::Dense => {
            let mut map = raw_labels.clone();
            map.sort_unstable();
            map.dedup();
            let labels = raw_labels
                .iter()
                .map(|v| map.binary_search(v).unwrap())
                .collect::<Vec<_>>();
            let classes = map.len();
            (labels, map, classes)
        }
        LabelMode::Raw { classes } => {
            let mut labels = Vec::with_capacity(n);
            for (i, &v) in raw_labels.iter().enumerate() {
                match usize::try_from(v).ok().filter(|&v| v < classes) {
                    Some(v) => labels.push(v),
                    None => {
                        return Err(err(0, format!("row {}: label {v} is not in 0..{classes}", i + 1)));
                    }
                }
            }
            (labels, (0..classes as i64).collect(), classes)
        }
    };
    let features = RealMatrix::from_vec(n, w - 1, values)?;
    Ok(Table {
        data: LabeledSet::new(features, labels, classes.max(1))?,
        label_map,
    })
}

fn number(v: f64) -> String {
    format!("{v:?}")
}

/// Feature columns, then the label column when `labels` is given.
pub fn write_csv(path: &Path, features: &RealMatrix, labels: Option<&[usize]>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Output(format!("{}: {e}", path.display())))?;
    for i in 0..features.rows() {
        let mut row: Vec<String> = features.row(i).iter().map(|v| number(*v)).collect();
        if let Some(ys) = labels {
            row.push(ys[i].to_string());
        }
        w.write_record(&row)
            .map_err(|e| HarnessError::Output(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Gold set and segments for one cell.
#[derive(Debug, Clone)]
pub struct BuiltStream {
    pub gold: LabeledSet,
    pub segments: Vec<StreamSegment>,
    /// Trailing table rows that did not fill a step.
    pub dropped: usize,
    pub label_map: Vec<i64>,
}

pub fn build_stream(cfg: &RunConfig, seed: u64) -> Result<BuiltStream, HarnessError> {
    let stream_seed = cfg.stream_seed.unwrap_or(seed);
    match &cfg.source {
        DatasetSource::Synthetic(family) => {
            let spec = genreplay_core::DriftFamily {
                seed: stream_seed,
                ..family.clone()
            }
            .to_spec()?;
            let (gold, segments) = generate_drift_stream(&spec)?;
            Ok(BuiltStream {
                label_map: (0..gold.classes() as i64).collect(),
                gold,
                segments,
                dropped: 0,
            })
        }
        DatasetSource::Csv {
            path,
            header,
            drift_order,
        } => {
            let table = load_csv(path, *header, LabelMode::Dense)?;
            let data = if *drift_order {
                table.data.permuted(&induce_drift_order(&table.data)?)
            } else {
                table.data
            };
            let cut = segment_stream(&data, cfg.per_step, cfg.test_count, stream_seed)?;
            Ok(BuiltStream {
                gold: cut.gold,
                segments: cut.segments,
                dropped: cut.dropped,
                label_map: table.label_map,
            })
        }
    }
}
