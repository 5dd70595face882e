use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{aggregate, AggregateRow, ModelKind, RunResult, TrainSize};
use crate::error::{Error, Result};
use crate::io::write_atomic;

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let err = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))
}

const RESULTS_HEADER: [&str; 7] = ["model", "train_size", "run", "seed", "test_auc", "val_auc", "wall_time_s"];
const AGGREGATE_HEADER: [&str; 5] = ["model", "train_size", "auc_mean", "auc_std", "boost_vs_bc"];

pub fn results_csv(results: &[RunResult]) -> Result<Vec<u8>> {
    csv_bytes(results, &RESULTS_HEADER)
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<Vec<u8>> {
    csv_bytes(rows, &AGGREGATE_HEADER)
}

pub fn write_results_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    write_atomic(path, &results_csv(results)?)
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_atomic(path, &aggregate_csv(rows)?)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str, header: &[&str]) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let bad = |line: usize, message: String| Error::Format { what, line, message };
    let found = r.headers().map_err(|e| bad(1, e.to_string()))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(bad(1, format!("expected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in r.deserialize::<T>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            bad(line, e.to_string())
        })?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<RunResult>> {
    let rows: Vec<RunResult> = read_csv(path, "results csv", &RESULTS_HEADER)?;
    for (i, r) in rows.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.test_auc) || !(0.0..=1.0).contains(&r.val_auc) {
            return Err(Error::Format {
                what: "results csv",
                line: i + 2,
                message: "AUROC outside [0, 1]".into(),
            });
        }
    }
    Ok(rows)
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    read_csv(path, "aggregate csv", &AGGREGATE_HEADER)
}

/// Fixed-width table of mean ± std (AUROC × 100) and boost over BC.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>10} {:>16} {:>10}", "model", "train_size", "test_auc (%)", "boost");
    for r in rows {
        let boost = r.boost_vs_bc.map_or_else(|| "-".to_string(), |b| format!("{b:+.2}"));
        let cell = format!("{:.2} ± {:.2}", r.auc_mean * 100.0, r.auc_std * 100.0);
        let _ = writeln!(out, "{:<8} {:>10} {:>16} {:>10}", r.model.name(), r.train_size.to_string(), cell, boost);
    }
    out
}

#[derive(Serialize)]
struct SeriesPoint {
    series: ModelKind,
    train_size: TrainSize,
    auc_mean: f64,
    auc_std: f64,
}

#[derive(Serialize)]
struct ViolinPoint {
    model: ModelKind,
    run: usize,
    test_auc: f64,
}

fn series(rows: &[AggregateRow], keep: impl Fn(ModelKind) -> bool) -> Vec<SeriesPoint> {
    let mut pts: Vec<SeriesPoint> = rows
        .iter()
        .filter(|r| keep(r.model))
        .map(|r| SeriesPoint {
            series: r.model,
            train_size: r.train_size,
            auc_mean: r.auc_mean,
            auc_std: r.auc_std,
        })
        .collect();
    pts.sort_by_key(|p| (p.series, p.train_size));
    pts
}

/// Paths written by `emit_report`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub results: PathBuf,
    pub aggregate: PathBuf,
    pub plot_heads: PathBuf,
    pub plot_all: PathBuf,
    pub violin_full: PathBuf,
    pub table: PathBuf,
}

impl ReportFiles {
    pub fn in_dir(dir: &Path) -> Self {
        ReportFiles {
            results: dir.join("results.csv"),
            aggregate: dir.join("aggregate.csv"),
            plot_heads: dir.join("plot_heads.csv"),
            plot_all: dir.join("plot_all.csv"),
            violin_full: dir.join("violin_full.csv"),
            table: dir.join("report.txt"),
        }
    }
}

/// Writes results, aggregate, figure series, the full-size violin input, and
/// a text table headed by `preamble`. Every file is written atomically.
pub fn emit_report(dir: &Path, results: &[RunResult], preamble: &str) -> Result<ReportFiles> {
    let files = ReportFiles::in_dir(dir);
    let rows = aggregate(results);
    write_atomic(&files.results, &results_csv(results)?)?;
    write_atomic(&files.aggregate, &aggregate_csv(&rows)?)?;
    let header = ["series", "train_size", "auc_mean", "auc_std"];
    let heads = series(&rows, |m| matches!(m, ModelKind::Head(_)));
    write_atomic(&files.plot_heads, &csv_bytes(&heads, &header)?)?;
    write_atomic(&files.plot_all, &csv_bytes(&series(&rows, |_| true), &header)?)?;
    let mut violin: Vec<ViolinPoint> = results
        .iter()
        .filter(|r| r.train_size == TrainSize::Full)
        .map(|r| ViolinPoint {
            model: r.model,
            run: r.run,
            test_auc: r.test_auc,
        })
        .collect();
    violin.sort_by_key(|v| (v.model, v.run));
    write_atomic(&files.violin_full, &csv_bytes(&violin, &["model", "run", "test_auc"])?)?;
    let mut text = String::from(preamble);
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&render_table(&rows));
    write_atomic(&files.table, text.as_bytes())?;
    Ok(files)
}

