use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{summarize_cells, CellKey, CurvePoint, Summary, SweepConfig, SweepError};

pub const CSV_COLUMNS: &[&str] = &[
    "experiment",
    "seed",
    "capacity",
    "num_params",
    "lambda",
    "R",
    "train_mse",
    "test_mse",
    "train_error_rate",
    "test_error_rate",
    "weight_l2",
    "epochs_trained",
    "wall_time_ms",
    "status",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.display().to_string(), source }
}

/// File stem `<experiment>-<config hash>`.
pub fn output_stem(cfg: &SweepConfig) -> String {
    format!("{}-{}", cfg.experiment, cfg.hash())
}

pub fn write_csv_to<W: Write>(points: &[CurvePoint], out: W) -> Result<(), SweepError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|source| SweepError::Io { path: "<csv>".into(), source })?;
    Ok(())
}

pub fn write_csv(path: &Path, points: &[CurvePoint]) -> Result<(), SweepError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_csv_to(points, file)
}

pub fn csv_bytes(points: &[CurvePoint]) -> Result<Vec<u8>, SweepError> {
    let mut buf = Vec::new();
    write_csv_to(points, &mut buf)?;
    Ok(buf)
}

/// CSV with the `wall_time_ms` column removed, for replay comparisons.
pub fn csv_bytes_without_timing(points: &[CurvePoint]) -> Result<Vec<u8>, SweepError> {
    let full = csv_bytes(points)?;
    let timing = CSV_COLUMNS.iter().position(|c| *c == "wall_time_ms").expect("column exists");
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(full.as_slice());
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in r.records() {
        let rec = rec?;
        w.write_record(rec.iter().enumerate().filter(|(i, _)| *i != timing).map(|(_, f)| f))?;
    }
    w.into_inner().map_err(|e| SweepError::Io { path: "<csv>".into(), source: e.into_error() })
}

pub fn read_csv_from<R: Read>(input: R) -> Result<Vec<CurvePoint>, SweepError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(SweepError::SchemaMismatch(format!(
            "expected columns {}, found {}",
            CSV_COLUMNS.join(","),
            header.join(",")
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| SweepError::SchemaMismatch(format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<CurvePoint>, SweepError> {
    read_csv_from(File::open(path).map_err(io_err(path))?)
}

/// One entry of the summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub cell: CellKey,
    #[serde(flatten)]
    pub summary: Summary,
    /// `N·K`, where the linear output layer starts to interpolate.
    pub threshold_params: usize,
    pub n_train: usize,
    pub classes: usize,
}

/// Writes one summary per `(experiment, λ, R)` cell.
pub fn write_summary_json(
    path: &Path,
    points: &[CurvePoint],
    n_train: usize,
    classes: usize,
) -> Result<Vec<CellSummary>, SweepError> {
    let cells: Vec<CellSummary> = summarize_cells(points)
        .into_iter()
        .map(|(cell, summary)| CellSummary { cell, summary, threshold_params: n_train * classes, n_train, classes })
        .collect();
    let file = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(file, &cells)?;
    Ok(cells)
}
