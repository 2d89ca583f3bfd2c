//! Gnuplot script emission for sweep CSVs.
//!
//! The script reads only `<stem>.plot.csv`, which holds the repeat-averaged
//! curve of every `(λ, R)` cell, and writes one PNG per cell.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use descentlab::sweep::{self, mean_curve, CellKey, CellSummary, CurvePoint, SweepError};

const PLOT_COLUMNS: &str = "cell,experiment,lambda,R,capacity,num_params,train_mse,test_mse,train_error_rate,test_error_rate";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.display().to_string(), source }
}

/// Groups points by cell in order of first appearance.
pub fn cells(points: &[CurvePoint]) -> Vec<(CellKey, Vec<CurvePoint>)> {
    let mut out: Vec<(CellKey, Vec<CurvePoint>)> = Vec::new();
    for p in points {
        let key = CellKey::of(p);
        let same = |k: &CellKey| {
            k.experiment == key.experiment && k.lambda.to_bits() == key.lambda.to_bits() && k.r.to_bits() == key.r.to_bits()
        };
        match out.iter_mut().find(|(k, _)| same(k)) {
            Some((_, v)) => v.push(p.clone()),
            None => out.push((key, vec![p.clone()])),
        }
    }
    out
}

fn threshold_from_summary(csv: &Path) -> Option<f64> {
    let json = csv.with_extension("summary.json");
    let text = fs::read_to_string(&json).ok()?;
    let cells: Vec<CellSummary> = serde_json::from_str(&text).ok()?;
    cells.first().map(|c| c.threshold_params as f64)
}

/// Mean-curve CSV: one row per cell and capacity.
pub fn plot_csv(cells: &[(CellKey, Vec<CurvePoint>)]) -> String {
    let mut s = format!("# {PLOT_COLUMNS}\n");
    for (i, (key, pts)) in cells.iter().enumerate() {
        let params = mean_curve(pts, |p| p.num_params as f64);
        let train = mean_curve(pts, |p| p.train_mse);
        let test = mean_curve(pts, |p| p.test_mse);
        let train_err = mean_curve(pts, |p| p.train_error_rate);
        let test_err = mean_curve(pts, |p| p.test_error_rate);
        for j in 0..params.len() {
            writeln!(
                s,
                "{i},{},{:e},{:e},{},{},{:e},{:e},{:e},{:e}",
                key.experiment, key.lambda, key.r, params[j].0, params[j].1, train[j].1, test[j].1, train_err[j].1, test_err[j].1
            )
            .expect("write to string");
        }
    }
    s
}

/// Gnuplot script with one plot per cell; `data` is the file name of the
/// mean-curve CSV relative to the script.
pub fn script(cells: &[(CellKey, Vec<CurvePoint>)], data: &str, stem: &str, threshold: Option<f64>) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset datafile commentschars '#'\n");
    s.push_str("set terminal pngcairo size 900,600\nset logscale y\nset key top right\nset grid\n");
    s.push_str("set xlabel 'number of parameters'\nset ylabel 'mean squared error'\n");
    if let Some(t) = threshold {
        writeln!(s, "set arrow 1 from {t}, graph 0 to {t}, graph 1 nohead dashtype 2 lc rgb 'gray40'").unwrap();
        writeln!(s, "set label 1 'N·K' at {t}, graph 0.95 offset 0.5,0").unwrap();
    }
    for (i, (key, _)) in cells.iter().enumerate() {
        writeln!(s, "\nset output '{stem}-cell{i}.png'").unwrap();
        writeln!(s, "set title '{}, λ = {:e}, R = {:e}'", key.experiment, key.lambda, key.r).unwrap();
        writeln!(
            s,
            "plot '{data}' using ($1 == {i} ? $6 : 1/0):8 with linespoints title 'test', \\\n     '{data}' using ($1 == {i} ? $6 : 1/0):7 with linespoints title 'train'"
        )
        .unwrap();
    }
    s
}

/// Writes `<stem>.gnuplot` and `<stem>.plot.csv` and returns their paths.
pub fn emit(csv: &Path, threshold: Option<f64>, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, SweepError> {
    let points = sweep::read_csv(csv)?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let grouped = cells(&points);
    if grouped.is_empty() {
        warn!("{} has no data rows; the script contains no plots", csv.display());
    }
    let threshold = threshold.or_else(|| threshold_from_summary(csv));
    if threshold.is_none() && !grouped.is_empty() {
        warn!("no threshold given and no summary JSON next to {}; omitting the threshold line", csv.display());
    }

    let data_name = format!("{stem}.plot.csv");
    let data_path = dir.join(&data_name);
    let script_path = dir.join(format!("{stem}.gnuplot"));
    for p in [&data_path, &script_path] {
        if p == csv {
            return Err(SweepError::Io {
                path: p.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite the input"),
            });
        }
    }
    fs::write(&data_path, plot_csv(&grouped)).map_err(io_err(&data_path))?;
    fs::write(&script_path, script(&grouped, &data_name, &stem, threshold)).map_err(io_err(&script_path))?;
    Ok(vec![script_path, data_path])
}
