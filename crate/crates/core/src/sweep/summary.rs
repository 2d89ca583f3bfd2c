use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CurvePoint, Experiment};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SummaryError {
    #[error("no successful points to summarize")]
    EmptyInput,
    #[error("points span several (experiment, λ, R) cells; summarize each cell separately")]
    MixedCells,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub peak_capacity: usize,
    pub peak_test_mse: f64,
    pub tail_test_mse: f64,
    pub second_descent_ratio: f64,
    /// Capacity reached right after the steepest decrease in mean test
    /// error; `None` with a single capacity.
    pub largest_drop_capacity: Option<usize>,
}

/// `(experiment, λ, R)`; repeats within a cell are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub experiment: Experiment,
    pub lambda: f64,
    #[serde(rename = "R")]
    pub r: f64,
}

impl CellKey {
    pub fn of(p: &CurvePoint) -> Self {
        Self { experiment: p.experiment, lambda: p.lambda, r: p.r }
    }

    fn same(&self, other: &Self) -> bool {
        self.experiment == other.experiment
            && self.lambda.to_bits() == other.lambda.to_bits()
            && self.r.to_bits() == other.r.to_bits()
    }
}

/// Mean test error per capacity, ascending in capacity.
pub fn mean_curve(points: &[CurvePoint], metric: impl Fn(&CurvePoint) -> f64) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in points.iter().filter(|p| p.is_ok()) {
        let e = acc.entry(p.capacity).or_insert((0.0, 0));
        e.0 += metric(p);
        e.1 += 1;
    }
    acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// Curve statistics over one cell's successful points.
///
/// The peak is searched over interior capacities (all capacities when there
/// are fewer than three); the tail is the mean at the largest capacity.
pub fn summarize(points: &[CurvePoint]) -> Result<Summary, SummaryError> {
    let ok: Vec<&CurvePoint> = points.iter().filter(|p| p.is_ok()).collect();
    let first = ok.first().ok_or(SummaryError::EmptyInput)?;
    let key = CellKey::of(first);
    if ok.iter().any(|p| !CellKey::of(p).same(&key)) {
        return Err(SummaryError::MixedCells);
    }
    let curve = mean_curve(points, |p| p.test_mse);
    let interior = if curve.len() >= 3 { &curve[1..curve.len() - 1] } else { &curve[..] };
    let (peak_capacity, peak_test_mse) = interior
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (c, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((c, m)),
        })
        .expect("non-empty curve");
    let tail_test_mse = curve.last().expect("non-empty curve").1;
    let largest_drop_capacity = curve
        .windows(2)
        .map(|w| (w[1].0, w[0].1 - w[1].1))
        .fold(None, |best: Option<(usize, f64)>, (c, drop)| match best {
            Some((_, bd)) if bd >= drop => best,
            _ => Some((c, drop)),
        })
        .map(|(c, _)| c);
    Ok(Summary {
        peak_capacity,
        peak_test_mse,
        tail_test_mse,
        second_descent_ratio: peak_test_mse / tail_test_mse,
        largest_drop_capacity,
    })
}

/// Splits points into cells in order of first appearance and summarizes
/// each. Cells without a successful point are skipped.
pub fn summarize_cells(points: &[CurvePoint]) -> Vec<(CellKey, Summary)> {
    let mut cells: Vec<(CellKey, Vec<CurvePoint>)> = Vec::new();
    for p in points {
        let key = CellKey::of(p);
        match cells.iter_mut().find(|(k, _)| k.same(&key)) {
            Some((_, v)) => v.push(p.clone()),
            None => cells.push((key, vec![p.clone()])),
        }
    }
    cells
        .into_iter()
        .filter_map(|(k, pts)| summarize(&pts).ok().map(|s| (k, s)))
        .collect()
}
