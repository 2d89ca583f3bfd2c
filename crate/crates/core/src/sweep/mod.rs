//! Experiment harness: grids over capacity, λ, R and repeats, one
//! [`CurvePoint`] per grid cell, written in grid order.

mod config;
mod io;
mod summary;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset};
use crate::features::FeatureMap;
use crate::mlp::{self, MlpError};
use crate::rng;
use crate::solver::{self, RidgeProblem};

pub use config::{ConfigError, DataKind, SweepConfig, CONFIG_KEYS};
pub use io::{
    csv_bytes, csv_bytes_without_timing, output_stem, read_csv, read_csv_from, write_csv, write_csv_to,
    write_summary_json, CellSummary, CSV_COLUMNS,
};
pub use summary::{mean_curve, summarize, summarize_cells, CellKey, Summary, SummaryError};

pub const STATUS_OK: &str = "ok";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    FeatureSweep,
    AnchorSweep,
    LambdaSweep,
    NnReuseSweep,
    NnScratchSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::FeatureSweep,
        Experiment::AnchorSweep,
        Experiment::LambdaSweep,
        Experiment::NnReuseSweep,
        Experiment::NnScratchSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::FeatureSweep => "feature_sweep",
            Experiment::AnchorSweep => "anchor_sweep",
            Experiment::LambdaSweep => "lambda_sweep",
            Experiment::NnReuseSweep => "nn_reuse_sweep",
            Experiment::NnScratchSweep => "nn_scratch_sweep",
        }
    }

    pub fn is_nn(self) -> bool {
        matches!(self, Experiment::NnReuseSweep | Experiment::NnScratchSweep)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('-', "_");
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = Experiment::ALL.iter().map(|e| e.as_str()).collect();
                format!("unknown experiment '{s}', expected one of {}", names.join(", "))
            })
    }
}

/// One row of results. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub experiment: Experiment,
    pub seed: u64,
    /// `D` for feature models, `h` for networks.
    pub capacity: usize,
    pub num_params: usize,
    pub lambda: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_error_rate: f64,
    pub test_error_rate: f64,
    pub weight_l2: f64,
    /// Networks only.
    pub epochs_trained: Option<usize>,
    pub wall_time_ms: f64,
    /// [`STATUS_OK`] or the reason the point failed.
    pub status: String,
}

impl CurvePoint {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    fn failed(experiment: Experiment, seed: u64, capacity: usize, num_params: usize, lambda: f64, r: f64, reason: String) -> Self {
        Self {
            experiment,
            seed,
            capacity,
            num_params,
            lambda,
            r,
            train_mse: f64::NAN,
            test_mse: f64::NAN,
            train_error_rate: f64::NAN,
            test_error_rate: f64::NAN,
            weight_l2: f64::NAN,
            epochs_trained: None,
            wall_time_ms: 0.0,
            status: format!("error: {reason}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Mlp(#[from] MlpError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Seed of repeat `repeat`; also the value of the `seed` column.
pub fn repeat_seed(master: u64, repeat: usize) -> u64 {
    master.wrapping_add(repeat as u64)
}

const FEATURE_TAG: u64 = 0x6665_6174;
const ANCHOR_TAG: u64 = 0x616e_6368;

/// Feature-map seed: independent of capacity so maps nest along the grid.
pub fn feature_seed(seed: u64, experiment: Experiment) -> u64 {
    rng::derive_seed(seed, &[FEATURE_TAG, experiment.tag()])
}

/// Anchor seed for one grid cell.
pub fn anchor_seed(seed: u64, experiment: Experiment, capacity: usize, lambda_idx: usize, r_idx: usize) -> u64 {
    rng::derive_seed(seed, &[ANCHOR_TAG, experiment.tag(), capacity as u64, lambda_idx as u64, r_idx as u64])
}

/// Geometric grid from `lo` to `hi` with `points` steps, merged with every
/// `max(1, round(0.04·n))`-th integer within ±20% of `n`.
pub fn default_d_grid(n: usize, lo: usize, hi: usize, points: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let (lo_f, hi_f) = (lo.max(1) as f64, hi.max(lo.max(1)) as f64);
    let steps = points.max(2) - 1;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        grid.push((lo_f * (hi_f / lo_f).powf(t)).round() as usize);
    }
    let a = (0.8 * n as f64).ceil() as usize;
    let b = (1.2 * n as f64).floor() as usize;
    let step = ((0.04 * n as f64).round() as usize).max(1);
    grid.extend((a..=b).step_by(step).filter(|d| (lo..=hi).contains(d)));
    if (lo..=hi).contains(&n) {
        grid.push(n);
    }
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Runs the configured experiment on an already-loaded dataset.
pub fn run_sweep(cfg: &SweepConfig, dataset: &Dataset) -> Result<Vec<CurvePoint>, SweepError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    pool.install(|| {
        if cfg.experiment.is_nn() {
            run_nn_sweep(cfg, dataset)
        } else {
            run_feature_sweep(cfg, dataset)
        }
    })
}

fn anchor_for(cfg: &SweepConfig, seed: u64, d: usize, k: usize, r: f64) -> DMatrix<f64> {
    let m = d + usize::from(cfg.include_bias);
    let drawn = if cfg.include_bias && !cfg.anchor_bias { d } else { m };
    if r == 0.0 || drawn == 0 || k == 0 {
        return DMatrix::zeros(m, k);
    }
    let per_column = r / (k as f64).sqrt();
    let a = if cfg.anchor_per_column {
        solver::sample_anchor(seed, drawn, k, per_column)
    } else {
        solver::replicated_anchor(seed, drawn, k, per_column)
    };
    a.resize_vertically(m, 0.0)
}

/// Appends the bias column to the first `d` ReLU features.
fn slice_features(relu: &DMatrix<f64>, d: usize, bias: bool) -> DMatrix<f64> {
    let mut out = relu.columns(0, d).into_owned();
    if bias {
        out = out.insert_column(d, 1.0);
    }
    out
}

struct FeatureCache {
    train: DMatrix<f64>,
    test: DMatrix<f64>,
}

/// Random-feature sweep over `D × λ × R × repeats`.
///
/// Rows come out ordered by λ, then R, then repeat, then `D`.
pub fn run_feature_sweep(cfg: &SweepConfig, dataset: &Dataset) -> Result<Vec<CurvePoint>, SweepError> {
    if cfg.experiment.is_nn() {
        return Err(ConfigError::Invalid(format!("{} is not a feature experiment", cfg.experiment)).into());
    }
    let d_grid = cfg.capacity_grid(dataset.split.train.len());
    let d_max = d_grid.iter().copied().max().unwrap_or(0);
    let (xtr, ztr, ltr) = dataset.train();
    let (xte, zte, lte) = dataset.test();
    let k = dataset.classes;

    let caches: Vec<FeatureCache> = (0..cfg.repeats)
        .into_par_iter()
        .map(|rep| {
            let seed = repeat_seed(cfg.seed, rep);
            let map = FeatureMap::new(feature_seed(seed, cfg.experiment), dataset.input_dim(), d_max, cfg.feature_scale, false);
            let train = map.transform(&xtr).expect("feature map built for this dataset");
            let test = map.transform(&xte).expect("feature map built for this dataset");
            FeatureCache { train, test }
        })
        .collect();

    let mut tasks = Vec::new();
    for (li, &lambda) in cfg.lambda_grid.iter().enumerate() {
        for (ri, &r) in cfg.r_grid.iter().enumerate() {
            for rep in 0..cfg.repeats {
                for &d in &d_grid {
                    tasks.push((li, lambda, ri, r, rep, d));
                }
            }
        }
    }

    let points = tasks
        .into_par_iter()
        .map(|(li, lambda, ri, r, rep, d)| {
            let started = Instant::now();
            let seed = repeat_seed(cfg.seed, rep);
            let m = d + usize::from(cfg.include_bias);
            let cache = &caches[rep];
            let phi = slice_features(&cache.train, d, cfg.include_bias);
            let phi_test = slice_features(&cache.test, d, cfg.include_bias);
            let anchor = anchor_for(cfg, anchor_seed(seed, cfg.experiment, d, li, ri), d, k, r);
            let outcome = RidgeProblem::new(phi.clone(), ztr.clone(), lambda, Some(anchor))
                .and_then(|prob| solver::anchored_ridge_solve(&prob))
                .and_then(|sol| {
                    let train = solver::evaluate(&sol.weights, &phi, &ztr, &ltr)?;
                    let test = solver::evaluate(&sol.weights, &phi_test, &zte, &lte)?;
                    Ok((sol, train, test))
                });
            match outcome {
                Ok((sol, train, test)) => CurvePoint {
                    experiment: cfg.experiment,
                    seed,
                    capacity: d,
                    num_params: m * k,
                    lambda,
                    r,
                    train_mse: train.mse,
                    test_mse: test.mse,
                    train_error_rate: train.error_rate,
                    test_error_rate: test.error_rate,
                    weight_l2: sol.weight_l2,
                    epochs_trained: None,
                    wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
                    status: STATUS_OK.to_string(),
                },
                Err(e) => {
                    log::warn!("{} D={d} λ={lambda} R={r} seed={seed}: {e}", cfg.experiment);
                    CurvePoint::failed(cfg.experiment, seed, d, m * k, lambda, r, e.to_string())
                }
            }
        })
        .collect();
    Ok(points)
}

/// Network sweep over `h × repeats`, rows ordered by repeat then `h`.
pub fn run_nn_sweep(cfg: &SweepConfig, dataset: &Dataset) -> Result<Vec<CurvePoint>, SweepError> {
    if !cfg.experiment.is_nn() {
        return Err(ConfigError::Invalid(format!("{} is not a network experiment", cfg.experiment)).into());
    }
    let h_grid = cfg.h_grid.clone();
    let (p, k) = (dataset.input_dim(), dataset.classes);
    let params = |h: usize| h * p + h + k * h + k;
    let init_scale = cfg.effective_init_scale();
    let per_repeat: Vec<Vec<CurvePoint>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|rep| -> Result<Vec<CurvePoint>, SweepError> {
            let seed = repeat_seed(cfg.seed, rep);
            let train_cfg = cfg.train_config(seed);
            let results: Vec<Result<CurvePoint, MlpError>> = match cfg.experiment {
                Experiment::NnReuseSweep => mlp::reuse_sweep_points(dataset, &h_grid, cfg.switch_off_h, &train_cfg, init_scale)?,
                _ => h_grid
                    .par_iter()
                    .map(|&h| mlp::scratch_point(dataset, h, &train_cfg, init_scale, cfg.experiment))
                    .collect(),
            };
            Ok(results
                .into_iter()
                .zip(&h_grid)
                .map(|(res, &h)| {
                    res.unwrap_or_else(|e| {
                        log::warn!("{} h={h} seed={seed}: {e}", cfg.experiment);
                        CurvePoint::failed(cfg.experiment, seed, h, params(h), 0.0, 0.0, e.to_string())
                    })
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(per_repeat.into_iter().flatten().collect())
}
