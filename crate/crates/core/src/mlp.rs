//! One-hidden-layer ReLU network trained by mini-batch SGD on squared error
//! against one-hot targets, plus the width-growth protocol that reuses a
//! trained network's weights when the hidden layer is widened.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{select_rows, Dataset};
use crate::rng;
use crate::solver::prediction_metrics;
use crate::sweep::{CurvePoint, Experiment, STATUS_OK};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MlpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}; the learning rate is probably too high")]
    NonFiniteValue(String),
    #[error("cannot shrink hidden layer from {from} to {to}")]
    ShrinkNotAllowed { from: usize, to: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("weight-reuse chain broken at h = {at}")]
    ChainBroken { at: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopReason {
    EarlyStopped,
    #[default]
    EpochCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpState {
    /// `h × P`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `K × h`
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub init_scale: f64,
    /// Epochs run on this network, including ones inherited through growth.
    pub total_epochs_trained: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            max_epochs: 500,
            patience: 20,
            val_fraction: 0.1,
            seed: 0,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |m: String| Err(MlpError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.early_stop && self.patience == 0 {
            return bad("patience must be ≥ 1 with early stopping".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Gradient of the mean squared error with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

// Substream layout: neuron j draws its input weights from stream j and its
// output weights from stream OUT_STREAM + j, so widening never redraws
// existing neurons.
const OUT_STREAM: u64 = 1 << 32;

fn neuron_in(seed: u64, j: usize, p: usize, std: f64) -> Vec<f64> {
    let mut g = rng::stream_rng(seed, j as u64);
    (0..p).map(|_| std * rng::standard_normal(&mut g)).collect()
}

fn neuron_out(seed: u64, j: usize, k: usize, std: f64) -> Vec<f64> {
    let mut g = rng::stream_rng(seed, OUT_STREAM + j as u64);
    (0..k).map(|_| std * rng::standard_normal(&mut g)).collect()
}

/// Weights `~ N(0, init_scale² / fan_in)` per layer, biases zero.
pub fn init_mlp(seed: u64, p: usize, h: usize, k: usize, init_scale: f64) -> Result<MlpState, MlpError> {
    if !(init_scale > 0.0 && init_scale.is_finite()) {
        return Err(MlpError::InvalidConfig(format!("init_scale must be > 0, got {init_scale}")));
    }
    let std1 = init_scale / (p.max(1) as f64).sqrt();
    let std2 = init_scale / (h.max(1) as f64).sqrt();
    let mut w1 = DMatrix::zeros(h, p);
    let mut w2 = DMatrix::zeros(k, h);
    for j in 0..h {
        w1.row_mut(j).copy_from_slice(&neuron_in(seed, j, p, std1));
        w2.column_mut(j).copy_from_slice(&neuron_out(seed, j, k, std2));
    }
    Ok(MlpState {
        w1,
        b1: DVector::zeros(h),
        w2,
        b2: DVector::zeros(k),
        init_scale,
        total_epochs_trained: 0,
        stop_reason: StopReason::EpochCap,
    })
}

struct Activations {
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
    out: DMatrix<f64>,
}

impl MlpState {
    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w2.nrows()
    }

    /// `h·P + h + K·h + K`.
    pub fn param_count(&self) -> usize {
        let (h, p, k) = (self.hidden(), self.input_dim(), self.outputs());
        h * p + h + k * h + k
    }

    /// Frobenius norms of the two weight matrices.
    pub fn layer_norms(&self) -> (f64, f64) {
        (self.w1.norm(), self.w2.norm())
    }

    pub fn weight_l2(&self) -> f64 {
        let (a, b) = self.layer_norms();
        (a * a + b * b).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).chain(self.b1.iter()).chain(self.b2.iter()).all(|v| v.is_finite())
    }

    fn activations(&self, x: &DMatrix<f64>) -> Activations {
        let mut pre = x * self.w1.transpose();
        for mut row in pre.row_iter_mut() {
            row += self.b1.transpose();
        }
        let hidden = pre.map(|v| v.max(0.0));
        let mut out = &hidden * self.w2.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b2.transpose();
        }
        Activations { pre, hidden, out }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), MlpError> {
        if x.ncols() != self.input_dim() {
            return Err(MlpError::DimensionMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `ReLU(X W1ᵀ + b1) W2ᵀ + b2`, one row per input row.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, MlpError> {
        self.check_input(x)?;
        let out = self.activations(x).out;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MlpError::NonFiniteValue("network output".into()));
        }
        Ok(out)
    }

    /// `(1/(n·K)) Σ ‖f(x) − z‖²`.
    pub fn mse(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64, MlpError> {
        let out = self.forward(x)?;
        Ok((out - z).norm_squared() / (z.nrows() * z.ncols()) as f64)
    }

    /// Loss and its gradient by backpropagation.
    pub fn gradients(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<(f64, Gradients), MlpError> {
        self.check_input(x)?;
        if z.shape() != (x.nrows(), self.outputs()) {
            return Err(MlpError::DimensionMismatch(format!(
                "targets are {:?}, expected {:?}",
                z.shape(),
                (x.nrows(), self.outputs())
            )));
        }
        let act = self.activations(x);
        let diff = &act.out - z;
        let count = (z.nrows() * z.ncols()) as f64;
        let loss = diff.norm_squared() / count;
        let d_out = diff * (2.0 / count);
        let w2 = d_out.tr_mul(&act.hidden);
        let b2 = col_sums(&d_out);
        let mut d_hidden = &d_out * &self.w2;
        d_hidden.zip_apply(&act.pre, |g, pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = d_hidden.tr_mul(x);
        let b1 = col_sums(&d_hidden);
        Ok((loss, Gradients { w1, b1, w2, b2 }))
    }

    fn step(&mut self, g: &Gradients, lr: f64) {
        self.w1 -= &g.w1 * lr;
        self.b1 -= &g.b1 * lr;
        self.w2 -= &g.w2 * lr;
        self.b2 -= &g.b2 * lr;
    }

    /// One pass of mini-batch SGD over the rows in an order shuffled by
    /// `shuffle_seed`. Returns the epoch's mean training loss, averaged
    /// over batches before each update.
    pub fn sgd_epoch(
        &mut self,
        x: &DMatrix<f64>,
        z: &DMatrix<f64>,
        cfg: &TrainConfig,
        shuffle_seed: u64,
    ) -> Result<f64, MlpError> {
        let n = x.nrows();
        if n == 0 {
            return Err(MlpError::InvalidConfig("no training rows".into()));
        }
        if cfg.batch_size == 0 || cfg.batch_size > n {
            return Err(MlpError::InvalidConfig(format!(
                "batch_size {} must lie in 1..={n}",
                cfg.batch_size
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut order, &mut rng::rng(shuffle_seed));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = select_rows(x, batch);
            let zb = select_rows(z, batch);
            let (loss, grads) = self.gradients(&xb, &zb)?;
            if !loss.is_finite() {
                return Err(MlpError::NonFiniteValue("training loss".into()));
            }
            total += loss * batch.len() as f64;
            if cfg.learning_rate > 0.0 {
                self.step(&grads, cfg.learning_rate);
            }
        }
        if !self.is_finite() {
            return Err(MlpError::NonFiniteValue("network weights".into()));
        }
        Ok(total / n as f64)
    }

    /// Widens the hidden layer to `new_h`. Existing weights are kept
    /// bit-exactly; each new neuron is drawn at `init_scale` with a fan-in of
    /// `P` for its input weights and `new_h` for its output weights.
    pub fn grow_hidden(&self, seed: u64, new_h: usize) -> Result<MlpState, MlpError> {
        let h = self.hidden();
        if new_h < h {
            return Err(MlpError::ShrinkNotAllowed { from: h, to: new_h });
        }
        let (p, k) = (self.input_dim(), self.outputs());
        let std1 = self.init_scale / (p.max(1) as f64).sqrt();
        let std2 = self.init_scale / (new_h.max(1) as f64).sqrt();
        let mut w1 = self.w1.clone().resize_vertically(new_h, 0.0);
        let mut w2 = self.w2.clone().resize_horizontally(new_h, 0.0);
        for j in h..new_h {
            w1.row_mut(j).copy_from_slice(&neuron_in(seed, j, p, std1));
            w2.column_mut(j).copy_from_slice(&neuron_out(seed, j, k, std2));
        }
        Ok(MlpState {
            w1,
            b1: self.b1.clone().resize_vertically(new_h, 0.0),
            w2,
            b2: self.b2.clone(),
            ..self.clone()
        })
    }
}

/// Relative error `‖g_bp − g_fd‖ / max(‖g_bp‖, ‖g_fd‖)` per parameter
/// tensor, in the order `(W1, b1, W2, b2)`, against central differences
/// with step `eps`.
pub fn gradient_check(state: &MlpState, x: &DMatrix<f64>, z: &DMatrix<f64>, eps: f64) -> Result<[f64; 4], MlpError> {
    let (_, g) = state.gradients(x, z)?;
    let loss = |s: &MlpState| s.mse(x, z);
    let mut fd = Gradients {
        w1: DMatrix::zeros(g.w1.nrows(), g.w1.ncols()),
        b1: DVector::zeros(g.b1.len()),
        w2: DMatrix::zeros(g.w2.nrows(), g.w2.ncols()),
        b2: DVector::zeros(g.b2.len()),
    };
    fn param(s: &mut MlpState, tensor: usize) -> &mut [f64] {
        match tensor {
            0 => s.w1.as_mut_slice(),
            1 => s.b1.as_mut_slice(),
            2 => s.w2.as_mut_slice(),
            _ => s.b2.as_mut_slice(),
        }
    }
    let mut probe = state.clone();
    for tensor in 0..4 {
        let len = param(&mut probe, tensor).len();
        for i in 0..len {
            let orig = param(&mut probe, tensor)[i];
            param(&mut probe, tensor)[i] = orig + eps;
            let up = loss(&probe)?;
            param(&mut probe, tensor)[i] = orig - eps;
            let down = loss(&probe)?;
            param(&mut probe, tensor)[i] = orig;
            let d = (up - down) / (2.0 * eps);
            match tensor {
                0 => fd.w1.as_mut_slice()[i] = d,
                1 => fd.b1[i] = d,
                2 => fd.w2.as_mut_slice()[i] = d,
                _ => fd.b2[i] = d,
            }
        }
    }
    let rel = |a: f64, b: f64, diff: f64| if a.max(b) == 0.0 { 0.0 } else { diff / a.max(b) };
    Ok([
        rel(g.w1.norm(), fd.w1.norm(), (&g.w1 - &fd.w1).norm()),
        rel(g.b1.norm(), fd.b1.norm(), (&g.b1 - &fd.b1).norm()),
        rel(g.w2.norm(), fd.w2.norm(), (&g.w2 - &fd.w2).norm()),
        rel(g.b2.norm(), fd.b2.norm(), (&g.b2 - &fd.b2).norm()),
    ])
}

fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based within this training run.
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned, when early stopping is on.
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
    /// Frobenius norms of `(W1, W2)` of the returned network.
    pub layer_norms: (f64, f64),
}

/// Patience bookkeeping: tracks the best validation loss seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if val >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

const VAL_STREAM: u64 = 0x7661_6c;
const EPOCH_STREAM: u64 = 0x6570_6f63;

/// Splits train-split row indices into `(fit, validation)`.
pub fn validation_split(train: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = train.to_vec();
    rng::shuffle(&mut idx, &mut rng::rng(rng::derive_seed(seed, &[VAL_STREAM])));
    let n = idx.len();
    let n_val = if n < 2 { 0 } else { ((val_fraction * n as f64).round() as usize).clamp(1, n - 1) };
    let fit = idx.split_off(n_val);
    (fit, idx)
}

/// Trains on the dataset's train split, holding out `val_fraction` of it for
/// validation. The test split is never read.
///
/// With early stopping, training halts after `patience` epochs without a
/// strict improvement in validation loss and the best-validation weights
/// are returned. Without it the run goes to `max_epochs`.
pub fn train(state: &MlpState, dataset: &Dataset, cfg: &TrainConfig) -> Result<(MlpState, TrainLog), MlpError> {
    cfg.validate()?;
    let (fit_idx, val_idx) = validation_split(&dataset.split.train, cfg.val_fraction, cfg.seed);
    let (xf, zf, _) = dataset.rows(&fit_idx);
    let (xv, zv, _) = dataset.rows(&val_idx);
    train_on(state, (&xf, &zf), (&xv, &zv), cfg)
}

/// [`train`] on explicit fit/validation matrices.
pub fn train_on(
    state: &MlpState,
    fit: (&DMatrix<f64>, &DMatrix<f64>),
    val: (&DMatrix<f64>, &DMatrix<f64>),
    cfg: &TrainConfig,
) -> Result<(MlpState, TrainLog), MlpError> {
    let mut current = state.clone();
    let mut log = TrainLog::default();
    if cfg.max_epochs == 0 {
        current.stop_reason = StopReason::EpochCap;
        log.layer_norms = current.layer_norms();
        return Ok((current, log));
    }
    let batch = TrainConfig {
        batch_size: cfg.batch_size.min(fit.0.nrows().max(1)),
        ..cfg.clone()
    };
    let mut stopper = EarlyStopper::new(cfg.patience.max(1));
    let mut best_state: Option<MlpState> = None;
    let mut reason = StopReason::EpochCap;
    for epoch in 1..=cfg.max_epochs {
        let shuffle_seed = rng::derive_seed(cfg.seed, &[EPOCH_STREAM, current.total_epochs_trained as u64]);
        let train_mse = current.sgd_epoch(fit.0, fit.1, &batch, shuffle_seed)?;
        current.total_epochs_trained += 1;
        let val_mse = if val.0.nrows() > 0 { current.mse(val.0, val.1)? } else { train_mse };
        log.epochs.push(EpochRecord { epoch, train_mse, val_mse });
        if cfg.early_stop {
            match stopper.observe(epoch, val_mse) {
                StopDecision::Improved => best_state = Some(current.clone()),
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    reason = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }
    let total = current.total_epochs_trained;
    if let Some(best) = best_state {
        current = best;
        current.total_epochs_trained = total;
        log.best_epoch = stopper.best_epoch();
    }
    current.stop_reason = reason;
    log.stop_reason = reason;
    log.layer_norms = current.layer_norms();
    Ok((current, log))
}

/// Evaluates a trained network into a curve point.
pub(crate) fn curve_point(
    state: &MlpState,
    dataset: &Dataset,
    experiment: Experiment,
    seed: u64,
    started: Instant,
) -> Result<CurvePoint, MlpError> {
    let (xtr, ztr, ltr) = dataset.train();
    let (xte, zte, lte) = dataset.test();
    let train = prediction_metrics(&state.forward(&xtr)?, &ztr, &ltr);
    let test = prediction_metrics(&state.forward(&xte)?, &zte, &lte);
    Ok(CurvePoint {
        experiment,
        seed,
        capacity: state.hidden(),
        num_params: state.param_count(),
        lambda: 0.0,
        r: 0.0,
        train_mse: train.mse,
        test_mse: test.mse,
        train_error_rate: train.error_rate,
        test_error_rate: test.error_rate,
        weight_l2: state.weight_l2(),
        epochs_trained: Some(state.total_epochs_trained),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        status: STATUS_OK.to_string(),
    })
}

/// Per-width seed used for initialization and growth in sweeps.
pub fn width_seed(seed: u64, h: usize) -> u64 {
    rng::derive_seed(seed, &[h as u64])
}

/// Trains one fresh network of width `h` and evaluates it.
pub fn scratch_point(
    dataset: &Dataset,
    h: usize,
    cfg: &TrainConfig,
    init_scale: f64,
    experiment: Experiment,
) -> Result<CurvePoint, MlpError> {
    let started = Instant::now();
    let seed = width_seed(cfg.seed, h);
    let start = init_mlp(seed, dataset.input_dim(), h, dataset.classes, init_scale)?;
    let (trained, _) = train(&start, dataset, &TrainConfig { seed, ..cfg.clone() })?;
    curve_point(&trained, dataset, experiment, cfg.seed, started)
}

/// Widths up to `switch_off_h` grow from the previously trained network;
/// wider ones start from a fresh [`init_mlp`]. `None` never switches off.
///
/// The reuse chain runs in `h_list` order; widths past the switch-off point
/// are independent and run on the rayon pool. A failed width breaks the
/// chain, so later reused widths report [`MlpError::ChainBroken`].
pub fn reuse_sweep_points(
    dataset: &Dataset,
    h_list: &[usize],
    switch_off_h: Option<usize>,
    cfg: &TrainConfig,
    init_scale: f64,
) -> Result<Vec<Result<CurvePoint, MlpError>>, MlpError> {
    if h_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MlpError::InvalidConfig("hidden widths must be strictly increasing".into()));
    }
    cfg.validate()?;
    let reused = |h: usize| switch_off_h.map_or(true, |s| h <= s);
    let chain_len = h_list.iter().take_while(|&&h| reused(h)).count();
    let p = dataset.input_dim();
    let k = dataset.classes;
    let mut points = Vec::with_capacity(h_list.len());
    let mut previous: Option<MlpState> = None;
    let mut broken_at: Option<usize> = None;
    for &h in &h_list[..chain_len] {
        if let Some(at) = broken_at {
            points.push(Err(MlpError::ChainBroken { at }));
            continue;
        }
        let started = Instant::now();
        let seed = width_seed(cfg.seed, h);
        let step = || -> Result<(MlpState, CurvePoint), MlpError> {
            let start = match &previous {
                Some(prev) => prev.grow_hidden(seed, h)?,
                None => init_mlp(seed, p, h, k, init_scale)?,
            };
            let (trained, _) = train(&start, dataset, &TrainConfig { seed, ..cfg.clone() })?;
            let point = curve_point(&trained, dataset, Experiment::NnReuseSweep, cfg.seed, started)?;
            Ok((trained, point))
        };
        match step() {
            Ok((trained, point)) => {
                previous = Some(trained);
                points.push(Ok(point));
            }
            Err(e) => {
                broken_at = Some(h);
                points.push(Err(e));
            }
        }
    }
    let fresh: Vec<_> = h_list[chain_len..]
        .par_iter()
        .map(|&h| scratch_point(dataset, h, cfg, init_scale, Experiment::NnReuseSweep))
        .collect();
    points.extend(fresh);
    Ok(points)
}

/// [`reuse_sweep_points`], failing on the first broken width.
pub fn reuse_sweep(
    dataset: &Dataset,
    h_list: &[usize],
    switch_off_h: Option<usize>,
    cfg: &TrainConfig,
    init_scale: f64,
) -> Result<Vec<CurvePoint>, MlpError> {
    reuse_sweep_points(dataset, h_list, switch_off_h, cfg, init_scale)?.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut g = rng::rng(seed);
        DMatrix::from_fn(r, c, |_, _| rng::standard_normal(&mut g))
    }

    #[test]
    fn tiny_init_gives_near_zero_output() {
        let s = init_mlp(1, 4, 3, 2, 1e-12).unwrap();
        let out = s.forward(&random(2, 5, 4)).unwrap();
        assert!(out.abs().max() < 1e-20);
        assert!(init_mlp(1, 4, 3, 2, 0.0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_mlp(7, 4, 3, 2, 1.0).unwrap(), init_mlp(7, 4, 3, 2, 1.0).unwrap());
        assert_ne!(init_mlp(7, 4, 3, 2, 1.0).unwrap(), init_mlp(8, 4, 3, 2, 1.0).unwrap());
    }

    #[test]
    fn zero_weights_and_zero_width() {
        let mut s = init_mlp(1, 3, 4, 2, 1.0).unwrap();
        s.w1.fill(0.0);
        s.w2.fill(0.0);
        assert!(s.forward(&random(3, 2, 3)).unwrap().iter().all(|&v| v == 0.0));

        let mut narrow = init_mlp(1, 3, 0, 2, 1.0).unwrap();
        narrow.b2 = DVector::from_vec(vec![0.25, -1.0]);
        let out = narrow.forward(&random(3, 4, 3)).unwrap();
        for row in out.row_iter() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), vec![0.25, -1.0]);
        }
        assert_eq!(narrow.param_count(), 2);
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let s = init_mlp(5, 3, 4, 2, 1.0).unwrap();
        let s = MlpState { b1: DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]), b2: DVector::from_vec(vec![0.5, -0.5]), ..s };
        let x = random(6, 3, 3);
        let out = s.forward(&x).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                let mut acc = s.b2[k];
                for j in 0..4 {
                    let mut pre = s.b1[j];
                    for c in 0..3 {
                        pre += x[(i, c)] * s.w1[(j, c)];
                    }
                    acc += s.w2[(k, j)] * pre.max(0.0);
                }
                assert!((out[(i, k)] - acc).abs() < 1e-14);
            }
        }
        assert!(matches!(s.forward(&random(6, 3, 2)), Err(MlpError::DimensionMismatch(_))));
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut s = init_mlp(11, 3, 4, 2, 1.0).unwrap();
        s.b1 = DVector::from_vec(vec![0.1, -0.05, 0.2, 0.0]);
        s.b2 = DVector::from_vec(vec![0.3, -0.1]);
        let x = random(12, 5, 3);
        let z = random(13, 5, 2);
        let errs = gradient_check(&s, &x, &z, 1e-5).unwrap();
        assert!(errs.iter().all(|&e| e <= 1e-5), "{errs:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_state_unchanged() {
        let mut s = init_mlp(3, 4, 5, 3, 1.0).unwrap();
        let before = s.clone();
        let x = random(4, 10, 4);
        let z = random(5, 10, 3);
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 3, ..TrainConfig::default() };
        let mse = s.sgd_epoch(&x, &z, &cfg, 1).unwrap();
        assert_eq!(s, before);
        assert!((mse - before.mse(&x, &z).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn batch_larger_than_data_is_rejected() {
        let mut s = init_mlp(3, 2, 2, 2, 1.0).unwrap();
        let cfg = TrainConfig { batch_size: 5, ..TrainConfig::default() };
        assert!(s.sgd_epoch(&random(1, 4, 2), &random(2, 4, 2), &cfg, 0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut s = init_mlp(3, 2, 8, 2, 1.0).unwrap();
        let x = random(1, 16, 2) * 100.0;
        let z = random(2, 16, 2);
        let cfg = TrainConfig { learning_rate: 1e6, batch_size: 4, ..TrainConfig::default() };
        let mut result = Ok(0.0);
        for e in 0..20 {
            result = s.sgd_epoch(&x, &z, &cfg, e);
            if result.is_err() {
                break;
            }
        }
        assert!(matches!(result, Err(MlpError::NonFiniteValue(_))));
    }

    #[test]
    fn single_sample_step_matches_hand_derivation() {
        // One input, one hidden unit in its linear region, one output.
        // f = w2·(w1·x + b1) + b2, loss = (f − z)², gradients by hand.
        let s = MlpState {
            w1: DMatrix::from_element(1, 1, 0.5),
            b1: DVector::from_element(1, 0.1),
            w2: DMatrix::from_element(1, 1, 2.0),
            b2: DVector::from_element(1, -0.3),
            init_scale: 1.0,
            total_epochs_trained: 0,
            stop_reason: StopReason::EpochCap,
        };
        let (x, z, lr) = (0.8, 1.0, 0.1);
        let hidden: f64 = 0.5 * x + 0.1; // 0.5
        let f = 2.0 * hidden - 0.3; // 0.7
        let d = 2.0 * (f - z); // -0.6
        let expected = [0.5 - lr * d * 2.0 * x, 0.1 - lr * d * 2.0, 2.0 - lr * d * hidden, -0.3 - lr * d];
        let mut t = s.clone();
        let cfg = TrainConfig { learning_rate: lr, batch_size: 1, ..TrainConfig::default() };
        t.sgd_epoch(&DMatrix::from_element(1, 1, x), &DMatrix::from_element(1, 1, z), &cfg, 0).unwrap();
        let got = [t.w1[(0, 0)], t.b1[0], t.w2[(0, 0)], t.b2[0]];
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-14, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn growth_preserves_existing_weights() {
        let s = init_mlp(4, 3, 3, 2, 1.0).unwrap();
        assert_eq!(s.grow_hidden(9, 3).unwrap(), s);
        let g = s.grow_hidden(9, 5).unwrap();
        assert_eq!(g.w1.rows(0, 3), s.w1.rows(0, 3));
        assert_eq!(g.w2.columns(0, 3), s.w2.columns(0, 3));
        assert_eq!(g.b2, s.b2);
        assert_eq!(g.hidden(), 5);
        assert_eq!(s.grow_hidden(9, 2), Err(MlpError::ShrinkNotAllowed { from: 3, to: 2 }));

        let mut silenced = g.clone();
        silenced.w2.columns_mut(3, 2).fill(0.0);
        let x = random(1, 6, 3);
        assert_eq!(silenced.forward(&x).unwrap(), s.forward(&x).unwrap());
    }

    #[test]
    fn patience_one_stops_after_first_worse_epoch() {
        let mut es = EarlyStopper::new(1);
        assert_eq!(es.observe(1, 0.5), StopDecision::Improved);
        assert_eq!(es.observe(2, 0.6), StopDecision::Stop);
        assert_eq!(es.best_epoch(), Some(1));

        let mut es = EarlyStopper::new(3);
        let seq = [0.9, 0.8, 0.85, 0.8, 0.7, 0.71, 0.72, 0.73];
        let decisions: Vec<_> = seq.iter().enumerate().map(|(i, &v)| es.observe(i + 1, v)).collect();
        assert_eq!(decisions[3], StopDecision::Continue); // equal is not an improvement
        assert_eq!(decisions[4], StopDecision::Improved);
        assert_eq!(decisions[7], StopDecision::Stop);
        assert_eq!(es.best_epoch(), Some(5));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = crate::data::subsample_and_split(&crate::data::synth_gaussian_classes(1, 20, 2, 3, 2.0).unwrap(), 1, 30, 10).unwrap();
        let s = init_mlp(1, 3, 4, 2, 1.0).unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let (t, log) = train(&s, &ds, &cfg).unwrap();
        assert_eq!(t, s);
        assert_eq!(log.stop_reason, StopReason::EpochCap);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn early_stopped_run_returns_best_snapshot() {
        // A high learning rate makes validation loss bounce so patience triggers.
        let ds = crate::data::subsample_and_split(&crate::data::synth_gaussian_classes(2, 30, 3, 6, 0.5).unwrap(), 2, 60, 30).unwrap();
        let s = init_mlp(2, 6, 16, 3, 1.0).unwrap();
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 4, max_epochs: 400, patience: 5, early_stop: true, ..TrainConfig::default() };
        let (t, log) = train(&s, &ds, &cfg).unwrap();
        assert_eq!(t.stop_reason, StopReason::EarlyStopped);
        let best = log.best_epoch.unwrap();
        assert_eq!(log.epochs.len(), best + cfg.patience);
        assert_eq!(t.total_epochs_trained, log.epochs.len());
        let (fit_idx, val_idx) = validation_split(&ds.split.train, cfg.val_fraction, cfg.seed);
        assert_eq!(fit_idx.len() + val_idx.len(), 60);
        let (xv, zv, _) = ds.rows(&val_idx);
        let best_val = log.epochs[best - 1].val_mse;
        assert_eq!(t.mse(&xv, &zv).unwrap(), best_val);
        assert!(log.epochs.iter().all(|e| e.val_mse >= best_val));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { val_fraction: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { early_stop: true, patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn well_separated_classes_are_learned() {
        let ds = crate::data::subsample_and_split(&crate::data::synth_gaussian_classes(5, 100, 4, 8, 10.0).unwrap(), 5, 200, 200).unwrap();
        let (xte, _, lte) = ds.test();
        for h in [16, 32] {
            let s = init_mlp(width_seed(5, h), 8, h, 4, 0.1).unwrap();
            let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 200, early_stop: true, seed: 5, ..TrainConfig::default() };
            let (t, _) = train(&s, &ds, &cfg).unwrap();
            let out = t.forward(&xte).unwrap();
            let wrong = out.row_iter().zip(&lte).filter(|(r, &l)| crate::solver::argmax(r.iter().copied()) != l).count();
            assert!((wrong as f64) < 0.1 * lte.len() as f64, "h={h}: {wrong} wrong");
        }
    }
}
