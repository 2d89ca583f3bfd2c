//! Closed-form solvers for a linear output layer over fixed features.
//!
//! The anchored ridge objective is
//!
//! ```text
//! L(W) = ‖ΦW − Z‖²_F + λ‖W − P‖²_F
//! ```
//!
//! whose unique minimizer for `λ > 0` solves `(ΦᵀΦ + λI)W = ΦᵀZ + λP`.
//! `P = 0` is ordinary ridge; `λ → 0` tends to `P + Φ⁺(Z − ΦP)`, which for
//! `P = 0` is the minimum-norm least-squares solution. All `K` output columns
//! share one factorization.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::rng;

/// λ used by the feature sweeps unless configured otherwise.
pub const DEFAULT_LAMBDA: f64 = 1e-8;

/// Rounds of iterative refinement applied after a Cholesky solve.
const MAX_REFINEMENT: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("lambda must be finite and ≥ 0, got {0}")]
    InvalidLambda(f64),
    #[error("system is numerically singular (condition estimate {condition_estimate:e})")]
    SingularSystem { condition_estimate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProblem {
    /// `N × M` design (features plus bias column).
    pub features: DMatrix<f64>,
    /// `N × K` targets.
    pub targets: DMatrix<f64>,
    pub lambda: f64,
    /// `M × K` anchor; the zero matrix gives plain ridge.
    pub anchor: DMatrix<f64>,
}

impl RidgeProblem {
    pub fn new(
        features: DMatrix<f64>,
        targets: DMatrix<f64>,
        lambda: f64,
        anchor: Option<DMatrix<f64>>,
    ) -> Result<Self, SolverError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(SolverError::InvalidLambda(lambda));
        }
        if features.nrows() != targets.nrows() {
            return Err(SolverError::DimensionMismatch(format!(
                "features have {} rows, targets {}",
                features.nrows(),
                targets.nrows()
            )));
        }
        let anchor =
            anchor.unwrap_or_else(|| DMatrix::zeros(features.ncols(), targets.ncols()));
        if anchor.shape() != (features.ncols(), targets.ncols()) {
            return Err(SolverError::DimensionMismatch(format!(
                "anchor is {:?}, expected {:?}",
                anchor.shape(),
                (features.ncols(), targets.ncols())
            )));
        }
        Ok(Self {
            features,
            targets,
            lambda,
            anchor,
        })
    }

    /// Euclidean norm of each anchor column (`R` per output).
    pub fn anchor_norms(&self) -> Vec<f64> {
        self.anchor.column_iter().map(|c| c.norm()).collect()
    }

    /// `1e-8 · (1 + ‖ΦᵀZ‖_F)`, the acceptable normal-equations residual.
    pub fn residual_tolerance(&self) -> f64 {
        1e-8 * (1.0 + (self.features.tr_mul(&self.targets)).norm())
    }

    /// `‖Φᵀ(ΦW − Z) + λ(W − P)‖_F`, zero exactly at the minimizer.
    pub fn normal_residual(&self, w: &DMatrix<f64>) -> f64 {
        let fit = &self.features * w - &self.targets;
        let mut r = self.features.tr_mul(&fit);
        if self.lambda > 0.0 {
            r += (w - &self.anchor) * self.lambda;
        }
        r.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    /// `M × K`.
    pub weights: DMatrix<f64>,
    /// `‖ΦW − Z‖²_F / (N·K)`.
    pub train_mse: f64,
    /// Frobenius norm of the weights.
    pub weight_l2: f64,
    pub per_output_norms: Vec<f64>,
    pub residual_norm: f64,
    /// Numerical rank of Φ under [`svd_cutoff`].
    pub rank: usize,
}

impl SolveResult {
    fn assemble(phi: &DMatrix<f64>, z: &DMatrix<f64>, weights: DMatrix<f64>, residual_norm: f64, rank: usize) -> Self {
        let train_mse = mse(&(phi * &weights), z);
        let per_output_norms: Vec<f64> = weights.column_iter().map(|c| c.norm()).collect();
        Self {
            train_mse,
            weight_l2: weights.norm(),
            per_output_norms,
            residual_norm,
            rank,
            weights,
        }
    }
}

fn mse(pred: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    let count = (z.nrows() * z.ncols()) as f64;
    (pred - z).norm_squared() / count
}

/// Singular values at or below this are treated as zero:
/// `ε_machine · max(N, M) · σ_max`.
pub fn svd_cutoff(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols) as f64 * sigma_max
}

/// Singular values of `m`, computed on whichever orientation is smaller.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let sv = if m.nrows() < m.ncols() {
        m.transpose().singular_values()
    } else {
        m.singular_values()
    };
    sv.iter().copied().collect()
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    let tau = svd_cutoff(sigma_max, m.nrows(), m.ncols());
    sv.iter().filter(|&&s| s > tau).count()
}

/// Solves the anchored ridge problem.
///
/// `λ = 0` is routed to the pseudoinverse path. For `M > N` the dual
/// (`N × N`) system is factored instead of the primal (`M × M`) one: the
/// primal Gram matrix then has `M − N` eigenvalues equal to λ, and with a
/// small λ the rounding in `ΦᵀΦ` swamps the null-space part of W.
pub fn anchored_ridge_solve(prob: &RidgeProblem) -> Result<SolveResult, SolverError> {
    if prob.lambda == 0.0 {
        return Ok(min_norm_solve_anchored(&prob.features, &prob.targets, &prob.anchor));
    }
    if prob.features.ncols() > prob.features.nrows() {
        solve_dual(prob)
    } else {
        solve_primal(prob)
    }
}

fn factor(gram: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, SolverError> {
    let backup = gram.clone();
    Cholesky::new(gram).ok_or_else(|| {
        let eig = backup.symmetric_eigenvalues();
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        SolverError::SingularSystem {
            condition_estimate: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        }
    })
}

/// Solves with a Cholesky factor of the formed Gram matrix, then refines
/// against `apply`, the same operator evaluated without forming the Gram.
fn refined_solve(
    chol: &Cholesky<f64, Dyn>,
    b: &DMatrix<f64>,
    apply: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
) -> DMatrix<f64> {
    let mut x = chol.solve(b);
    let mut r = b - apply(&x);
    let mut r_norm = r.norm();
    let floor = 1e-15 * b.norm();
    for _ in 0..MAX_REFINEMENT {
        if r_norm <= floor {
            break;
        }
        let candidate = &x + chol.solve(&r);
        let next = b - apply(&candidate);
        let next_norm = next.norm();
        if next_norm >= r_norm {
            break;
        }
        (x, r, r_norm) = (candidate, next, next_norm);
    }
    x
}

/// Primal normal equations `(ΦᵀΦ + λI)W = ΦᵀZ + λP`.
pub fn solve_primal(prob: &RidgeProblem) -> Result<SolveResult, SolverError> {
    require_positive_lambda(prob)?;
    let phi = &prob.features;
    let lambda = prob.lambda;
    let mut a = phi.tr_mul(phi);
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let b = phi.tr_mul(&prob.targets) + &prob.anchor * lambda;
    let chol = factor(a)?;
    let w = refined_solve(&chol, &b, |w| phi.tr_mul(&(phi * w)) + w * lambda);
    Ok(finish(prob, w))
}

/// Dual form `W = P + Φᵀ(ΦΦᵀ + λI)⁻¹(Z − ΦP)`; algebraically identical to
/// [`solve_primal`] and cheaper when `M ≫ N`.
pub fn solve_dual(prob: &RidgeProblem) -> Result<SolveResult, SolverError> {
    require_positive_lambda(prob)?;
    let phi = &prob.features;
    let mut g = phi * phi.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += prob.lambda;
    }
    let rhs = &prob.targets - phi * &prob.anchor;
    let chol = factor(g)?;
    let lambda = prob.lambda;
    let alpha = refined_solve(&chol, &rhs, |a| phi * phi.tr_mul(a) + a * lambda);
    let w = &prob.anchor + phi.tr_mul(&alpha);
    Ok(finish(prob, w))
}

fn require_positive_lambda(prob: &RidgeProblem) -> Result<(), SolverError> {
    if prob.lambda > 0.0 && prob.lambda.is_finite() {
        Ok(())
    } else {
        Err(SolverError::InvalidLambda(prob.lambda))
    }
}

fn finish(prob: &RidgeProblem, w: DMatrix<f64>) -> SolveResult {
    let residual = prob.normal_residual(&w);
    let rank = numerical_rank(&prob.features);
    SolveResult::assemble(&prob.features, &prob.targets, w, residual, rank)
}

/// Minimum-Frobenius-norm least-squares solution `W = Φ⁺Z`.
///
/// Interpolates whenever Φ has full row rank; for `N > M` and full column
/// rank it is the unique least-squares solution.
pub fn min_norm_solve(phi: &DMatrix<f64>, z: &DMatrix<f64>) -> SolveResult {
    let (w, rank) = pinv_apply(phi, z);
    let residual = phi.tr_mul(&(phi * &w - z)).norm();
    SolveResult::assemble(phi, z, w, residual, rank)
}

/// `λ → 0` limit of the anchored problem: `P + Φ⁺(Z − ΦP)`.
pub fn min_norm_solve_anchored(phi: &DMatrix<f64>, z: &DMatrix<f64>, anchor: &DMatrix<f64>) -> SolveResult {
    if anchor.iter().all(|&v| v == 0.0) {
        return min_norm_solve(phi, z);
    }
    let (delta, rank) = pinv_apply(phi, &(z - phi * anchor));
    let w = anchor + delta;
    let residual = phi.tr_mul(&(phi * &w - z)).norm();
    SolveResult::assemble(phi, z, w, residual, rank)
}

/// Returns `(Φ⁺B, rank)` using the cutoff from [`svd_cutoff`].
fn pinv_apply(phi: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (n, m) = phi.shape();
    if phi.is_empty() {
        return (DMatrix::zeros(m, b.ncols()), 0);
    }
    let svd = phi.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tau = svd_cutoff(sigma_max, n, m);
    let mut w = DMatrix::zeros(m, b.ncols());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= tau {
            continue;
        }
        rank += 1;
        let coeff = u.column(i).tr_mul(b) / s;
        w += v_t.row(i).transpose() * coeff;
    }
    (w, rank)
}

/// `M × K` anchor whose columns are independent uniform draws on the sphere
/// of radius `r` (normalized Gaussians). Column `k` uses substream `k`.
pub fn sample_anchor(seed: u64, m: usize, k: usize, r: f64) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(m, k);
    if r == 0.0 || m == 0 {
        return p;
    }
    for col in 0..k {
        let mut gen = rng::stream_rng(seed, col as u64);
        let mut v: Vec<f64> = (0..m).map(|_| rng::standard_normal(&mut gen)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= r / norm);
        p.column_mut(col).copy_from_slice(&v);
    }
    p
}

/// One sphere draw (column 0 of [`sample_anchor`]) copied to all `k` columns.
pub fn replicated_anchor(seed: u64, m: usize, k: usize, r: f64) -> DMatrix<f64> {
    let col = sample_anchor(seed, m, 1, r);
    DMatrix::from_fn(m, k, |i, _| col[(i, 0)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub error_rate: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Squared error per entry and argmax classification error of `ΦW`.
pub fn evaluate(
    w: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    z: &DMatrix<f64>,
    labels: &[usize],
) -> Result<Metrics, SolverError> {
    if phi.ncols() != w.nrows() || phi.nrows() != z.nrows() || w.ncols() != z.ncols() || labels.len() != z.nrows() {
        return Err(SolverError::DimensionMismatch(format!(
            "W {:?}, Φ {:?}, Z {:?}, {} labels",
            w.shape(),
            phi.shape(),
            z.shape(),
            labels.len()
        )));
    }
    let pred = phi * w;
    Ok(prediction_metrics(&pred, z, labels))
}

pub(crate) fn prediction_metrics(pred: &DMatrix<f64>, z: &DMatrix<f64>, labels: &[usize]) -> Metrics {
    let wrong = pred
        .row_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.iter().copied()) != l)
        .count();
    Metrics {
        mse: mse(pred, z),
        error_rate: wrong as f64 / labels.len() as f64,
    }
}
