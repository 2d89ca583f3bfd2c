//! Independent checks of the solution-set geometry on tiny instances.
//!
//! Nothing here reuses the solver's factorizations for the quantity being
//! checked. Particular solutions come from hand-rolled row reduction, the
//! penalized objective is minimized by plain gradient descent with a
//! power-iteration step size, and monotonicity is checked directly on nested
//! feature maps.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::features::FeatureMap;
use crate::rng;
use crate::solver::{self, RidgeProblem};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("targets are not in the range of Φ (residual {residual:e})")]
    Infeasible { residual: f64 },
    #[error("gradient descent stopped after {steps} steps with gradient norm {grad_norm:e}")]
    DidNotConverge {
        best: Vec<f64>,
        grad_norm: f64,
        steps: usize,
    },
    #[error("invalid oracle input: {0}")]
    InvalidInput(String),
}

/// The affine set `{particular + B·c}` of exact solutions of `Φw = z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSet {
    pub particular: DVector<f64>,
    /// Orthonormal columns spanning the null space of Φ, `M × dim`.
    pub nullspace_basis: DMatrix<f64>,
    /// `M − rank(Φ)`.
    pub dim: usize,
}

impl SolutionSet {
    pub fn point(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.nullspace_basis * coeffs
    }
}

/// Basic solution of `Φw = z` by Gauss–Jordan elimination with partial
/// pivoting; free variables are set to zero. Returns `(w, pivot_count)`.
pub fn basic_solution(phi: &DMatrix<f64>, z: &DVector<f64>) -> (DVector<f64>, usize) {
    let (n, m) = phi.shape();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..m).map(|c| phi[(r, c)]).chain([z[r]]).collect())
        .collect();
    let scale = phi.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..m {
        if row == n {
            break;
        }
        let (best, best_val) = (row..n)
            .map(|r| (r, a[r][col].abs()))
            .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_val <= tol {
            continue;
        }
        a.swap(row, best);
        let p = a[row][col];
        a[row].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != row && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in col..=m {
                    a[r][c] -= f * a[row][c];
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    let mut w = DVector::zeros(m);
    for (r, &c) in pivots.iter().enumerate() {
        w[c] = a[r][m];
    }
    (w, pivots.len())
}

/// Describes every exact solution of `Φw = z`.
///
/// The dimension and null-space basis come from a full SVD with the
/// solver's cutoff rule; the particular solution from [`basic_solution`].
pub fn solution_set(phi: &DMatrix<f64>, z: &DVector<f64>) -> Result<SolutionSet, OracleError> {
    let (n, m) = phi.shape();
    if z.len() != n {
        return Err(OracleError::InvalidInput(format!("z has {} entries for {n} rows", z.len())));
    }
    // Pad with zero rows so the SVD returns all M right singular vectors.
    let rows = n.max(m);
    let padded = DMatrix::from_fn(rows, m, |r, c| if r < n { phi[(r, c)] } else { 0.0 });
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tau = solver::svd_cutoff(sigma_max, n, m);
    let null_rows: Vec<usize> = (0..m).filter(|&i| svd.singular_values[i] <= tau).collect();
    let nullspace_basis = DMatrix::from_fn(m, null_rows.len(), |r, c| v_t[(null_rows[c], r)]);

    let (particular, _) = basic_solution(phi, z);
    let residual = (phi * &particular - z).norm();
    if residual > 1e-8 * (1.0 + z.norm()) {
        return Err(OracleError::Infeasible { residual });
    }
    Ok(SolutionSet {
        particular,
        dim: null_rows.len(),
        nullspace_basis,
    })
}

/// Largest singular value of Φ by power iteration on ΦᵀΦ.
pub fn power_sigma_max(phi: &DMatrix<f64>) -> f64 {
    let m = phi.ncols();
    if m == 0 || phi.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(m, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..1000 {
        let next = phi.tr_mul(&(phi * &v));
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - est).abs() <= 1e-14 * norm;
        est = norm;
        v = next / norm;
        if converged {
            break;
        }
    }
    est.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdOutcome {
    pub weights: DVector<f64>,
    pub steps: usize,
    pub grad_norm: f64,
}

/// Minimizes `‖Φw − z‖² + λ‖w − p‖²` by gradient descent from `w = 0`.
///
/// The gradient is `2Φᵀ(Φw − z) + 2λ(w − p)` and the default step is `1/L`
/// with `L = 2(σ_max² + λ)`. Stops once the gradient norm is ≤ 1e-10 or the
/// iterate stops moving in floating point.
pub fn gd_minimize_eq2(
    phi: &DMatrix<f64>,
    z: &DVector<f64>,
    lambda: f64,
    anchor: &DVector<f64>,
    max_steps: usize,
    step_size: Option<f64>,
) -> Result<GdOutcome, OracleError> {
    let m = phi.ncols();
    if !(lambda > 0.0) {
        return Err(OracleError::InvalidInput(format!("lambda must be > 0, got {lambda}")));
    }
    if z.len() != phi.nrows() || anchor.len() != m {
        return Err(OracleError::InvalidInput("dimension mismatch".into()));
    }
    let sigma = power_sigma_max(phi);
    let lipschitz = 2.0 * (sigma * sigma + lambda);
    let step = match step_size {
        Some(s) if s > 0.0 && s < 1.0 / lipschitz => s,
        Some(s) => {
            return Err(OracleError::InvalidInput(format!(
                "step size {s} must lie in (0, 1/L = {})",
                1.0 / lipschitz
            )))
        }
        None => 1.0 / lipschitz,
    };
    let grad = |w: &DVector<f64>| phi.tr_mul(&(phi * w - z)) * 2.0 + (w - anchor) * (2.0 * lambda);
    let mut w = DVector::zeros(m);
    let mut best = (w.clone(), f64::INFINITY);
    for steps in 0..max_steps {
        let g = grad(&w);
        let g_norm = g.norm();
        if g_norm < best.1 {
            best = (w.clone(), g_norm);
        }
        if g_norm <= 1e-10 {
            return Ok(GdOutcome { weights: w, steps, grad_norm: g_norm });
        }
        let delta = g * step;
        if delta.norm() <= 4.0 * f64::EPSILON * (1.0 + w.norm()) {
            return Ok(GdOutcome { weights: w, steps, grad_norm: g_norm });
        }
        w -= delta;
    }
    Err(OracleError::DidNotConverge {
        best: best.0.iter().copied().collect(),
        grad_norm: best.1,
        steps: max_steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormPoint {
    pub features: usize,
    pub norm: f64,
    pub rank: usize,
    /// Full row rank: every training point is fit exactly.
    pub interpolating: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormCurve {
    pub rows: usize,
    pub points: Vec<NormPoint>,
}

impl NormCurve {
    /// Consecutive interpolating pairs where the norm grew by more than `slack`.
    pub fn violations(&self, slack: f64) -> Vec<(usize, usize)> {
        self.points
            .windows(2)
            .filter(|w| w[0].interpolating && w[1].interpolating && w[1].norm > w[0].norm + slack)
            .map(|w| (w[0].features, w[1].features))
            .collect()
    }
}

/// Min-norm solution norm `‖Φ_D⁺ Z‖_F` along nested feature maps sharing `seed`.
///
/// Uses the dataset's train split. Monotonicity is only claimed where the
/// points are interpolating; earlier points are reported as-is.
pub fn nested_norm_curve(seed: u64, dataset: &Dataset, d_list: &[usize]) -> Result<NormCurve, OracleError> {
    if d_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::InvalidInput("feature counts must be strictly increasing".into()));
    }
    let (x, z, _) = dataset.train();
    if x.nrows() == 0 {
        return Err(OracleError::InvalidInput("dataset has an empty train split".into()));
    }
    let largest = FeatureMap::new(seed, dataset.input_dim(), d_list.last().copied().unwrap_or(0), 1.0, true);
    let points = d_list
        .iter()
        .map(|&d| {
            let fm = FeatureMap {
                projection: largest.projection.rows(0, d).into_owned(),
                ..largest.clone()
            };
            let phi = fm.transform(&x).expect("train inputs match the map");
            let res = solver::min_norm_solve(&phi, &z);
            NormPoint {
                features: d,
                norm: res.weight_l2,
                rank: res.rank,
                interpolating: res.rank == x.nrows(),
            }
        })
        .collect();
    Ok(NormCurve { rows: x.nrows(), points })
}

/// Min-norm solution norm before and after appending `column` to Φ.
pub fn appended_column_norms(phi: &DMatrix<f64>, z: &DMatrix<f64>, column: &DVector<f64>) -> (f64, f64) {
    let before = solver::min_norm_solve(phi, z).weight_l2;
    let grown = phi.clone().insert_column(phi.ncols(), 0.0);
    let mut grown = grown;
    grown.column_mut(phi.ncols()).copy_from(column);
    (before, solver::min_norm_solve(&grown, z).weight_l2)
}

/// A column on which the current min-norm solution puts zero weight after
/// appending: orthogonal to every dual coefficient vector `(ΦΦᵀ)⁺z_k`.
pub fn tangent_column(phi: &DMatrix<f64>, z: &DMatrix<f64>, seed: u64) -> DVector<f64> {
    let gram = phi * phi.transpose();
    let duals = solver::min_norm_solve(&gram, z).weights;
    let mut gen = rng::rng(seed);
    let c = DVector::from_fn(phi.nrows(), |_, _| rng::standard_normal(&mut gen));
    let q = duals.qr().q();
    &c - &q * q.tr_mul(&c)
}

/// Random `rows × cols` matrix of rank `min(rank, rows, cols)`.
pub fn random_rank_matrix(seed: u64, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    let mut gen = rng::rng(seed);
    let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| rng::standard_normal(&mut gen));
    let rank = rank.min(rows).min(cols);
    draw(rows, rank) * draw(rank, cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<Check>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// `(N, M, rank)` shapes for the solution-set check; starts with the
/// single-constraint two-weight case whose solutions form a line.
pub fn tiny_shapes(seed: u64, count: usize) -> Vec<(usize, usize, usize)> {
    use rand::Rng;
    let mut gen = rng::rng(seed);
    let mut shapes = vec![(1, 2, 1)];
    while shapes.len() < count {
        let n = gen.gen_range(1..=5);
        let m = gen.gen_range(1..=8);
        let full = n.min(m);
        // every third instance is rank deficient when possible
        let r = if shapes.len() % 3 == 0 && full > 1 { gen.gen_range(1..full) } else { full };
        shapes.push((n, m, r));
    }
    shapes
}

pub fn check_solution_set_dims(seed: u64, instances: usize) -> Check {
    let mut failures = Vec::new();
    let mut gen = rng::rng(rng::derive_seed(seed, &[1]));
    for (i, (n, m, r)) in tiny_shapes(seed, instances).into_iter().enumerate() {
        let phi = if (n, m) == (1, 2) && i == 0 {
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
        } else {
            random_rank_matrix(rng::derive_seed(seed, &[2, i as u64]), n, m, r)
        };
        let w_true = DVector::from_fn(m, |_, _| rng::standard_normal(&mut gen));
        let z = &phi * w_true;
        let set = match solution_set(&phi, &z) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("#{i} ({n}x{m}, rank {r}): {e}"));
                continue;
            }
        };
        let (_, pivots) = basic_solution(&phi, &z);
        let gram = set.nullspace_basis.tr_mul(&set.nullspace_basis);
        let ortho_err = (gram - DMatrix::identity(set.dim, set.dim)).abs().max();
        let mut worst_fit: f64 = 0.0;
        for _ in 0..100 {
            let c = DVector::from_fn(set.dim, |_, _| 3.0 * rng::standard_normal(&mut gen));
            worst_fit = worst_fit.max((&phi * set.point(&c) - &z).norm());
        }
        if set.dim != m - r || pivots != r || ortho_err > 1e-10 || worst_fit > 1e-8 * (1.0 + z.norm()) {
            failures.push(format!(
                "#{i} ({n}x{m}, rank {r}): dim {} pivots {pivots} ortho {ortho_err:e} fit {worst_fit:e}",
                set.dim
            ));
        }
    }
    check(
        "solution-set dimension = M - rank",
        failures.is_empty(),
        if failures.is_empty() { format!("{instances} instances") } else { failures.join("; ") },
    )
}

pub fn check_min_norm_optimality(seed: u64, instances: usize, draws: usize) -> Check {
    use rand::Rng;
    let mut gen = rng::rng(rng::derive_seed(seed, &[3]));
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for i in 0..instances {
        let n = gen.gen_range(1..=5);
        let m = gen.gen_range(n + 1..=9);
        let phi = random_rank_matrix(rng::derive_seed(seed, &[4, i as u64]), n, m, n);
        let z = DVector::from_fn(n, |_, _| rng::standard_normal(&mut gen));
        let min_norm = solver::min_norm_solve(&phi, &DMatrix::from_column_slice(n, 1, z.as_slice())).weight_l2;
        let set = solution_set(&phi, &z).expect("full row rank is feasible");
        for _ in 0..draws {
            let c = DVector::from_fn(set.dim, |_, _| rng::standard_normal(&mut gen));
            let gap = min_norm - set.point(&c).norm();
            worst = worst.max(gap);
            if gap > 1e-10 {
                failures += 1;
            }
        }
    }
    check(
        "min-norm solution is shortest in the solution set",
        failures == 0,
        format!("{failures} violations, max(min_norm - other) = {worst:e}"),
    )
}

pub fn check_nested_monotonicity(seed: u64) -> Check {
    let ds = crate::data::synth_gaussian_classes(seed, 10, 2, 20, 1.0)
        .and_then(|d| crate::data::subsample_and_split(&d, seed, 20, 0));
    let ds = match ds {
        Ok(d) => d,
        Err(e) => return check("nested min-norm norms are non-increasing", false, e.to_string()),
    };
    let d_list: Vec<usize> = (20..=60).step_by(5).collect();
    match nested_norm_curve(seed, &ds, &d_list) {
        Ok(curve) => {
            let bad = curve.violations(1e-8);
            let interp = curve.points.last().is_some_and(|p| p.interpolating);
            check(
                "nested min-norm norms are non-increasing",
                bad.is_empty() && interp,
                format!(
                    "norms {:?}, ranks {:?}, violations {bad:?}",
                    curve.points.iter().map(|p| p.norm).collect::<Vec<_>>(),
                    curve.points.iter().map(|p| p.rank).collect::<Vec<_>>()
                ),
            )
        }
        Err(e) => check("nested min-norm norms are non-increasing", false, e.to_string()),
    }
}

pub fn check_tangent_column(seed: u64) -> Check {
    let phi = random_rank_matrix(rng::derive_seed(seed, &[5]), 6, 9, 6);
    let z = random_rank_matrix(rng::derive_seed(seed, &[6]), 6, 2, 2);
    let c = tangent_column(&phi, &z, rng::derive_seed(seed, &[7]));
    let (before, after) = appended_column_norms(&phi, &z, &c);
    check(
        "tangent column leaves the min-norm norm unchanged",
        (before - after).abs() <= 1e-8,
        format!("before {before}, after {after}"),
    )
}

pub fn check_gd_equivalence(seed: u64, instances: usize) -> Check {
    use rand::Rng;
    let mut gen = rng::rng(rng::derive_seed(seed, &[8]));
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    for i in 0..instances {
        let n = gen.gen_range(1..=5);
        let m = gen.gen_range(1..=8);
        let k = gen.gen_range(1..=3);
        let lambda = if i % 2 == 0 { 1e-3 } else { 1.0 };
        let phi = random_rank_matrix(rng::derive_seed(seed, &[9, i as u64]), n, m, n.min(m));
        let z = DMatrix::from_fn(n, k, |_, _| rng::standard_normal(&mut gen));
        let p = solver::sample_anchor(rng::derive_seed(seed, &[10, i as u64]), m, k, gen.gen_range(0.0..3.0));
        let closed = match RidgeProblem::new(phi.clone(), z.clone(), lambda, Some(p.clone()))
            .and_then(|prob| solver::anchored_ridge_solve(&prob))
        {
            Ok(r) => r.weights,
            Err(e) => {
                problems.push(format!("#{i}: {e}"));
                continue;
            }
        };
        for col in 0..k {
            let zc = z.column(col).into_owned();
            let pc = p.column(col).into_owned();
            match gd_minimize_eq2(&phi, &zc, lambda, &pc, 5_000_000, None) {
                Ok(out) => {
                    worst = worst.max((out.weights - closed.column(col)).abs().max());
                }
                Err(e) => problems.push(format!("#{i} col {col}: {e}")),
            }
        }
    }
    check(
        "closed-form anchored ridge matches gradient descent",
        problems.is_empty() && worst <= 1e-6,
        format!("max |ΔW| = {worst:e}; {}", problems.join("; ")),
    )
}

pub fn check_gd_min_norm_limit(seed: u64) -> Check {
    let phi = random_rank_matrix(rng::derive_seed(seed, &[11]), 3, 7, 3);
    let z = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let min_norm = solver::min_norm_solve(&phi, &DMatrix::from_column_slice(3, 1, z.as_slice())).weights;
    match gd_minimize_eq2(&phi, &z, 1e-9, &DVector::zeros(7), 5_000_000, None) {
        Ok(out) => {
            let diff = (out.weights - min_norm.column(0)).abs().max();
            check("small-λ gradient descent tends to the min-norm solution", diff <= 1e-4, format!("max diff {diff:e}"))
        }
        Err(e) => check("small-λ gradient descent tends to the min-norm solution", false, e.to_string()),
    }
}

/// Solver invariants on random instances: normal-equations residual,
/// primal/dual agreement, λ-continuity, interpolation.
pub fn check_solver_invariants(seed: u64, instances: usize) -> Vec<Check> {
    use rand::Rng;
    let mut gen = rng::rng(rng::derive_seed(seed, &[12]));
    let (mut resid_bad, mut dual_worst, mut cont_worst, mut interp_worst) = (0, 0.0f64, 0.0f64, 0.0f64);
    let mut cont_count = 0;
    for i in 0..instances {
        let n = gen.gen_range(2..=12);
        let m = gen.gen_range(1..=30);
        let k = gen.gen_range(1..=3);
        let phi = random_rank_matrix(rng::derive_seed(seed, &[13, i as u64]), n, m, n.min(m));
        let z = DMatrix::from_fn(n, k, |_, _| rng::standard_normal(&mut gen));
        let lambda = 10f64.powf(gen.gen_range(-6.0..2.0));
        let p = solver::sample_anchor(rng::derive_seed(seed, &[14, i as u64]), m, k, gen.gen_range(0.0..2.0));
        let prob = RidgeProblem::new(phi.clone(), z.clone(), lambda, Some(p)).expect("valid problem");
        let (Ok(primal), Ok(dual)) = (solver::solve_primal(&prob), solver::solve_dual(&prob)) else {
            resid_bad += 1;
            continue;
        };
        let tol = prob.residual_tolerance();
        resid_bad += usize::from(primal.residual_norm > tol || dual.residual_norm > tol);
        dual_worst = dual_worst.max((&primal.weights - &dual.weights).abs().max());

        if m >= n {
            let mn = solver::min_norm_solve(&phi, &z);
            let scale = 1.0f64.max(z.norm_squared() / (n * k) as f64);
            interp_worst = interp_worst.max(mn.train_mse / scale);
            let sigmas = solver::singular_values(&phi);
            if sigmas.iter().copied().fold(f64::INFINITY, f64::min) >= 1e-2 {
                // ‖W_λ − Φ⁺Z‖ ≈ λ‖Z‖/σ_min³, so the bound is stated for ‖Z‖_F = 1.
                let unit = &z / z.norm();
                let small = RidgeProblem::new(phi.clone(), unit.clone(), 1e-10, None)
                    .and_then(|p| solver::anchored_ridge_solve(&p))
                    .expect("positive lambda");
                let target = solver::min_norm_solve(&phi, &unit);
                cont_worst = cont_worst.max((small.weights - target.weights).norm());
                cont_count += 1;
            }
        }
    }
    vec![
        check("normal-equations residual within tolerance", resid_bad == 0, format!("{resid_bad} failures")),
        check("primal and dual solves agree", dual_worst <= 1e-8, format!("max |ΔW| = {dual_worst:e}")),
        check(
            "λ→0 ridge approaches the min-norm solution",
            cont_worst <= 1e-4,
            format!("max ‖ΔW‖ = {cont_worst:e} over {cont_count} instances"),
        ),
        check("min-norm solves interpolate", interp_worst <= 1e-12, format!("max scaled mse = {interp_worst:e}")),
    ]
}

/// Every oracle check, as run by the `oracle-check` command.
pub fn run_oracle_suite(seed: u64) -> OracleReport {
    let mut checks = vec![
        check_solution_set_dims(seed, 50),
        check_min_norm_optimality(seed, 50, 100),
        check_nested_monotonicity(seed),
        check_tangent_column(seed),
        check_gd_equivalence(seed, 20),
        check_gd_min_norm_limit(seed),
    ];
    checks.extend(check_solver_invariants(seed, 40));
    OracleReport { checks }
}
