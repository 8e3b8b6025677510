//! Weighted l1-regularized least squares for the stacked VAR regression.
//!
//! The objective separates over response columns. For column `i`,
//!
//! ```text
//! (1/N) ||Y_i - X B_i||^2 + lambda * sum_j w_j |B_ij|
//! ```
//!
//! is reduced to a plain lasso by dividing every design column by its weight;
//! the lasso coefficients are then divided by the weights to recover `B_i`.
//! Coefficients with infinite weight are dropped from the design and pinned
//! at zero. Each lasso is solved by cyclic coordinate descent, alternating
//! full sweeps with sweeps over the current active set.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CoefficientStack, LaggedRegression};
use crate::weights::PenaltyWeights;

/// Default number of penalty levels in a grid.
pub const DEFAULT_GRID_COUNT: usize = 30;
/// Default ratio between the first and last grid value.
pub const DEFAULT_GRID_RATIO: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative tolerance on the largest coefficient change of a full sweep.
    pub tol_cd: f64,
    /// Tolerance of the KKT certificate required for convergence.
    pub tol_kkt: f64,
    /// Maximum number of sweeps per column.
    pub max_iter: usize,
    /// Solve response columns on the rayon pool.
    pub parallel: bool,
    /// Keep the objective value after every sweep.
    pub record_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol_cd: 1e-7, tol_kkt: 1e-6, max_iter: 100_000, parallel: true, record_objective: false }
    }
}

/// Per response column diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnFit {
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coeffs: CoefficientStack,
    pub lambda: f64,
    /// Sum of the per-column objectives.
    pub objective: f64,
    pub columns: Vec<ColumnFit>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.columns.iter().all(|c| c.converged)
    }

    pub fn max_kkt_residual(&self) -> f64 {
        self.columns.iter().map(|c| c.kkt_residual).fold(0.0, f64::max)
    }

    /// Nonzero coefficients as `(lag, s, s_from)`.
    pub fn support(&self) -> Vec<(usize, usize, usize)> {
        self.coeffs
            .entries()
            .filter(|e| e.3 != 0.0)
            .map(|(l, s, sf, _)| (l, s, sf))
            .collect()
    }

    pub fn support_size(&self) -> usize {
        self.coeffs.support_size()
    }
}

/// Strictly decreasing, log-equispaced penalty levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Geometric grid from `lmax` down to `lmax / ratio` with `count` values.
pub fn lambda_grid(lmax: f64, count: usize, ratio: f64) -> Result<LambdaGrid> {
    if !(lmax > 0.0) || !lmax.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda_max must be positive, got {lmax}")));
    }
    if count < 2 {
        return Err(Error::InvalidParameter("a lambda grid needs at least two values".into()));
    }
    if !(ratio > 1.0) {
        return Err(Error::InvalidParameter(format!("grid ratio must exceed 1, got {ratio}")));
    }
    let last = (count - 1) as f64;
    let mut values: Vec<f64> =
        (0..count).map(|k| lmax * ratio.powf(-(k as f64) / last)).collect();
    values[0] = lmax;
    values[count - 1] = lmax / ratio;
    Ok(LambdaGrid { values })
}

/// The lasso reformulation of one response column.
#[derive(Debug, Clone)]
pub struct RescaledColumn {
    /// `N x k` design restricted to finite-weight coefficients, each column
    /// divided by its weight.
    pub design: DMatrix<f64>,
    /// Original design column index of each retained column.
    pub kept: Vec<usize>,
    /// Weight of each retained column.
    pub weights: Vec<f64>,
    /// Number of coefficients before removal (`p*m`).
    pub full_len: usize,
}

impl RescaledColumn {
    /// Maps lasso coefficients back to the weighted problem, restoring the
    /// removed coefficients as zeros.
    pub fn back_transform(&self, rescaled: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.full_len];
        for ((&j, &w), &b) in self.kept.iter().zip(&self.weights).zip(rescaled) {
            out[j] = b / w;
        }
        out
    }

    /// Inverse of [`back_transform`](Self::back_transform) on the retained
    /// coefficients.
    pub fn forward_transform(&self, coeffs: &[f64]) -> Vec<f64> {
        self.kept.iter().zip(&self.weights).map(|(&j, &w)| coeffs[j] * w).collect()
    }
}

pub fn rescale_column_design(
    reg: &LaggedRegression,
    weights: &PenaltyWeights,
    i: usize,
) -> Result<RescaledColumn> {
    check_shapes(reg, weights)?;
    if i >= reg.dim() {
        return Err(Error::InvalidParameter(format!("response column {i} out of range")));
    }
    let col_weights = weights.column(i);
    if let Some(w) = col_weights.iter().find(|w| w.is_nan() || **w <= 0.0) {
        return Err(Error::InvalidParameter(format!("penalty weight {w} is not positive")));
    }
    let kept: Vec<usize> = (0..col_weights.len()).filter(|&j| col_weights[j].is_finite()).collect();
    let design = reg.design();
    let n = reg.n_obs();
    let mut out = DMatrix::zeros(n, kept.len());
    for (k, &j) in kept.iter().enumerate() {
        let w = col_weights[j];
        for (dst, src) in out.column_mut(k).iter_mut().zip(design.column(j).iter()) {
            *dst = src / w;
        }
    }
    Ok(RescaledColumn {
        design: out,
        weights: kept.iter().map(|&j| col_weights[j]).collect(),
        kept,
        full_len: col_weights.len(),
    })
}

fn check_shapes(reg: &LaggedRegression, weights: &PenaltyWeights) -> Result<()> {
    if weights.order() != reg.order() || weights.dim() != reg.dim() {
        return Err(Error::DimensionMismatch(format!(
            "weights are for p={}, m={} but regression has p={}, m={}",
            weights.order(),
            weights.dim(),
            reg.order(),
            reg.dim()
        )));
    }
    Ok(())
}

/// Smallest penalty at which every column's solution is identically zero:
/// `max_{i,j} (2/N) |x~_j' y_i|` over the rescaled designs.
pub fn lambda_max(reg: &LaggedRegression, weights: &PenaltyWeights) -> Result<f64> {
    check_shapes(reg, weights)?;
    if reg.design().iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("design matrix is identically zero".into()));
    }
    let mut best = 0.0f64;
    for i in 0..reg.dim() {
        best = best.max(column_lambda_max(reg, weights, i));
    }
    Ok(best)
}

fn column_lambda_max(reg: &LaggedRegression, weights: &PenaltyWeights, i: usize) -> f64 {
    let n = reg.n_obs() as f64;
    let y = reg.response().column(i);
    let w = weights.column(i);
    reg.design()
        .column_iter()
        .zip(&w)
        .filter(|(_, w)| w.is_finite())
        .map(|(x, w)| 2.0 * x.dot(&y).abs() / (n * w))
        .fold(0.0, f64::max)
}

/// Minimises the weighted objective at a single penalty level.
pub fn fit(
    reg: &LaggedRegression,
    weights: &PenaltyWeights,
    lambda: f64,
    init: Option<&CoefficientStack>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let grid = [lambda];
    let mut results = solve_path(reg, weights, &grid, init, opts)?;
    Ok(results.remove(0))
}

/// Fits every grid value in decreasing order, warm-starting each fit from the
/// previous solution.
pub fn fit_path(
    reg: &LaggedRegression,
    weights: &PenaltyWeights,
    grid: &LambdaGrid,
    opts: &SolverOptions,
) -> Result<Vec<FitResult>> {
    solve_path(reg, weights, grid.values(), None, opts)
}

fn solve_path(
    reg: &LaggedRegression,
    weights: &PenaltyWeights,
    lambdas: &[f64],
    init: Option<&CoefficientStack>,
    opts: &SolverOptions,
) -> Result<Vec<FitResult>> {
    check_shapes(reg, weights)?;
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {l}")));
    }
    if let Some(b) = init {
        if b.order() != reg.order() || b.dim() != reg.dim() {
            return Err(Error::DimensionMismatch("initial coefficients have the wrong shape".into()));
        }
    }
    let (p, m) = (reg.order(), reg.dim());

    let solve_column = |i: usize| -> Result<Vec<(Vec<f64>, ColumnFit)>> {
        let col = rescale_column_design(reg, weights, i)?;
        let y = reg.response().column(i).clone_owned();
        let mut start = match init {
            Some(b) => col.forward_transform(b.matrix().column(i).as_slice()),
            None => vec![0.0; col.kept.len()],
        };
        let mut solver = ColumnSolver::new(&col.design, y, &col.weights);
        let mut out = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let (b, diag) = solver.solve(lambda, &start, opts);
            out.push((col.back_transform(&b), diag));
            start = b;
        }
        Ok(out)
    };

    let per_column: Vec<Vec<(Vec<f64>, ColumnFit)>> = if opts.parallel {
        (0..m).into_par_iter().map(solve_column).collect::<Result<_>>()?
    } else {
        (0..m).map(solve_column).collect::<Result<_>>()?
    };

    let mut results = Vec::with_capacity(lambdas.len());
    for (k, &lambda) in lambdas.iter().enumerate() {
        let mut coeffs = CoefficientStack::zeros(p, m);
        let mut columns = Vec::with_capacity(m);
        for (i, col) in per_column.iter().enumerate() {
            let (b, diag) = &col[k];
            coeffs.matrix_mut().column_mut(i).copy_from_slice(b);
            columns.push(diag.clone());
        }
        let objective = columns.iter().map(|c| c.objective).sum();
        results.push(FitResult { coeffs, lambda, objective, columns });
    }
    Ok(results)
}

/// Hard-thresholds coefficients: entries with `|b| <= level` become zero.
pub fn threshold(coeffs: &CoefficientStack, level: f64) -> CoefficientStack {
    let mut out = coeffs.clone();
    out.matrix_mut().iter_mut().filter(|v| v.abs() <= level).for_each(|v| *v = 0.0);
    out
}

/// Soft-thresholding operator; ties at the threshold resolve to zero.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent state for one lasso column.
struct ColumnSolver<'a> {
    x: &'a DMatrix<f64>,
    y: DVector<f64>,
    /// Weights of the retained columns, used to measure convergence on the
    /// original coefficient scale.
    scale: &'a [f64],
    /// `||x_j||^2 / N`
    col_sq: Vec<f64>,
    n: f64,
}

impl<'a> ColumnSolver<'a> {
    fn new(x: &'a DMatrix<f64>, y: DVector<f64>, scale: &'a [f64]) -> Self {
        let n = x.nrows() as f64;
        let col_sq = x.column_iter().map(|c| c.norm_squared() / n).collect();
        Self { x, y, scale, col_sq, n }
    }

    fn column(&self, j: usize) -> &[f64] {
        let rows = self.x.nrows();
        &self.x.as_slice()[j * rows..(j + 1) * rows]
    }

    fn objective(&self, b: &[f64], r: &DVector<f64>, lambda: f64) -> f64 {
        r.norm_squared() / self.n + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Largest violation of the lasso optimality conditions.
    fn kkt_residual(&self, b: &[f64], r: &DVector<f64>, lambda: f64) -> f64 {
        let r = r.as_slice();
        (0..b.len())
            .map(|j| {
                let g = 2.0 * dot(self.column(j), r) / self.n;
                if b[j] > 0.0 {
                    (g - lambda).abs()
                } else if b[j] < 0.0 {
                    (g + lambda).abs()
                } else {
                    (g.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// One pass over `coords`; returns the largest coefficient change on the
    /// original scale.
    fn sweep(&self, b: &mut [f64], r: &mut [f64], coords: &[usize], half_lambda: f64) -> f64 {
        let mut max_delta = 0.0f64;
        for &j in coords {
            let cs = self.col_sq[j];
            if cs == 0.0 {
                b[j] = 0.0;
                continue;
            }
            let xj = self.column(j);
            let rho = dot(xj, r) / self.n + cs * b[j];
            let new = soft_threshold(rho, half_lambda) / cs;
            let delta = new - b[j];
            if delta != 0.0 {
                for (ri, xi) in r.iter_mut().zip(xj) {
                    *ri -= delta * xi;
                }
                b[j] = new;
                max_delta = max_delta.max(delta.abs() / self.scale[j]);
            }
        }
        max_delta
    }

    /// Cyclic sweeps restricted to `active` until the largest change drops
    /// below tolerance. Works on the gradient `x_j' r` through the Gram matrix
    /// of the active columns; the caller recomputes the residual afterwards.
    #[allow(clippy::too_many_arguments)]
    fn active_sweeps(
        &self,
        b: &mut [f64],
        r: &DVector<f64>,
        active: &[usize],
        lambda: f64,
        opts: &SolverOptions,
        iterations: &mut usize,
        trace: &mut Vec<f64>,
    ) {
        let na = active.len();
        if na == 0 {
            return;
        }
        let half_lambda = lambda / 2.0;
        let mut gram = vec![0.0; na * na];
        for a in 0..na {
            let xa = self.column(active[a]);
            for c in a..na {
                let g = dot(xa, self.column(active[c]));
                gram[a * na + c] = g;
                gram[c * na + a] = g;
            }
        }
        let mut grad: Vec<f64> = active.iter().map(|&j| dot(self.column(j), r.as_slice())).collect();
        let mut rss = r.norm_squared();
        let mut l1: f64 = b.iter().map(|v| v.abs()).sum();
        while *iterations < opts.max_iter {
            let mut max_delta = 0.0f64;
            for (a, &j) in active.iter().enumerate() {
                let cs = self.col_sq[j];
                let rho = grad[a] / self.n + cs * b[j];
                let new = soft_threshold(rho, half_lambda) / cs;
                let delta = new - b[j];
                if delta != 0.0 {
                    rss += delta * (delta * cs * self.n - 2.0 * grad[a]);
                    l1 += new.abs() - b[j].abs();
                    let col = &gram[a * na..(a + 1) * na];
                    for (g, gk) in grad.iter_mut().zip(col) {
                        *g -= delta * gk;
                    }
                    b[j] = new;
                    max_delta = max_delta.max(delta.abs() / self.scale[j]);
                }
            }
            *iterations += 1;
            if opts.record_objective {
                trace.push(rss / self.n + lambda * l1);
            }
            if max_delta <= opts.tol_cd * (1.0 + self.max_abs_original(b)) {
                break;
            }
        }
    }

    fn residual_into(&self, b: &[f64], r: &mut DVector<f64>) {
        r.copy_from(&self.y);
        for (j, v) in b.iter().enumerate() {
            if *v != 0.0 {
                for (ri, xi) in r.iter_mut().zip(self.column(j)) {
                    *ri -= v * xi;
                }
            }
        }
    }

    fn max_abs_original(&self, b: &[f64]) -> f64 {
        b.iter().zip(self.scale).map(|(v, w)| (v / w).abs()).fold(0.0, f64::max)
    }

    fn solve(&mut self, lambda: f64, start: &[f64], opts: &SolverOptions) -> (Vec<f64>, ColumnFit) {
        let k = self.col_sq.len();
        let mut b = start.to_vec();
        for (v, cs) in b.iter_mut().zip(&self.col_sq) {
            if *cs == 0.0 {
                *v = 0.0;
            }
        }
        let mut r = self.y.clone();
        self.residual_into(&b, &mut r);
        let half_lambda = lambda / 2.0;
        let all: Vec<usize> = (0..k).collect();
        let mut trace = Vec::new();
        if opts.record_objective {
            trace.push(self.objective(&b, &r, lambda));
        }
        let mut iterations = 0;
        let mut converged = false;
        let mut kkt = f64::INFINITY;

        while iterations < opts.max_iter {
            let delta = self.sweep(&mut b, r.as_mut_slice(), &all, half_lambda);
            iterations += 1;
            if opts.record_objective {
                trace.push(self.objective(&b, &r, lambda));
            }
            if delta <= opts.tol_cd * (1.0 + self.max_abs_original(&b)) {
                kkt = self.kkt_residual(&b, &r, lambda);
                if kkt <= opts.tol_kkt {
                    converged = true;
                    break;
                }
                continue;
            }
            let active: Vec<usize> = (0..k).filter(|&j| b[j] != 0.0).collect();
            self.active_sweeps(&mut b, &r, &active, lambda, opts, &mut iterations, &mut trace);
            self.residual_into(&b, &mut r);
        }
        if !converged {
            kkt = self.kkt_residual(&b, &r, lambda);
            log::warn!("coordinate descent stopped after {iterations} sweeps (kkt residual {kkt:.3e})");
        }
        let objective = self.objective(&b, &r, lambda);
        (b, ColumnFit { iterations, converged, kkt_residual: kkt, objective, objective_trace: trace })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Panel;
    use nalgebra::dmatrix;

    fn serial() -> SolverOptions {
        SolverOptions { parallel: false, ..SolverOptions::default() }
    }

    #[test]
    fn grid_shapes() {
        let g = lambda_grid(3.0, 2, 1000.0).unwrap();
        assert_eq!(g.values(), &[3.0, 0.003]);
        let g = lambda_grid(1.0, 30, 1000.0).unwrap();
        for (k, v) in g.values().iter().enumerate() {
            let expected = 1000f64.powf(-(k as f64) / 29.0);
            assert!((v - expected).abs() <= 1e-15 * expected.max(1.0));
        }
        let ratios: Vec<f64> = g.values().windows(2).map(|w| w[1] / w[0]).collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-12);
        }
        assert!(lambda_grid(0.0, 30, 1000.0).is_err());
        assert!(lambda_grid(1.0, 1, 1000.0).is_err());
    }

    #[test]
    fn soft_threshold_tie_is_zero() {
        assert_eq!(soft_threshold(0.5, 0.5), 0.0);
        assert_eq!(soft_threshold(-0.5, 0.5), 0.0);
        assert_eq!(soft_threshold(0.75, 0.5), 0.25);
        assert_eq!(soft_threshold(-0.75, 0.5), -0.25);
    }

    fn single_column(x: Vec<f64>, y: Vec<f64>) -> LaggedRegression {
        let n = x.len();
        LaggedRegression::from_parts(DMatrix::from_vec(n, 1, y), DMatrix::from_vec(n, 1, x), 1).unwrap()
    }

    #[test]
    fn orthonormal_scalar_case_is_soft_threshold() {
        // x'x / N = 1
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let y = vec![2.0, -1.0, 0.5, 0.3];
        let n = 4.0;
        let rho: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
        let reg = single_column(x, y);
        for (w, lambda) in [(1.0, 0.3), (2.5, 0.2), (0.7, 5.0)] {
            let weights = PenaltyWeights::new(vec![dmatrix![w]]).unwrap();
            let fit = fit(&reg, &weights, lambda, None, &serial()).unwrap();
            let expected = soft_threshold(rho, lambda * w / 2.0);
            assert!((fit.coeffs.get(0, 0, 0) - expected).abs() < 1e-12);
        }
        let lmax = lambda_max(&reg, &PenaltyWeights::uniform(1, 1)).unwrap();
        assert!((lmax - 2.0 * rho.abs()).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_response_has_zero_lambda_max() {
        let reg = single_column(vec![1.0, 1.0, 0.0], vec![1.0, -1.0, 3.0]);
        let w = PenaltyWeights::uniform(1, 1);
        assert_eq!(lambda_max(&reg, &w).unwrap(), 0.0);
        let f = fit(&reg, &w, 0.1, None, &serial()).unwrap();
        assert_eq!(f.support_size(), 0);
        let zero = single_column(vec![0.0; 3], vec![1.0, 2.0, 3.0]);
        assert!(lambda_max(&zero, &w).is_err());
    }

    #[test]
    fn unit_weights_leave_design_untouched() {
        let panel = Panel::new(DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0)).unwrap();
        let reg = LaggedRegression::build(&panel, 2).unwrap();
        let col = rescale_column_design(&reg, &PenaltyWeights::uniform(2, 3), 1).unwrap();
        assert_eq!(&col.design, reg.design());
        assert_eq!(col.kept, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn infinite_weight_removes_column() {
        let panel = Panel::new(DMatrix::from_fn(20, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0)).unwrap();
        let reg = LaggedRegression::build(&panel, 1).unwrap();
        let w = PenaltyWeights::new(vec![dmatrix![1.0, f64::INFINITY; 1.0, 1.0]]).unwrap();
        let col = rescale_column_design(&reg, &w, 0).unwrap();
        assert_eq!(col.kept, vec![0]);
        let f = fit(&reg, &w, 0.0, None, &serial()).unwrap();
        assert_eq!(f.coeffs.get(0, 0, 1), 0.0);
        assert_ne!(f.coeffs.get(0, 1, 0), 0.0);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let panel = Panel::new(DMatrix::from_fn(10, 2, |i, j| (i + j) as f64)).unwrap();
        let reg = LaggedRegression::build(&panel, 1).unwrap();
        assert!(fit(&reg, &PenaltyWeights::uniform(2, 2), 0.1, None, &serial()).is_err());
        assert!(fit(&reg, &PenaltyWeights::uniform(1, 2), -0.1, None, &serial()).is_err());
    }

    #[test]
    fn threshold_behaviour() {
        let b = CoefficientStack::from_phis(&[dmatrix![0.5, -0.05; 0.2, 0.0]]).unwrap();
        assert_eq!(threshold(&b, 0.0), b);
        assert_eq!(threshold(&b, 1.0).support_size(), 0);
        let t = threshold(&b, 0.2);
        assert_eq!(t.get(0, 0, 0), 0.5);
        assert_eq!(t.get(0, 1, 0), 0.0);
        assert_eq!(t.support_size(), 1);
    }
}
