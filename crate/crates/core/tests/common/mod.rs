//! Independent reference solvers and instance generators shared by the
//! integration suites. Nothing here calls into the crate's solver.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stvar_core::{LaggedRegression, PenaltyWeights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// A single-response weighted lasso instance `(X, y, w)`.
pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: Vec<f64>,
}

impl Instance {
    /// Sparse truth plus noise, with weights uniform on `[w_lo, w_hi]`.
    pub fn random(rng: &mut ChaCha8Rng, n: usize, k: usize, w_lo: f64, w_hi: f64) -> Self {
        let x = gaussian_matrix(rng, n, k);
        let mut beta = DVector::zeros(k);
        for j in 0..k.min(5) {
            beta[(j * 7) % k] = rng.random_range(-2.0..2.0);
        }
        let noise = DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let y = &x * beta + noise;
        let w = (0..k).map(|_| rng.random_range(w_lo..w_hi)).collect();
        Self { x, y, w }
    }

    /// The instance as a one-site regression whose `k` lags are the columns.
    pub fn regression(&self) -> LaggedRegression {
        let response = DMatrix::from_column_slice(self.y.len(), 1, self.y.as_slice());
        LaggedRegression::from_parts(response, self.x.clone(), self.x.ncols()).unwrap()
    }

    pub fn weights(&self) -> PenaltyWeights {
        PenaltyWeights::new(self.w.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect()).unwrap()
    }

    /// `max_j (2/N) |x_j'y| / w_j`
    pub fn lambda_max(&self) -> f64 {
        let n = self.x.nrows() as f64;
        (0..self.x.ncols())
            .map(|j| 2.0 * self.x.column(j).dot(&self.y).abs() / (n * self.w[j]))
            .fold(0.0, f64::max)
    }

    pub fn objective(&self, b: &[f64], lambda: f64) -> f64 {
        let r = &self.y - &self.x * DVector::from_column_slice(b);
        r.norm_squared() / self.x.nrows() as f64
            + lambda * b.iter().zip(&self.w).map(|(v, w)| w * v.abs()).sum::<f64>()
    }

    /// Largest violation of the optimality conditions, each coordinate's
    /// gradient divided by its weight.
    pub fn kkt_residual(&self, b: &[f64], lambda: f64) -> f64 {
        let n = self.x.nrows() as f64;
        let r = &self.y - &self.x * DVector::from_column_slice(b);
        (0..b.len())
            .map(|j| {
                let g = 2.0 * self.x.column(j).dot(&r) / (n * self.w[j]);
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
}

fn shrink(z: f64, t: f64) -> f64 {
    z.signum() * (z.abs() - t).max(0.0)
}

/// Accelerated proximal gradient with adaptive restart on the weighted
/// objective, stopped when the gradient mapping falls below `tol`.
pub fn fista(inst: &Instance, lambda: f64, tol: f64, max_iter: usize) -> Vec<f64> {
    let n = inst.x.nrows() as f64;
    let k = inst.x.ncols();
    let gram = inst.x.transpose() * &inst.x / n;
    let xty = inst.x.transpose() * &inst.y / n;
    let lip = 2.0 * gram.clone().symmetric_eigen().eigenvalues.max();
    let t = 1.0 / lip;
    let grad = |b: &DVector<f64>| (&gram * b - &xty) * 2.0;
    let prox = |z: &DVector<f64>| DVector::from_fn(k, |j, _| shrink(z[j], t * lambda * inst.w[j]));
    let mut b = DVector::zeros(k);
    let mut z = b.clone();
    let mut theta = 1.0f64;
    for it in 0..max_iter {
        let b_next = prox(&(&z - grad(&z) * t));
        if (&z - &b_next).dot(&(&b_next - &b)) > 0.0 {
            theta = 1.0;
            z = b_next.clone();
        } else {
            let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
            z = &b_next + (&b_next - &b) * ((theta - 1.0) / theta_next);
            theta = theta_next;
        }
        b = b_next;
        if it % 10 == 0 {
            let mapped = prox(&(&b - grad(&b) * t));
            if (&b - mapped).amax() / t <= tol {
                break;
            }
        }
    }
    b.as_slice().to_vec()
}

/// Cyclic coordinate descent on the weighted objective without rescaling:
/// `b_j = S(rho_j, lambda w_j / 2) / (||x_j||^2 / N)`.
pub fn weighted_cd(inst: &Instance, lambda: f64, tol: f64, max_sweeps: usize) -> Vec<f64> {
    let n = inst.x.nrows() as f64;
    let k = inst.x.ncols();
    let col_sq: Vec<f64> = (0..k).map(|j| inst.x.column(j).norm_squared() / n).collect();
    let mut b = vec![0.0; k];
    let mut r = inst.y.clone();
    for _ in 0..max_sweeps {
        let mut change = 0.0f64;
        for j in 0..k {
            let xj = inst.x.column(j);
            let rho = xj.dot(&r) / n + col_sq[j] * b[j];
            let new = shrink(rho, lambda * inst.w[j] / 2.0) / col_sq[j];
            let d = new - b[j];
            if d != 0.0 {
                r -= xj * d;
                b[j] = new;
                change = change.max(d.abs());
            }
        }
        if change < tol {
            break;
        }
    }
    b
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random stationary VAR(p) transition matrices with spectral norm budget
/// `scale` split across lags.
pub fn stationary_phis(rng: &mut ChaCha8Rng, p: usize, m: usize, scale: f64) -> Vec<DMatrix<f64>> {
    (0..p)
        .map(|_| {
            let a = gaussian_matrix(rng, m, m);
            let norm = a.clone().svd(false, false).singular_values.max();
            a * (scale / (p as f64 * norm))
        })
        .collect()
}
