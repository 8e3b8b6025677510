//! Estimation and forecast metrics, network classification, the
//! Diebold-Mariano test and evaluators for the theoretical error bounds.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{companion_matrix, CoefficientStack};

fn check_shape(est: &CoefficientStack, truth: &CoefficientStack) -> Result<()> {
    if !est.same_shape(truth) {
        return Err(Error::DimensionMismatch(format!(
            "estimate is p={}, m={} but truth is p={}, m={}",
            est.order(),
            est.dim(),
            truth.order(),
            truth.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationErrors {
    pub l1: f64,
    pub l2: f64,
}

pub fn estimation_errors(est: &CoefficientStack, truth: &CoefficientStack) -> Result<EstimationErrors> {
    check_shape(est, truth)?;
    let diff = est.matrix() - truth.matrix();
    Ok(EstimationErrors { l1: diff.iter().map(|v| v.abs()).sum(), l2: diff.norm() })
}

/// Fractions of false zeros and false nonzeros over all `p*m^2` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportMetrics {
    pub pfz: f64,
    pub pfnz: f64,
}

pub fn support_metrics(est: &CoefficientStack, truth: &CoefficientStack) -> Result<SupportMetrics> {
    check_shape(est, truth)?;
    let total = est.len() as f64;
    let (mut fz, mut fnz) = (0usize, 0usize);
    for (e, t) in est.matrix().iter().zip(truth.matrix().iter()) {
        match (*e == 0.0, *t == 0.0) {
            (true, false) => fz += 1,
            (false, true) => fnz += 1,
            _ => {}
        }
    }
    Ok(SupportMetrics { pfz: fz as f64 / total, pfnz: fnz as f64 / total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeClass {
    TruePositive,
    /// Present in the truth, missed by the estimate.
    FalseNegative,
    /// Absent from the truth, present in the estimate.
    FalsePositive,
    TrueNegative,
}

impl EdgeClass {
    pub fn of(estimated: bool, actual: bool) -> Self {
        match (actual, estimated) {
            (true, true) => EdgeClass::TruePositive,
            (true, false) => EdgeClass::FalseNegative,
            (false, true) => EdgeClass::FalsePositive,
            (false, false) => EdgeClass::TrueNegative,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeClass::TruePositive => "true-positive",
            EdgeClass::FalseNegative => "false-negative",
            EdgeClass::FalsePositive => "false-positive",
            EdgeClass::TrueNegative => "true-negative",
        }
    }
}

impl fmt::Display for EdgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [EdgeClass::TruePositive, EdgeClass::FalseNegative, EdgeClass::FalsePositive, EdgeClass::TrueNegative]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown edge class '{s}'")))
    }
}

/// Directed edge from `from_site` to `to_site`; `lag` is `None` when lags
/// have been collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from_site: usize,
    pub to_site: usize,
    pub lag: Option<usize>,
    pub class: EdgeClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub true_positive: usize,
    pub false_negative: usize,
    pub false_positive: usize,
    pub true_negative: usize,
}

impl EdgeCounts {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_negative + self.false_positive + self.true_negative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeClassification {
    pub edges: Vec<Edge>,
}

impl EdgeClassification {
    pub fn counts(&self) -> EdgeCounts {
        let mut c = EdgeCounts::default();
        for e in &self.edges {
            match e.class {
                EdgeClass::TruePositive => c.true_positive += 1,
                EdgeClass::FalseNegative => c.false_negative += 1,
                EdgeClass::FalsePositive => c.false_positive += 1,
                EdgeClass::TrueNegative => c.true_negative += 1,
            }
        }
        c
    }
}

/// Classifies every `(lag, to, from)` coefficient. Lags are 1-based.
pub fn classify_network(est: &CoefficientStack, truth: &CoefficientStack) -> Result<EdgeClassification> {
    check_shape(est, truth)?;
    let edges = truth
        .entries()
        .map(|(l, s, sf, t)| Edge {
            from_site: sf,
            to_site: s,
            lag: Some(l + 1),
            class: EdgeClass::of(est.get(l, s, sf) != 0.0, t != 0.0),
        })
        .collect();
    Ok(EdgeClassification { edges })
}

/// Classifies site pairs, treating a pair as connected when any lag
/// coefficient is nonzero.
pub fn classify_network_collapsed(
    est: &CoefficientStack,
    truth: &CoefficientStack,
) -> Result<EdgeClassification> {
    check_shape(est, truth)?;
    let (p, m) = (truth.order(), truth.dim());
    let any = |b: &CoefficientStack, s: usize, sf: usize| (0..p).any(|l| b.get(l, s, sf) != 0.0);
    let mut edges = Vec::with_capacity(m * m);
    for s in 0..m {
        for sf in 0..m {
            edges.push(Edge {
                from_site: sf,
                to_site: s,
                lag: None,
                class: EdgeClass::of(any(est, s, sf), any(truth, s, sf)),
            });
        }
    }
    Ok(EdgeClassification { edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    /// The long-run variance of the loss differential was not positive.
    pub degenerate: bool,
}

/// Diebold-Mariano test of equal squared-error accuracy for `h`-step
/// forecasts. The long-run variance sums autocovariances (denominator `n`)
/// up to lag `h - 1` with rectangular weights.
pub fn dm_test(err_a: &[f64], err_b: &[f64], h: usize) -> Result<DmResult> {
    if err_a.len() != err_b.len() {
        return Err(Error::DimensionMismatch(format!(
            "error series have lengths {} and {}",
            err_a.len(),
            err_b.len()
        )));
    }
    let n = err_a.len();
    if n < 2 {
        return Err(Error::InsufficientData("the DM test needs at least two errors".into()));
    }
    if h == 0 || h > n {
        return Err(Error::InvalidParameter(format!("horizon {h} invalid for {n} errors")));
    }
    if err_a.iter().chain(err_b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forecast errors".into()));
    }
    let d: Vec<f64> = err_a.iter().zip(err_b).map(|(a, b)| a * a - b * b).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let autocov = |k: usize| -> f64 {
        (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / nf
    };
    let lrv = autocov(0) + 2.0 * (1..h).map(autocov).sum::<f64>();
    if !(lrv > 0.0) {
        return Ok(DmResult { statistic: 0.0, p_value: 1.0, degenerate: true });
    }
    let statistic = mean / (lrv / nf).sqrt();
    Ok(DmResult { statistic, p_value: two_sided_normal_p(statistic), degenerate: false })
}

pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    let normal = Normal::standard();
    (2.0 * normal.cdf(-z.abs())).min(1.0)
}

/// Universal constants scaling the dependence factor and the deviation bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub a1: f64,
    pub a2: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self { a1: 1.0, a2: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuExtrema {
    pub mu_min: f64,
    pub mu_max: f64,
}

/// Process-level quantities entering the error bounds. `omega` and `q_const`
/// are only defined up to the constants in `constants`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryQuantities {
    pub order: usize,
    pub dim: usize,
    /// Spectral radius of the companion matrix.
    pub rho: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_min_tilde: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub alpha: f64,
    pub omega: f64,
    pub q_const: f64,
    pub constants: TheoryConstants,
}

impl TheoryQuantities {
    fn assemble(
        order: usize,
        dim: usize,
        rho: f64,
        mu: MuExtrema,
        mu_min_tilde: f64,
        sigma: &DMatrix<f64>,
        constants: TheoryConstants,
    ) -> Self {
        let eig = sigma.clone().symmetric_eigenvalues();
        let sigma_min = eig.min();
        let sigma_max = eig.max();
        let alpha = sigma_min / (2.0 * mu.mu_max);
        let omega = constants.a1 * (sigma_max / mu_min_tilde) / (sigma_min / mu.mu_max);
        let q_const =
            constants.a2 * (sigma_max + sigma_max / mu.mu_min + sigma_max * mu.mu_max / mu.mu_min);
        Self {
            order,
            dim,
            rho,
            mu_min: mu.mu_min,
            mu_max: mu.mu_max,
            mu_min_tilde,
            sigma_min,
            sigma_max,
            alpha,
            omega,
            q_const,
            constants,
        }
    }

    /// Curvature tolerance for a design with `n_obs` rows.
    pub fn tau(&self, n_obs: usize) -> f64 {
        let dims = (self.order as f64).ln() + (self.dim as f64).ln();
        self.alpha * self.omega.powi(2).max(1.0) * dims / n_obs as f64
    }

    /// Smallest penalty level at which the bounds apply,
    /// `4 Q sqrt((log p + 2 log m) / N)`.
    pub fn lambda_scale(&self, n_obs: usize) -> f64 {
        let dims = (self.order as f64).ln() + 2.0 * (self.dim as f64).ln();
        4.0 * self.q_const * (dims / n_obs as f64).sqrt()
    }
}

fn check_sigma(sigma: &DMatrix<f64>, m: usize) -> Result<()> {
    if sigma.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!("sigma must be {m}x{m}")));
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("innovation covariance".into()));
    }
    Ok(())
}

/// Closed-form quantities for a stationary VAR(1) with symmetric transition
/// matrix.
pub fn theory_symmetric_var1(
    phi: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    constants: TheoryConstants,
) -> Result<TheoryQuantities> {
    let m = phi.nrows();
    if phi.ncols() != m {
        return Err(Error::DimensionMismatch("transition matrix must be square".into()));
    }
    check_sigma(sigma, m)?;
    let asym = (phi - phi.transpose()).amax();
    if asym > 1e-10 {
        return Err(Error::InvalidParameter(format!("transition matrix is not symmetric ({asym:e})")));
    }
    let rho = phi.clone().symmetric_eigenvalues().amax();
    if rho >= 1.0 {
        return Err(Error::NonStationary(rho));
    }
    let mu = MuExtrema { mu_min: (1.0 - rho).powi(2), mu_max: (1.0 + rho).powi(2) };
    Ok(TheoryQuantities::assemble(1, m, rho, mu, mu.mu_min, sigma, constants))
}

fn unit_circle_extrema(blocks: &[DMatrix<f64>], grid_points: usize) -> MuExtrema {
    let n = blocks[0].nrows();
    let (lo, hi) = (0..grid_points)
        .into_par_iter()
        .map(|g| {
            let theta = 2.0 * std::f64::consts::PI * g as f64 / grid_points as f64;
            let mut poly: DMatrix<Complex<f64>> = DMatrix::identity(n, n);
            for (l, block) in blocks.iter().enumerate() {
                let z = Complex::from_polar(1.0, theta * (l + 1) as f64);
                poly.zip_apply(block, |a, b| *a -= z * b);
            }
            let gram = poly.adjoint() * &poly;
            let eig = SymmetricEigen::new(gram).eigenvalues;
            (eig.min(), eig.max())
        })
        .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    MuExtrema { mu_min: lo, mu_max: hi }
}

fn check_grid(phis: &[DMatrix<f64>], grid_points: usize) -> Result<()> {
    if phis.is_empty() {
        return Err(Error::InvalidParameter("at least one transition matrix is required".into()));
    }
    let m = phis[0].nrows();
    if phis.iter().any(|p| p.shape() != (m, m)) {
        return Err(Error::DimensionMismatch("transition matrices must be square and equal-sized".into()));
    }
    if grid_points < 8 {
        return Err(Error::InvalidParameter("at least 8 grid points are required".into()));
    }
    Ok(())
}

/// Extremes of the eigenvalues of `Phi(z)^H Phi(z)` with
/// `Phi(z) = I - sum_l Phi_l z^l`, over a uniform grid on the unit circle.
pub fn mu_extrema_numeric(phis: &[DMatrix<f64>], grid_points: usize) -> Result<MuExtrema> {
    check_grid(phis, grid_points)?;
    Ok(unit_circle_extrema(phis, grid_points))
}

/// Smallest eigenvalue of `(I - A z)^H (I - A z)` over the unit circle grid,
/// where `A` is the companion matrix.
pub fn mu_min_companion(phis: &[DMatrix<f64>], grid_points: usize) -> Result<f64> {
    check_grid(phis, grid_points)?;
    let companion = companion_matrix(phis)?;
    Ok(unit_circle_extrema(std::slice::from_ref(&companion), grid_points).mu_min)
}

/// Numerical theory quantities for a general VAR(p).
pub fn theory_quantities(
    phis: &[DMatrix<f64>],
    sigma: &DMatrix<f64>,
    constants: TheoryConstants,
    grid_points: usize,
) -> Result<TheoryQuantities> {
    check_grid(phis, grid_points)?;
    let m = phis[0].nrows();
    check_sigma(sigma, m)?;
    let companion = companion_matrix(phis)?;
    let rho = crate::model::spectral_radius(&companion)?;
    if rho >= 1.0 {
        return Err(Error::NonStationary(rho));
    }
    let mu = unit_circle_extrema(phis, grid_points);
    let mu_min_tilde = unit_circle_extrema(std::slice::from_ref(&companion), grid_points).mu_min;
    Ok(TheoryQuantities::assemble(phis.len(), m, rho, mu, mu_min_tilde, sigma, constants))
}

/// Error bounds for an exactly sparse truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Bounds {
    pub l2: f64,
    pub l1: f64,
    pub prediction: f64,
    /// Bound on the number of missed coefficients larger than `s0`.
    pub false_zeros: f64,
    /// Bound on the number of spurious coefficients after thresholding.
    pub false_nonzeros: f64,
}

/// Error bounds for a weakly sparse truth approximated on `J_eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Bounds {
    pub l2: f64,
    pub l1: f64,
    pub prediction: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) {
        return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
    }
    Ok(())
}

/// Bounds for support size `k`, penalty `lambda`, curvature `alpha`, weight
/// ratio `r_w` and signal threshold `s0`.
///
/// The l1 and prediction bounds are evaluated in their factored forms
/// `(2 + 2r) sqrt(k) l2` and `(1 + 2r)/2 sqrt(k) lambda l2`, which expand to
/// `(2 + 6r + 4r^2) k lambda / alpha` and `(1 + 2r)^2 k lambda^2 / (2 alpha)`.
pub fn theorem1_bounds(k: f64, lambda: f64, alpha: f64, r_w: f64, s0: f64) -> Result<Theorem1Bounds> {
    check_alpha(alpha)?;
    check_nonneg("k", k)?;
    check_nonneg("lambda", lambda)?;
    check_nonneg("r_w", r_w)?;
    if !(s0 > 0.0) {
        return Err(Error::InvalidParameter(format!("s0 must be positive, got {s0}")));
    }
    let sqrt_k = k.sqrt();
    let l2 = (1.0 + 2.0 * r_w) * sqrt_k * lambda / alpha;
    let l1 = (2.0 + 2.0 * r_w) * sqrt_k * l2;
    let prediction = (1.0 + 2.0 * r_w) / 2.0 * sqrt_k * lambda * l2;
    Ok(Theorem1Bounds {
        l2,
        l1,
        prediction,
        false_zeros: l1 / s0,
        false_nonzeros: (1.0 + 2.0 * r_w).powi(2) * k / alpha,
    })
}

/// Bounds for a weakly sparse truth with `j_eta` large coefficients and tail
/// l1 mass `tail_l1`. With `tail_l1 = 0` they coincide with
/// [`theorem1_bounds`] at `k = j_eta`.
pub fn theorem2_bounds(
    j_eta: f64,
    tail_l1: f64,
    lambda_tilde: f64,
    alpha: f64,
    r_w: f64,
    omega: f64,
    q_const: f64,
) -> Result<Theorem2Bounds> {
    check_alpha(alpha)?;
    check_nonneg("j_eta", j_eta)?;
    check_nonneg("tail_l1", tail_l1)?;
    check_nonneg("lambda_tilde", lambda_tilde)?;
    check_nonneg("r_w", r_w)?;
    let sqrt_j = j_eta.sqrt();
    let mut l2 = (1.0 + 2.0 * r_w) * sqrt_j * lambda_tilde / alpha;
    let mut l1_tail = 0.0;
    let mut pred_tail = 0.0;
    if tail_l1 > 0.0 {
        if !(q_const > 0.0) {
            return Err(Error::InvalidParameter(format!("q_const must be positive, got {q_const}")));
        }
        l2 += 2.0 * (r_w * lambda_tilde * tail_l1 / alpha).sqrt()
            + 4.0 * r_w * omega.max(1.0) / q_const * lambda_tilde * tail_l1;
        l1_tail = 4.0 * r_w * tail_l1;
        pred_tail = 2.0 * r_w * lambda_tilde * tail_l1;
    }
    let l1 = (2.0 + 2.0 * r_w) * sqrt_j * l2 + l1_tail;
    let prediction = (1.0 + 2.0 * r_w) / 2.0 * sqrt_j * lambda_tilde * l2 + pred_tail;
    Ok(Theorem2Bounds { l2, l1, prediction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityLevel {
    pub eta: f64,
    /// Number of coefficients with magnitude above `eta`.
    pub j_eta: usize,
    /// l1 mass of the remaining coefficients.
    pub tail_l1: f64,
}

pub fn weak_sparsity_profile(truth: &CoefficientStack, eta_grid: &[f64]) -> Result<Vec<SparsityLevel>> {
    eta_grid
        .iter()
        .map(|&eta| {
            check_nonneg("eta", eta)?;
            let (mut j_eta, mut tail_l1) = (0usize, 0.0);
            for v in truth.matrix().iter().map(|v| v.abs()) {
                if v > eta {
                    j_eta += 1;
                } else {
                    tail_l1 += v;
                }
            }
            Ok(SparsityLevel { eta, j_eta, tail_l1 })
        })
        .collect()
}

/// `sum_j |beta_j|^r` over the nonzero coefficients; `r = 0` counts them.
pub fn lr_radius(truth: &CoefficientStack, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidParameter(format!("r must lie in [0, 1], got {r}")));
    }
    Ok(truth.matrix().iter().filter(|v| **v != 0.0).map(|v| v.abs().powf(r)).sum())
}

/// Inputs of the l_r-ball error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrBallInputs {
    pub w_min: f64,
    pub w_max: f64,
    pub alpha: f64,
    pub radius: f64,
    pub lambda: f64,
    pub r: f64,
    pub omega: f64,
    pub q_const: f64,
}

/// l2 error bound for a truth inside an l_r ball.
pub fn corollary1_bound(x: &LrBallInputs) -> Result<f64> {
    check_alpha(x.alpha)?;
    if !(x.w_min > 0.0) || !(x.w_max >= x.w_min) {
        return Err(Error::InvalidParameter("weights must satisfy 0 < w_min <= w_max".into()));
    }
    if !(x.q_const > 0.0) {
        return Err(Error::InvalidParameter(format!("q_const must be positive, got {}", x.q_const)));
    }
    if !(0.0..=1.0).contains(&x.r) {
        return Err(Error::InvalidParameter(format!("r must lie in [0, 1], got {}", x.r)));
    }
    check_nonneg("radius", x.radius)?;
    check_nonneg("lambda", x.lambda)?;
    let lead = (x.w_min + 2.0 * x.w_max + 2.0 * x.w_max.sqrt())
        * x.alpha.powf((x.r - 2.0) / 2.0)
        * x.radius.sqrt()
        * x.lambda.powf((2.0 - x.r) / 2.0);
    let tail = 4.0 * x.w_max * x.omega.max(1.0) / (x.q_const * x.alpha.powf(1.0 - x.r))
        * x.radius
        * x.lambda.powf(2.0 - x.r);
    Ok(lead + tail)
}
