//! VAR(p) representation, stationarity, simulation, lagged regression design
//! and recursive forecasting.
//!
//! Conventions used throughout the crate:
//!
//! - `phis[l]` holds the transition matrix for lag `l + 1`; entry `(s, s')` is
//!   the lagged influence of site `s'` on site `s`.
//! - A [`CoefficientStack`] stores the `(p*m) x m` matrix `B` whose block rows
//!   are the transposed transition matrices, so `B[(l*m + s', s)]` is
//!   `Phi_{l+1}[(s, s')]`.
//! - Panels are `T x m`, row `t` holding the observation at time `t + 1`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Margin below one required of the companion spectral radius.
pub const STATIONARITY_MARGIN: f64 = 1e-8;

/// Default number of discarded warm-up steps in [`VarModel::simulate`].
pub const DEFAULT_BURN_IN: usize = 500;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VarModelRepr", into = "VarModelRepr")]
pub struct VarModel {
    phis: Vec<DMatrix<f64>>,
    sigma: DMatrix<f64>,
}

impl VarModel {
    pub fn new(phis: Vec<DMatrix<f64>>, sigma: DMatrix<f64>) -> Result<Self> {
        if phis.is_empty() {
            return Err(Error::InvalidParameter("VAR order must be at least 1".into()));
        }
        let m = sigma.nrows();
        if m == 0 || !sigma.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "sigma must be a non-empty square matrix, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        for (l, phi) in phis.iter().enumerate() {
            if phi.shape() != (m, m) {
                return Err(Error::DimensionMismatch(format!(
                    "Phi_{} is {}x{}, expected {m}x{m}",
                    l + 1,
                    phi.nrows(),
                    phi.ncols()
                )));
            }
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("Phi_{}", l + 1)));
            }
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sigma".into()));
        }
        for i in 0..m {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidParameter("sigma is not symmetric".into()));
                }
            }
        }
        if sigma.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("innovation covariance".into()));
        }
        Ok(Self { phis, sigma })
    }

    /// Builds a model from a coefficient stack and an innovation covariance.
    pub fn from_coefficients(coeffs: &CoefficientStack, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new((0..coeffs.order()).map(|l| coeffs.phi(l)).collect(), sigma)
    }

    pub fn order(&self) -> usize {
        self.phis.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn phis(&self) -> &[DMatrix<f64>] {
        &self.phis
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn coefficients(&self) -> CoefficientStack {
        CoefficientStack::from_phis(&self.phis).expect("validated model")
    }

    /// `(p*m) x (p*m)` companion matrix: `[Phi_1 .. Phi_p]` on top, identity
    /// blocks on the sub-diagonal, zeros elsewhere.
    pub fn companion_matrix(&self) -> DMatrix<f64> {
        companion_matrix(&self.phis).expect("validated model")
    }

    pub fn companion_spectral_radius(&self) -> f64 {
        spectral_radius(&self.companion_matrix()).expect("companion matrix is square")
    }

    pub fn is_stationary(&self) -> bool {
        self.companion_spectral_radius() < 1.0 - STATIONARITY_MARGIN
    }

    /// Draws a sample path of length `t_len` after discarding `burn_in` steps
    /// started from the zero state. Innovations are Gaussian with covariance
    /// `sigma`, produced through its Cholesky factor.
    pub fn simulate(&self, t_len: usize, burn_in: usize, seed: u64) -> Result<Panel> {
        if t_len == 0 {
            return Err(Error::InvalidParameter("t_len must be at least 1".into()));
        }
        let radius = self.companion_spectral_radius();
        if radius >= 1.0 - STATIONARITY_MARGIN {
            return Err(Error::NonStationary(radius));
        }
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
        let lower = chol.l();
        let (m, p) = (self.dim(), self.order());

        let mut rng = rng_from_seed(seed);
        // history[0] is the most recent state
        let mut history: Vec<DVector<f64>> = vec![DVector::zeros(m); p];
        let mut out = DMatrix::zeros(t_len, m);
        let mut z = DVector::zeros(m);
        for step in 0..burn_in + t_len {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let mut next = &lower * &z;
            for (phi, past) in self.phis.iter().zip(&history) {
                next.gemv(1.0, phi, past, 1.0);
            }
            history.rotate_right(1);
            history[0] = next;
            if step >= burn_in {
                out.row_mut(step - burn_in).copy_from(&history[0].transpose());
            }
        }
        Panel::new(out)
    }
}

#[derive(Serialize, Deserialize)]
struct VarModelRepr {
    p: usize,
    m: usize,
    /// `p` blocks of row-major `m x m` arrays.
    phis: Vec<Vec<Vec<f64>>>,
    sigma: Vec<Vec<f64>>,
}

impl From<VarModel> for VarModelRepr {
    fn from(model: VarModel) -> Self {
        Self {
            p: model.order(),
            m: model.dim(),
            phis: model.phis.iter().map(matrix_to_rows).collect(),
            sigma: matrix_to_rows(&model.sigma),
        }
    }
}

impl TryFrom<VarModelRepr> for VarModel {
    type Error = Error;

    fn try_from(repr: VarModelRepr) -> Result<Self> {
        if repr.phis.len() != repr.p {
            return Err(Error::DimensionMismatch(format!(
                "declared p = {} but {} transition matrices given",
                repr.p,
                repr.phis.len()
            )));
        }
        let phis = repr
            .phis
            .iter()
            .map(|rows| matrix_from_rows(rows, repr.m))
            .collect::<Result<Vec<_>>>()?;
        VarModel::new(phis, matrix_from_rows(&repr.sigma, repr.m)?)
    }
}

pub(crate) fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], m: usize) -> Result<DMatrix<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch(format!("expected a {m}x{m} array")));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

/// Companion matrix of a sequence of square transition matrices.
pub fn companion_matrix(phis: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let p = phis.len();
    let m = phis
        .first()
        .map(|phi| phi.nrows())
        .ok_or_else(|| Error::InvalidParameter("no transition matrices".into()))?;
    if phis.iter().any(|phi| phi.shape() != (m, m)) {
        return Err(Error::DimensionMismatch(
            "transition matrices must share one square shape".into(),
        ));
    }
    let mut c = DMatrix::zeros(p * m, p * m);
    for (l, phi) in phis.iter().enumerate() {
        c.view_mut((0, l * m), (m, m)).copy_from(phi);
    }
    for l in 1..p {
        c.view_mut((l * m, (l - 1) * m), (m, m)).fill_with_identity();
    }
    Ok(c)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "spectral radius needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix".into()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// A `T x m` panel of observations with site identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    site_ids: Vec<String>,
}

impl Panel {
    /// Panel with default site identifiers `s1..sm`.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let ids = (1..=values.ncols()).map(|i| format!("s{i}")).collect();
        Self::with_ids(values, ids)
    }

    pub fn with_ids(values: DMatrix<f64>, site_ids: Vec<String>) -> Result<Self> {
        if site_ids.len() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} site ids for {} columns",
                site_ids.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("panel".into()));
        }
        Ok(Self { values, site_ids })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `start..end` as a new panel.
    pub fn slice(&self, start: usize, end: usize) -> Panel {
        Panel {
            values: self.values.rows(start, end - start).into_owned(),
            site_ids: self.site_ids.clone(),
        }
    }

    /// Observation at 0-based row `t`.
    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }
}

/// The stacked least-squares problem `Y = X B + E` built from a panel.
#[derive(Debug, Clone)]
pub struct LaggedRegression {
    response: DMatrix<f64>,
    design: DMatrix<f64>,
    order: usize,
}

impl LaggedRegression {
    /// Row `r` of the response is the observation at time `T - r`; row `r` of
    /// the design concatenates the observations at `T - r - 1, .., T - r - p`.
    pub fn build(panel: &Panel, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("VAR order must be at least 1".into()));
        }
        let (t_len, m) = (panel.len(), panel.dim());
        if t_len <= p {
            return Err(Error::InsufficientData(format!(
                "panel has {t_len} rows; order {p} needs at least {}",
                p + 1
            )));
        }
        let n = t_len - p;
        let x = panel.values();
        let response = DMatrix::from_fn(n, m, |r, s| x[(t_len - 1 - r, s)]);
        let design = DMatrix::from_fn(n, p * m, |r, j| {
            let (l, s) = (j / m, j % m);
            x[(t_len - 2 - r - l, s)]
        });
        Ok(Self { response, design, order: p })
    }

    pub fn from_parts(response: DMatrix<f64>, design: DMatrix<f64>, order: usize) -> Result<Self> {
        let m = response.ncols();
        if design.nrows() != response.nrows() || design.ncols() != order * m {
            return Err(Error::DimensionMismatch(format!(
                "response {}x{} and design {}x{} incompatible with order {order}",
                response.nrows(),
                m,
                design.nrows(),
                design.ncols()
            )));
        }
        if response.iter().chain(design.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression data".into()));
        }
        Ok(Self { response, design, order })
    }

    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn n_obs(&self) -> usize {
        self.response.nrows()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.response.ncols()
    }
}

/// The `(p*m) x m` coefficient matrix `B` with block rows `Phi_l'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientStack {
    order: usize,
    b: DMatrix<f64>,
}

impl CoefficientStack {
    pub fn zeros(p: usize, m: usize) -> Self {
        Self { order: p, b: DMatrix::zeros(p * m, m) }
    }

    pub fn from_matrix(p: usize, b: DMatrix<f64>) -> Result<Self> {
        let m = b.ncols();
        if p == 0 || b.nrows() != p * m {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{}, expected {}x{m}",
                b.nrows(),
                m,
                p * m
            )));
        }
        Ok(Self { order: p, b })
    }

    pub fn from_phis(phis: &[DMatrix<f64>]) -> Result<Self> {
        let p = phis.len();
        let m = phis
            .first()
            .map(|phi| phi.nrows())
            .ok_or_else(|| Error::InvalidParameter("no transition matrices".into()))?;
        if phis.iter().any(|phi| phi.shape() != (m, m)) {
            return Err(Error::DimensionMismatch(
                "transition matrices must share one square shape".into(),
            ));
        }
        let mut b = DMatrix::zeros(p * m, m);
        for (l, phi) in phis.iter().enumerate() {
            b.view_mut((l * m, 0), (m, m)).copy_from(&phi.transpose());
        }
        Ok(Self { order: p, b })
    }

    /// Extends the stack with zero blocks up to order `p`.
    pub fn padded_to(&self, p: usize) -> Result<Self> {
        if p < self.order {
            return Err(Error::InvalidParameter(format!(
                "cannot pad order {} down to {p}",
                self.order
            )));
        }
        let m = self.dim();
        let mut b = DMatrix::zeros(p * m, m);
        b.view_mut((0, 0), self.b.shape()).copy_from(&self.b);
        Ok(Self { order: p, b })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.b
    }

    /// `Phi_{lag+1}[(s, s_from)]`, with `lag` 0-based.
    pub fn get(&self, lag: usize, s: usize, s_from: usize) -> f64 {
        self.b[(lag * self.dim() + s_from, s)]
    }

    pub fn set(&mut self, lag: usize, s: usize, s_from: usize, value: f64) {
        let m = self.dim();
        self.b[(lag * m + s_from, s)] = value;
    }

    /// Transition matrix for 0-based `lag`.
    pub fn phi(&self, lag: usize) -> DMatrix<f64> {
        let m = self.dim();
        self.b.view((lag * m, 0), (m, m)).transpose()
    }

    /// Number of coefficients, `m^2 p`.
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn support_size(&self) -> usize {
        self.b.iter().filter(|v| **v != 0.0).count()
    }

    /// Visits every entry as `(lag, s, s_from, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let (p, m) = (self.order, self.dim());
        (0..p).flat_map(move |l| {
            (0..m).flat_map(move |s| (0..m).map(move |sf| (l, s, sf, self.get(l, s, sf))))
        })
    }

    pub fn same_shape(&self, other: &CoefficientStack) -> bool {
        self.order == other.order && self.b.shape() == other.b.shape()
    }
}

/// One-step prediction from `recent`, where `recent[l]` is the observation
/// `l + 1` steps before the predicted time.
pub fn predict_next(coeffs: &CoefficientStack, recent: &[DVector<f64>]) -> DVector<f64> {
    let (p, m) = (coeffs.order(), coeffs.dim());
    let b = coeffs.matrix();
    let mut out = DVector::zeros(m);
    for (l, x) in recent.iter().take(p).enumerate() {
        let block = b.view((l * m, 0), (m, m));
        out.gemv_tr(1.0, &block, x, 1.0);
    }
    out
}

/// Recursive plug-in forecasts for horizons `1..=h` from the end of `history`.
pub fn forecast(coeffs: &CoefficientStack, history: &Panel, h: usize) -> Result<Vec<DVector<f64>>> {
    forecast_from(coeffs, history.values(), history.len(), h)
}

/// Like [`forecast`] but conditions on the first `origin` rows of `values`.
pub fn forecast_from(
    coeffs: &CoefficientStack,
    values: &DMatrix<f64>,
    origin: usize,
    h: usize,
) -> Result<Vec<DVector<f64>>> {
    let p = coeffs.order();
    if values.ncols() != coeffs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "history has {} sites, coefficients {}",
            values.ncols(),
            coeffs.dim()
        )));
    }
    if origin < p || origin > values.nrows() {
        return Err(Error::InsufficientData(format!(
            "forecasting needs at least {p} rows of history, have {origin}"
        )));
    }
    if h == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let mut recent: Vec<DVector<f64>> =
        (0..p).map(|l| values.row(origin - 1 - l).transpose()).collect();
    let mut out = Vec::with_capacity(h);
    for _ in 0..h {
        let next = predict_next(coeffs, &recent);
        recent.rotate_right(1);
        recent[0] = next.clone();
        out.push(next);
    }
    Ok(out)
}

/// One-step-ahead forecasts of rows `start..end` of `values`, each conditioned
/// on the realised observations before it.
pub fn rolling_one_step(
    coeffs: &CoefficientStack,
    values: &DMatrix<f64>,
    start: usize,
    end: usize,
) -> Result<Vec<DVector<f64>>> {
    (start..end)
        .map(|t| forecast_from(coeffs, values, t, 1).map(|mut f| f.remove(0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn model(phis: Vec<DMatrix<f64>>) -> VarModel {
        let m = phis[0].nrows();
        VarModel::new(phis, DMatrix::identity(m, m)).unwrap()
    }

    #[test]
    fn companion_of_var1_is_the_transition_matrix() {
        let a = dmatrix![0.3, -0.1; 0.2, 0.4];
        assert_eq!(model(vec![a.clone()]).companion_matrix(), a);
    }

    #[test]
    fn companion_scalar_var2() {
        let c = model(vec![dmatrix![0.5], dmatrix![0.2]]).companion_matrix();
        assert_eq!(c, dmatrix![0.5, 0.2; 1.0, 0.0]);
    }

    #[test]
    fn spectral_radius_simple_cases() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.3]));
        assert!((spectral_radius(&d).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(spectral_radius(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        assert!(spectral_radius(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn stationarity_flags() {
        let m = 3;
        assert!(model(vec![DMatrix::identity(m, m) * 0.9]).is_stationary());
        assert!(!model(vec![DMatrix::identity(m, m)]).is_stationary());
        assert!(model(vec![dmatrix![0.5], dmatrix![0.49]]).is_stationary());
    }

    #[test]
    fn rejects_bad_sigma() {
        let phi = vec![DMatrix::zeros(2, 2)];
        assert!(matches!(
            VarModel::new(phi.clone(), DMatrix::zeros(2, 2)),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(VarModel::new(phi, dmatrix![1.0, 0.5; 0.4, 1.0]).is_err());
        assert!(VarModel::new(vec![DMatrix::zeros(3, 3)], DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn simulate_is_deterministic_and_refuses_unit_roots() {
        let mdl = model(vec![dmatrix![0.4, 0.1; 0.0, 0.3]]);
        let a = mdl.simulate(50, 20, 11).unwrap();
        let b = mdl.simulate(50, 20, 11).unwrap();
        assert_eq!(a.values().as_slice(), b.values().as_slice());
        assert_ne!(a, mdl.simulate(50, 20, 12).unwrap());
        let unit = model(vec![DMatrix::identity(2, 2)]);
        assert!(matches!(unit.simulate(10, 0, 1), Err(Error::NonStationary(_))));
    }

    #[test]
    fn white_noise_sample_covariance() {
        let m = 3;
        let mdl = model(vec![DMatrix::zeros(m, m)]);
        let panel = mdl.simulate(10_000, DEFAULT_BURN_IN, 5).unwrap();
        let x = panel.values();
        let n = x.nrows() as f64;
        let cov = x.transpose() * x / n;
        let err = (cov - DMatrix::<f64>::identity(m, m)).abs().max();
        assert!(err < 0.1, "max covariance error {err}");
    }

    #[test]
    fn design_layout_small_case() {
        // m = 2, p = 1, T = 3
        let panel = Panel::new(dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0]).unwrap();
        let reg = LaggedRegression::build(&panel, 1).unwrap();
        assert_eq!(reg.response(), &dmatrix![5.0, 6.0; 3.0, 4.0]);
        assert_eq!(reg.design(), &dmatrix![3.0, 4.0; 1.0, 2.0]);
        assert_eq!(reg.n_obs(), 2);
    }

    #[test]
    fn design_with_p_equal_t_minus_one_has_one_row() {
        let panel = Panel::new(DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64)).unwrap();
        let reg = LaggedRegression::build(&panel, 3).unwrap();
        assert_eq!(reg.n_obs(), 1);
        assert_eq!(reg.design().ncols(), 6);
        // most recent lag first
        assert_eq!(reg.design().row(0).iter().copied().collect::<Vec<_>>(), vec![4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
        assert!(LaggedRegression::build(&panel, 4).is_err());
    }

    #[test]
    fn coefficient_stack_round_trips_phis() {
        let phis = vec![dmatrix![1.0, 2.0; 3.0, 4.0], dmatrix![5.0, 6.0; 7.0, 8.0]];
        let stack = CoefficientStack::from_phis(&phis).unwrap();
        assert_eq!(stack.phi(0), phis[0]);
        assert_eq!(stack.phi(1), phis[1]);
        assert_eq!(stack.get(1, 0, 1), 6.0);
        assert_eq!(stack.len(), 8);
        assert_eq!(stack.entries().count(), 8);
    }

    #[test]
    fn zero_coefficients_forecast_zero() {
        let panel = Panel::new(DMatrix::from_element(5, 3, 2.0)).unwrap();
        let f = forecast(&CoefficientStack::zeros(2, 3), &panel, 4).unwrap();
        assert!(f.iter().all(|v| v.iter().all(|x| *x == 0.0)));
        assert!(forecast(&CoefficientStack::zeros(6, 3), &panel, 1).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let mdl = model(vec![dmatrix![0.1, 0.2; 0.3, 0.4], dmatrix![0.0, 0.1; 0.0, 0.0]]);
        let text = serde_json::to_string(&mdl).unwrap();
        let back: VarModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mdl);
    }
}
