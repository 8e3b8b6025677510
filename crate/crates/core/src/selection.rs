//! Forward cross-validation over lag order, weight constant and penalty level.
//!
//! Coefficients are estimated once per candidate on the training rows and
//! then used, unchanged, for one-step forecasts across the validation rows.
//! Each forecast conditions on the realised observations before it.

use std::cmp::Ordering;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rolling_one_step, CoefficientStack, LaggedRegression, Panel};
use crate::solver::{self, ColumnFit, FitResult, SolverOptions};
use crate::weights::{weight_tensor, SiteGeometry, WeightKind, WeightSpec};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvPlan {
    /// Number of training rows; `floor(0.6 T)` when unset.
    pub train_end: Option<usize>,
    pub p_candidates: Vec<usize>,
    pub c_candidates: Vec<f64>,
    pub lambda_count: usize,
    pub lambda_ratio: f64,
    pub kind: WeightKind,
    #[serde(skip)]
    pub solver: SolverOptions,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            train_end: None,
            p_candidates: vec![1, 2, 3, 4],
            c_candidates: vec![0.5, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            lambda_count: solver::DEFAULT_GRID_COUNT,
            lambda_ratio: solver::DEFAULT_GRID_RATIO,
            kind: WeightKind::ExpLagDist,
            solver: SolverOptions::default(),
        }
    }
}

impl CvPlan {
    /// Training rows used for a panel of `t_len` rows.
    pub fn train_rows(&self, t_len: usize) -> usize {
        self.train_end
            .unwrap_or_else(|| (DEFAULT_TRAIN_FRACTION * t_len as f64).floor() as usize)
    }

    fn validate(&self, t_len: usize) -> Result<usize> {
        if self.p_candidates.is_empty() || self.c_candidates.is_empty() {
            return Err(Error::InvalidParameter("candidate sets must be nonempty".into()));
        }
        if self.p_candidates.contains(&0) {
            return Err(Error::InvalidParameter("lag order candidates must be >= 1".into()));
        }
        if let Some(c) = self.c_candidates.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidParameter(format!("weight constant {c} must be finite and >= 0")));
        }
        if self.lambda_count < 2 {
            return Err(Error::InvalidParameter("lambda_count must be at least 2".into()));
        }
        let t0 = self.train_rows(t_len);
        let p_max = *self.p_candidates.iter().max().unwrap_or(&1);
        if t0 < p_max + 1 {
            return Err(Error::InsufficientData(format!(
                "training window of {t0} rows is too short for lag order {p_max}"
            )));
        }
        if t_len < t0 + 1 {
            return Err(Error::InsufficientData(format!(
                "panel of {t_len} rows leaves no validation rows after {t0} training rows"
            )));
        }
        Ok(t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub p: usize,
    pub c: f64,
    pub lambda: f64,
    pub rmsfe: f64,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub table: Vec<CvRow>,
    pub selected: CvRow,
    pub train_rows: usize,
    /// Fit on the full panel at the selected triple.
    pub fit: FitResult,
    pub warnings: Vec<String>,
}

/// Root mean squared forecast error, averaging squared errors over sites and
/// steps.
pub fn rmsfe(forecasts: &[DVector<f64>], actuals: &[DVector<f64>]) -> Result<f64> {
    if forecasts.len() != actuals.len() || forecasts.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} forecasts for {} actuals",
            forecasts.len(),
            actuals.len()
        )));
    }
    let m = forecasts[0].len();
    let mut total = 0.0;
    for (f, a) in forecasts.iter().zip(actuals) {
        if f.len() != m || a.len() != m {
            return Err(Error::DimensionMismatch("forecast vectors differ in length".into()));
        }
        total += (f - a).norm_squared() / m as f64;
    }
    Ok((total / forecasts.len() as f64).sqrt())
}

struct Candidate {
    rows: Vec<CvRow>,
    warning: Option<String>,
}

fn evaluate_candidate(
    panel: &Panel,
    geometry: &SiteGeometry,
    plan: &CvPlan,
    t0: usize,
    p: usize,
    c: f64,
) -> Result<Candidate> {
    let values = panel.values();
    let reg = LaggedRegression::build(&panel.slice(0, t0), p)?;
    let weights = weight_tensor(&WeightSpec::new(plan.kind, c)?, geometry, p)?;
    let lmax = match solver::lambda_max(&reg, &weights) {
        Ok(v) => v,
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let t_len = values.nrows();
    let actual: Vec<DVector<f64>> = (t0..t_len).map(|t| values.row(t).transpose()).collect();

    if lmax == 0.0 {
        let zero = vec![DVector::zeros(panel.dim()); actual.len()];
        let rmsfe = rmsfe(&zero, &actual)?;
        let rows = (0..plan.lambda_count).map(|_| CvRow { p, c, lambda: 0.0, rmsfe }).collect();
        let warning = format!("lambda_max is zero for p={p}, c={c}; every candidate fit is zero");
        return Ok(Candidate { rows, warning: Some(warning) });
    }

    let grid = solver::lambda_grid(lmax, plan.lambda_count, plan.lambda_ratio)?;
    let path = solver::fit_path(&reg, &weights, &grid, &plan.solver)?;
    let rows = path
        .iter()
        .map(|f| {
            let pred = rolling_one_step(&f.coeffs, values, t0, t_len)?;
            Ok(CvRow { p, c, lambda: f.lambda, rmsfe: rmsfe(&pred, &actual)? })
        })
        .collect::<Result<_>>()?;
    Ok(Candidate { rows, warning: None })
}

/// Orders rows by forecast error, preferring larger lambda, then smaller p,
/// then smaller c on ties.
fn preference(a: &CvRow, b: &CvRow) -> Ordering {
    let by_error = match (a.rmsfe.is_nan(), b.rmsfe.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => a.rmsfe.total_cmp(&b.rmsfe),
    };
    by_error
        .then_with(|| b.lambda.total_cmp(&a.lambda))
        .then_with(|| a.p.cmp(&b.p))
        .then_with(|| a.c.total_cmp(&b.c))
}

/// Picks the preferred row of a CV table.
pub fn select(table: &[CvRow]) -> Option<CvRow> {
    table.iter().copied().min_by(preference)
}

pub fn forward_cv(panel: &Panel, geometry: &SiteGeometry, plan: &CvPlan) -> Result<CvResult> {
    if geometry.len() != panel.dim() {
        return Err(Error::DimensionMismatch(format!(
            "geometry has {} sites, panel {}",
            geometry.len(),
            panel.dim()
        )));
    }
    let t0 = plan.validate(panel.len())?;
    let pairs: Vec<(usize, f64)> = plan
        .p_candidates
        .iter()
        .flat_map(|&p| plan.c_candidates.iter().map(move |&c| (p, c)))
        .collect();

    let candidates: Vec<Candidate> = pairs
        .par_iter()
        .map(|&(p, c)| evaluate_candidate(panel, geometry, plan, t0, p, c))
        .collect::<Result<_>>()?;

    let mut table = Vec::with_capacity(pairs.len() * plan.lambda_count);
    let mut warnings = Vec::new();
    for cand in candidates {
        table.extend(cand.rows);
        if let Some(w) = cand.warning {
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let selected = select(&table).ok_or_else(|| Error::Degenerate("empty CV table".into()))?;

    let reg = LaggedRegression::build(panel, selected.p)?;
    let fit = if selected.lambda == 0.0 && warnings.len() == pairs.len() {
        zero_fit(&reg)
    } else {
        let weights = weight_tensor(&WeightSpec::new(plan.kind, selected.c)?, geometry, selected.p)?;
        solver::fit(&reg, &weights, selected.lambda, None, &plan.solver)?
    };
    Ok(CvResult { table, selected, train_rows: t0, fit, warnings })
}

fn zero_fit(reg: &LaggedRegression) -> FitResult {
    let m = reg.dim();
    let columns = (0..m)
        .map(|i| ColumnFit {
            iterations: 0,
            converged: true,
            kkt_residual: 0.0,
            objective: reg.response().column(i).norm_squared() / reg.n_obs() as f64,
            objective_trace: Vec::new(),
        })
        .collect::<Vec<_>>();
    FitResult {
        coeffs: CoefficientStack::zeros(reg.order(), m),
        lambda: 0.0,
        objective: columns.iter().map(|c| c.objective).sum(),
        columns,
    }
}
