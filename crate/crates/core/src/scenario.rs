//! Simulation scenarios on a jittered lattice and the Monte-Carlo study
//! runner comparing weighted and unweighted estimators.
//!
//! A lattice of 21 x 21 vertices with spacing 0.05 is jittered per row and
//! per column. Sites are drawn from it, either uniformly (setting 1) or from
//! the lower-left and upper-right quadrants (setting 2). Transition matrix
//! magnitudes depend on the pairwise distance `d` and the lag `l`:
//!
//! | order | scenario | lag `l` magnitude                                        |
//! |-------|----------|----------------------------------------------------------|
//! | 1     | a        | `U(0.1, 0.5)` if `d <= d0` (0.05, or 0.06 in setting 2)  |
//! | 1     | b        | `0.55 exp(-20 d)`                                        |
//! | 1     | c        | `0.25 exp(-5 d)`                                         |
//! | 2     | a        | `U(0.1, 0.6)` if `d <= 0.06`; `U(0.1, 0.4)` if `d <= 0.04` |
//! | 2     | b        | `0.5 exp(-20 d)`; `0.3 exp(-80 d)`                       |
//! | 2     | c        | `0.3 exp(-5 d)`; `0.15 exp(-20 d)`                       |
//! | 3     | a        | `U(0.15, 0.6 - 0.1 l)` if `d <= 0.07 - 0.01 l`           |
//! | 3     | b        | `0.3 exp(-25 l d)`                                       |
//! | 3     | c        | `0.25 exp(-10 l d)`                                      |
//!
//! Every coefficient gets an independent random sign. Draws are repeated
//! until the companion matrix is stable.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{estimation_errors, support_metrics};
use crate::model::{forecast_from, CoefficientStack, VarModel, DEFAULT_BURN_IN};
use crate::rng::{derive_seed, rng_from_seed, StdRng};
use crate::selection::{forward_cv, rmsfe, CvPlan};
use crate::solver::{SolverOptions, DEFAULT_GRID_COUNT, DEFAULT_GRID_RATIO};
use crate::weights::{pairwise_distances, SiteGeometry, WeightKind};

pub const LATTICE_SIDE: usize = 21;
pub const LATTICE_SPACING: f64 = 0.05;
pub const LATTICE_JITTER: f64 = 0.01;
pub const DEFAULT_REJECTION_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sparsity {
    /// Exactly sparse: uniform magnitudes within a distance cutoff.
    A,
    /// Weakly sparse with fast distance decay.
    B,
    /// Weakly sparse with slow distance decay.
    C,
}

impl fmt::Display for Sparsity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sparsity::A => "a",
            Sparsity::B => "b",
            Sparsity::C => "c",
        })
    }
}

impl std::str::FromStr for Sparsity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Sparsity::A),
            "b" => Ok(Sparsity::B),
            "c" => Ok(Sparsity::C),
            _ => Err(Error::InvalidParameter(format!("unknown scenario '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub order: usize,
    pub setting: u8,
    pub scenario: Sparsity,
    pub m: usize,
    /// Innovation variance; the covariance is `sigma_scale * I`.
    pub sigma_scale: f64,
    pub seed: u64,
    /// Half-width of the uniform lattice jitter.
    pub jitter: f64,
    pub rejection_budget: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            order: 1,
            setting: 1,
            scenario: Sparsity::A,
            m: 30,
            sigma_scale: 0.01,
            seed: 1,
            jitter: LATTICE_JITTER,
            rejection_budget: DEFAULT_REJECTION_BUDGET,
        }
    }
}

impl ScenarioSpec {
    /// Site count used at full scale: 60 for order 3, 100 otherwise.
    pub fn full_scale_sites(order: usize) -> usize {
        if order == 3 {
            60
        } else {
            100
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::InvalidParameter(format!("order must be 1, 2 or 3, got {}", self.order)));
        }
        match (self.order, self.setting) {
            (_, 1) | (1, 2) => {}
            (o, s) => {
                return Err(Error::InvalidParameter(format!("setting {s} is not defined for order {o}")))
            }
        }
        if self.m == 0 || self.m > LATTICE_SIDE * LATTICE_SIDE {
            return Err(Error::InvalidParameter(format!("site count {} exceeds the lattice", self.m)));
        }
        if !(self.sigma_scale > 0.0) || !self.sigma_scale.is_finite() {
            return Err(Error::InvalidParameter("sigma_scale must be positive".into()));
        }
        if !(0.0..LATTICE_SPACING / 2.0).contains(&self.jitter) {
            return Err(Error::InvalidParameter(format!("jitter {} out of range", self.jitter)));
        }
        if self.rejection_budget == 0 {
            return Err(Error::InvalidParameter("rejection budget must be positive".into()));
        }
        Ok(())
    }
}

fn lattice_from_rng(rng: &mut StdRng, jitter: f64) -> Vec<[f64; 2]> {
    let offsets = |rng: &mut StdRng| -> Vec<f64> {
        (1..=LATTICE_SIDE)
            .map(|i| {
                let delta = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
                LATTICE_SPACING * i as f64 + delta
            })
            .collect()
    };
    let xs = offsets(rng);
    let ys = offsets(rng);
    xs.iter().flat_map(|&x| ys.iter().map(move |&y| [x, y])).collect()
}

/// The 441 jittered lattice vertices, `x` varying slowest.
pub fn make_lattice(seed: u64, jitter: f64) -> Vec<[f64; 2]> {
    lattice_from_rng(&mut rng_from_seed(seed), jitter)
}

/// Lattice vertices eligible for the given setting.
pub fn eligible_vertices(lattice: &[[f64; 2]], setting: u8) -> Vec<usize> {
    (0..lattice.len())
        .filter(|&i| {
            let [x, y] = lattice[i];
            setting != 2 || (x < 0.5 && y < 0.5) || (x > 0.5 && y > 0.5)
        })
        .collect()
}

/// Magnitude of the lag-`lag` (1-based) coefficient between sites at
/// distance `d`; `uniform` supplies a draw when the scenario needs one.
fn magnitude(spec: &ScenarioSpec, lag: usize, d: f64, uniform: &mut impl FnMut(f64, f64) -> f64) -> f64 {
    let l = lag as f64;
    match (spec.order, spec.scenario) {
        (1, Sparsity::A) => {
            let d0 = if spec.setting == 2 { 0.06 } else { 0.05 };
            let v = uniform(0.1, 0.5);
            if d <= d0 { v } else { 0.0 }
        }
        (1, Sparsity::B) => 0.55 / (20.0 * d).exp(),
        (1, Sparsity::C) => 0.25 / (5.0 * d).exp(),
        (2, Sparsity::A) => {
            let (hi, d0) = if lag == 1 { (0.6, 0.06) } else { (0.4, 0.04) };
            let v = uniform(0.1, hi);
            if d <= d0 { v } else { 0.0 }
        }
        (2, Sparsity::B) => if lag == 1 { 0.5 / (20.0 * d).exp() } else { 0.3 / (80.0 * d).exp() },
        (2, Sparsity::C) => if lag == 1 { 0.3 / (5.0 * d).exp() } else { 0.15 / (20.0 * d).exp() },
        (_, Sparsity::A) => {
            let v = uniform(0.15, 0.6 - 0.1 * l);
            if d <= 0.07 - 0.01 * l { v } else { 0.0 }
        }
        (_, Sparsity::B) => 0.3 / (25.0 * l * d).exp(),
        (_, Sparsity::C) => 0.25 / (10.0 * l * d).exp(),
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioTruth {
    pub geometry: SiteGeometry,
    pub model: VarModel,
    /// Lattice index of each site.
    pub vertices: Vec<usize>,
    /// Number of draws needed to obtain a stable model.
    pub attempts: usize,
}

pub fn generate_truth(spec: &ScenarioSpec) -> Result<ScenarioTruth> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let lattice = lattice_from_rng(&mut rng, spec.jitter);
    let eligible = eligible_vertices(&lattice, spec.setting);
    if spec.m > eligible.len() {
        return Err(Error::InvalidParameter(format!(
            "{} sites requested but only {} vertices are eligible",
            spec.m,
            eligible.len()
        )));
    }
    let mut vertices: Vec<usize> =
        sample(&mut rng, eligible.len(), spec.m).into_iter().map(|i| eligible[i]).collect();
    vertices.sort_unstable();
    let coords: Vec<[f64; 2]> = vertices.iter().map(|&i| lattice[i]).collect();
    let ids = vertices.iter().map(|i| format!("v{i}")).collect();
    let geometry = SiteGeometry::from_coords(ids, coords.clone())?;
    let dist = pairwise_distances(&coords)?;
    let sigma = DMatrix::identity(spec.m, spec.m) * spec.sigma_scale;

    for attempt in 1..=spec.rejection_budget {
        let phis = draw_transitions(spec, &dist, &mut rng);
        let model = VarModel::new(phis, sigma.clone())?;
        if model.is_stationary() {
            return Ok(ScenarioTruth { geometry, model, vertices, attempts: attempt });
        }
    }
    Err(Error::RejectionBudgetExhausted(spec.rejection_budget))
}

fn draw_transitions(spec: &ScenarioSpec, dist: &DMatrix<f64>, rng: &mut StdRng) -> Vec<DMatrix<f64>> {
    let m = spec.m;
    (1..=spec.order)
        .map(|lag| {
            let mut phi = DMatrix::zeros(m, m);
            for s in 0..m {
                for sf in 0..m {
                    let mag = magnitude(spec, lag, dist[(s, sf)], &mut |lo, hi| rng.random_range(lo..hi));
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    phi[(s, sf)] = sign * mag;
                }
            }
            phi
        })
        .collect()
}

/// One estimator of the study: a weight kind with its constant candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub name: String,
    pub kind: WeightKind,
    pub c_candidates: Vec<f64>,
}

impl EstimatorConfig {
    /// Unweighted lasso: a zero constant makes every weight one.
    pub fn lasso() -> Self {
        Self { name: "LASSO".into(), kind: WeightKind::ExpLagDist, c_candidates: vec![0.0] }
    }

    pub fn wlasso(name: &str, kind: WeightKind) -> Self {
        Self { name: name.into(), kind, c_candidates: CvPlan::default().c_candidates }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: ScenarioSpec,
    pub replicates: usize,
    pub t_len: usize,
    pub train: usize,
    pub validation: usize,
    pub horizons: usize,
    pub burn_in: usize,
    pub p_candidates: Vec<usize>,
    pub lambda_count: usize,
    pub lambda_ratio: f64,
    /// Name of the estimator all ratios are taken against.
    pub baseline: String,
    pub estimators: Vec<EstimatorConfig>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            replicates: 20,
            t_len: 150,
            train: 40,
            validation: 30,
            horizons: 5,
            burn_in: DEFAULT_BURN_IN,
            p_candidates: vec![1, 2, 3, 4],
            lambda_count: DEFAULT_GRID_COUNT,
            lambda_ratio: DEFAULT_GRID_RATIO,
            baseline: "LASSO".into(),
            estimators: vec![
                EstimatorConfig::lasso(),
                EstimatorConfig::wlasso("WLASSO1", WeightKind::ExpLagDist),
                EstimatorConfig::wlasso("WLASSO2", WeightKind::PowerLagDist),
            ],
        }
    }
}

impl StudyConfig {
    fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("at least one replicate is required".into()));
        }
        if self.horizons == 0 {
            return Err(Error::InvalidParameter("at least one horizon is required".into()));
        }
        let fit_rows = self.train + self.validation;
        if self.t_len < fit_rows + self.horizons {
            return Err(Error::InvalidParameter(format!(
                "t_len {} leaves no test rows after {fit_rows} rows and {} horizons",
                self.t_len, self.horizons
            )));
        }
        if !self.estimators.iter().any(|e| e.name == self.baseline) {
            return Err(Error::InvalidParameter(format!("baseline '{}' is not an estimator", self.baseline)));
        }
        let mut names: Vec<&str> = self.estimators.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("estimator names must be unique".into()));
        }
        Ok(())
    }

    fn plan(&self, est: &EstimatorConfig, solver: SolverOptions) -> CvPlan {
        CvPlan {
            train_end: Some(self.train),
            p_candidates: self.p_candidates.clone(),
            c_candidates: est.c_candidates.clone(),
            lambda_count: self.lambda_count,
            lambda_ratio: self.lambda_ratio,
            kind: est.kind,
            solver,
        }
    }
}

/// Metrics of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    /// 1-based replicate id.
    pub replicate: usize,
    pub estimator: String,
    pub p: usize,
    pub c: f64,
    pub lambda: f64,
    pub l1: f64,
    pub l2: f64,
    pub pfz: f64,
    pub pfnz: f64,
    /// Test-set RMSFE for horizons `1..=H`.
    pub rmsfe: Vec<f64>,
}

/// Ratios of an estimator's metrics to the baseline on the same replicate.
/// A ratio with zero baseline is `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub replicate: usize,
    pub estimator: String,
    pub l1: f64,
    pub l2: f64,
    pub pfz: f64,
    pub pfnz: f64,
    pub rmsfe: Vec<f64>,
}

impl RatioRow {
    /// `(metric name, value)` pairs in table order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("l1".to_string(), self.l1),
            ("l2".to_string(), self.l2),
            ("pfz".to_string(), self.pfz),
            ("pfnz".to_string(), self.pfnz),
        ];
        out.extend(self.rmsfe.iter().enumerate().map(|(h, v)| (format!("rmsfe_h{}", h + 1), *v)));
        out
    }
}

/// Mean ratio of one metric over replicates with a defined ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub metric: String,
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub n: usize,
    /// Replicates whose baseline value was zero.
    pub undefined: usize,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub truth: ScenarioTruth,
    pub metrics: Vec<ReplicateMetrics>,
    pub ratios: Vec<RatioRow>,
    pub summary: Vec<SummaryRow>,
}

fn ratio(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        f64::NAN
    } else {
        value / base
    }
}

/// h-step RMSFE over forecast origins `start..=t_len - h`, with coefficients
/// held fixed.
pub fn test_rmsfe(
    coeffs: &CoefficientStack,
    values: &DMatrix<f64>,
    start: usize,
    horizons: usize,
) -> Result<Vec<f64>> {
    let t_len = values.nrows();
    (1..=horizons)
        .map(|h| {
            let mut forecasts = Vec::new();
            let mut actuals: Vec<DVector<f64>> = Vec::new();
            for origin in start..=t_len - h {
                let path = forecast_from(coeffs, values, origin, h)?;
                forecasts.push(path[h - 1].clone());
                actuals.push(values.row(origin + h - 1).transpose());
            }
            rmsfe(&forecasts, &actuals)
        })
        .collect()
}

fn run_replicate(
    config: &StudyConfig,
    truth: &ScenarioTruth,
    solver: SolverOptions,
    replicate: usize,
) -> Result<Vec<ReplicateMetrics>> {
    let seed = derive_seed(config.scenario.seed, replicate as u64);
    let panel = truth.model.simulate(config.t_len, config.burn_in, seed)?;
    let fit_rows = config.train + config.validation;
    let fit_panel = panel.slice(0, fit_rows);
    let true_coeffs = truth.model.coefficients();

    config
        .estimators
        .iter()
        .map(|est| {
            let cv = forward_cv(&fit_panel, &truth.geometry, &config.plan(est, solver))?;
            let coeffs = &cv.fit.coeffs;
            let p = coeffs.order().max(true_coeffs.order());
            let (est_p, truth_p) = (coeffs.padded_to(p)?, true_coeffs.padded_to(p)?);
            let errors = estimation_errors(&est_p, &truth_p)?;
            let support = support_metrics(&est_p, &truth_p)?;
            let rmsfe = test_rmsfe(coeffs, panel.values(), fit_rows, config.horizons)?;
            Ok(ReplicateMetrics {
                replicate: replicate + 1,
                estimator: est.name.clone(),
                p: cv.selected.p,
                c: cv.selected.c,
                lambda: cv.selected.lambda,
                l1: errors.l1,
                l2: errors.l2,
                pfz: support.pfz,
                pfnz: support.pfnz,
                rmsfe,
            })
        })
        .collect()
}

/// Ratio rows of every estimator against the baseline, per replicate.
pub fn ratio_table(metrics: &[ReplicateMetrics], baseline: &str) -> Vec<RatioRow> {
    metrics
        .iter()
        .filter_map(|row| {
            let base = metrics.iter().find(|b| b.replicate == row.replicate && b.estimator == baseline)?;
            Some(RatioRow {
                replicate: row.replicate,
                estimator: row.estimator.clone(),
                l1: ratio(row.l1, base.l1),
                l2: ratio(row.l2, base.l2),
                pfz: ratio(row.pfz, base.pfz),
                pfnz: ratio(row.pfnz, base.pfnz),
                rmsfe: row.rmsfe.iter().zip(&base.rmsfe).map(|(v, b)| ratio(*v, *b)).collect(),
            })
        })
        .collect()
}

/// Mean and standard error of each ratio per estimator, skipping undefined
/// ratios.
pub fn summarize(ratios: &[RatioRow], estimators: &[String]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for name in estimators {
        let rows: Vec<&RatioRow> = ratios.iter().filter(|r| &r.estimator == name).collect();
        let Some(first) = rows.first() else { continue };
        for (k, (metric, _)) in first.metrics().into_iter().enumerate() {
            let values: Vec<f64> = rows.iter().map(|r| r.metrics()[k].1).collect();
            let defined: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
            let n = defined.len();
            let mean = if n == 0 { f64::NAN } else { defined.iter().sum::<f64>() / n as f64 };
            let se = if n < 2 {
                f64::NAN
            } else {
                let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            };
            out.push(SummaryRow {
                estimator: name.clone(),
                metric,
                mean,
                se,
                n,
                undefined: values.len() - n,
            });
        }
    }
    out
}

pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    run_study_with(config, SolverOptions::default())
}

pub fn run_study_with(config: &StudyConfig, solver: SolverOptions) -> Result<StudyResult> {
    config.validate()?;
    let truth = generate_truth(&config.scenario)?;
    let per_replicate: Vec<Vec<ReplicateMetrics>> = (0..config.replicates)
        .into_par_iter()
        .map(|k| run_replicate(config, &truth, solver, k))
        .collect::<Result<_>>()?;
    let metrics: Vec<ReplicateMetrics> = per_replicate.into_iter().flatten().collect();
    let ratios = ratio_table(&metrics, &config.baseline);
    let names: Vec<String> = config.estimators.iter().map(|e| e.name.clone()).collect();
    let summary = summarize(&ratios, &names);
    Ok(StudyResult { truth, metrics, ratios, summary })
}
