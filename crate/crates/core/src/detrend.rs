//! Periodic detrending of sensor panels.
//!
//! Each site's series is modelled as `z_t = mu(d) + sigma(d) x_t`, where
//! `d` is the slot of `t` within the period, `mu` a smooth periodic trend and
//! `log sigma(d) = a + b log mu(d)`. The trend is a local linear Gaussian
//! kernel smoother over slots with circular distance, `sigma` is fitted by
//! least squares on the log scale from slot-wise residual standard
//! deviations, and outliers are excluded from both fits.
//!
//! Time indices are 1-based throughout: the first observation is `t = 1`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Panel;

/// Hours in a week.
pub const DEFAULT_PERIOD: usize = 168;
/// Zero values are outliers when their slot median exceeds this level.
pub const ZERO_RULE_MEDIAN: f64 = 30.0;
const IQR_FENCE: f64 = 1.5;
const SIGMA_FLOOR_FRACTION: f64 = 1e-6;
/// Neighborhood half-width, in bandwidths, that must contain data.
const NEIGHBORHOOD_BANDWIDTHS: f64 = 3.0;

/// 1-based slot of time `t` within `period`.
pub fn slot_index(t: usize, period: usize) -> usize {
    match t % period {
        0 => period,
        d => d,
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_series(series: &[f64], period: usize) -> Result<()> {
    if period == 0 {
        return Err(Error::InvalidParameter("period must be positive".into()));
    }
    if series.len() < period {
        return Err(Error::InsufficientData(format!(
            "series of length {} is shorter than the period {period}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("series".into()));
    }
    Ok(())
}

fn check_start(start_t: usize) -> Result<()> {
    if start_t == 0 {
        return Err(Error::InvalidParameter("time indices start at 1".into()));
    }
    Ok(())
}

/// Indices of the observations falling in each slot, slot `d` at `d - 1`.
fn slot_groups(len: usize, start_t: usize, period: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); period];
    for i in 0..len {
        groups[slot_index(start_t + i, period) - 1].push(i);
    }
    groups
}

/// Flags outliers slot by slot: zeros in a slot whose median exceeds 30,
/// and values outside the `1.5 IQR` fences of their slot. `series[0]` is
/// observed at time `start_t`.
pub fn outlier_screen(series: &[f64], start_t: usize, period: usize) -> Result<Vec<bool>> {
    check_series(series, period)?;
    check_start(start_t)?;
    let mut mask = vec![false; series.len()];
    for idx in slot_groups(series.len(), start_t, period) {
        let mut values: Vec<f64> = idx.iter().map(|&i| series[i]).collect();
        values.sort_by(f64::total_cmp);
        let median = quantile_sorted(&values, 0.5);
        let q1 = quantile_sorted(&values, 0.25);
        let q3 = quantile_sorted(&values, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - IQR_FENCE * iqr, q3 + IQR_FENCE * iqr);
        for &i in &idx {
            let z = series[i];
            if (median > ZERO_RULE_MEDIAN && z == 0.0) || z < lo || z > hi {
                mask[i] = true;
            }
        }
    }
    Ok(mask)
}

/// Signed offset from slot `from` to slot `to` on the circle, in
/// `(-period/2, period/2]`.
fn circular_offset(to: usize, from: usize, period: usize) -> f64 {
    let p = period as f64;
    let mut delta = (from as f64 - to as f64).rem_euclid(p);
    if delta > p / 2.0 {
        delta -= p;
    }
    delta
}

/// Rule-of-thumb bandwidth `1.06 sd n^(-1/5)` on the slot indices of the
/// retained observations.
pub fn default_bandwidth(mask: &[bool], start_t: usize, period: usize) -> Result<f64> {
    let slots: Vec<f64> = (0..mask.len())
        .filter(|&i| !mask[i])
        .map(|i| slot_index(start_t + i, period) as f64)
        .collect();
    let n = slots.len();
    if n < 2 {
        return Err(Error::InsufficientData("fewer than two retained observations".into()));
    }
    let mean = slots.iter().sum::<f64>() / n as f64;
    let sd = (slots.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let h = 1.06 * sd * (n as f64).powf(-0.2);
    if !(h > 0.0) {
        return Err(Error::Degenerate("all retained observations share one slot".into()));
    }
    Ok(h)
}

/// Local linear estimate of the trend at every slot. Masked observations are
/// ignored. Returns `mu[d - 1]` for slots `d = 1..=period`.
pub fn fit_trend(
    series: &[f64],
    mask: &[bool],
    start_t: usize,
    period: usize,
    bandwidth: f64,
) -> Result<Vec<f64>> {
    check_series(series, period)?;
    check_start(start_t)?;
    if mask.len() != series.len() {
        return Err(Error::DimensionMismatch("mask and series differ in length".into()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mut count = vec![0.0; period];
    let mut total = vec![0.0; period];
    for (i, z) in series.iter().enumerate() {
        if !mask[i] {
            let d = slot_index(start_t + i, period) - 1;
            count[d] += 1.0;
            total[d] += z;
        }
    }
    let reach = NEIGHBORHOOD_BANDWIDTHS * bandwidth;
    (1..=period)
        .map(|target| {
            let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut near = 0;
            for from in 1..=period {
                let n = count[from - 1];
                if n == 0.0 {
                    continue;
                }
                let delta = circular_offset(target, from, period);
                if delta.abs() <= reach {
                    near += 1;
                }
                let u = delta / bandwidth;
                let k = (-0.5 * u * u).exp();
                let kn = k * n;
                let kt = k * total[from - 1];
                s0 += kn;
                s1 += kn * delta;
                s2 += kn * delta * delta;
                t0 += kt;
                t1 += kt * delta;
            }
            let det = s0 * s2 - s1 * s1;
            if near < 2 || !(det > 0.0) {
                return Err(Error::InsufficientData(format!(
                    "slot {target} has fewer than two populated slots within {reach} slots"
                )));
            }
            Ok((s2 * t0 - s1 * t1) / det)
        })
        .collect()
}

/// Fitted log-linear link between slot trend and slot standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceLink {
    pub a: f64,
    pub b: f64,
    /// Sample standard deviation of the residuals in each slot (`NaN` when a
    /// slot has fewer than two retained observations).
    pub slot_sd: Vec<f64>,
    pub sigma_floor: f64,
}

/// Least-squares fit of `log sd = a + b log mu` over slots with `mu > 0` and
/// `sd >= floor`. Falls back to `b = 0`, `a = log(mean sd)` when the slot
/// trends do not vary.
pub fn variance_link_from_slots(mu: &[f64], sd: &[f64], floor: f64) -> Result<(f64, f64)> {
    if mu.len() != sd.len() {
        return Err(Error::DimensionMismatch("trend and slot SD differ in length".into()));
    }
    let usable: Vec<(f64, f64)> = mu
        .iter()
        .zip(sd)
        .filter(|(m, s)| **m > 0.0 && s.is_finite() && **s >= floor && **s > 0.0)
        .map(|(m, s)| (m.ln(), s.ln()))
        .collect();
    let positive: Vec<f64> = sd.iter().copied().filter(|s| s.is_finite() && *s > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Degenerate("no slot has a positive standard deviation".into()));
    }
    let fallback = || (positive.iter().sum::<f64>() / positive.len() as f64).ln();
    if usable.len() < 2 {
        return Ok((fallback(), 0.0));
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|u| u.0).sum::<f64>() / n;
    let my = usable.iter().map(|u| u.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|u| (u.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|u| (u.0 - mx) * (u.1 - my)).sum();
    if sxx <= 1e-12 * n {
        return Ok((fallback(), 0.0));
    }
    let b = sxy / sxx;
    Ok((my - b * mx, b))
}

/// Slot standard deviations of `series - mu(slot)` over unmasked points and
/// the fitted link.
pub fn fit_variance_link(
    mu: &[f64],
    series: &[f64],
    mask: &[bool],
    start_t: usize,
    period: usize,
) -> Result<VarianceLink> {
    check_series(series, period)?;
    check_start(start_t)?;
    if mu.len() != period || mask.len() != series.len() {
        return Err(Error::DimensionMismatch("trend, mask and series are inconsistent".into()));
    }
    let slot_sd: Vec<f64> = slot_groups(series.len(), start_t, period)
        .iter()
        .enumerate()
        .map(|(d, idx)| {
            let resid: Vec<f64> =
                idx.iter().filter(|&&i| !mask[i]).map(|&i| series[i] - mu[d]).collect();
            if resid.len() < 2 {
                return f64::NAN;
            }
            let n = resid.len() as f64;
            let mean = resid.iter().sum::<f64>() / n;
            (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let max_sd = slot_sd.iter().copied().filter(|s| s.is_finite()).fold(0.0, f64::max);
    let sigma_floor = SIGMA_FLOOR_FRACTION * max_sd;
    let (a, b) = variance_link_from_slots(mu, &slot_sd, sigma_floor)?;
    Ok(VarianceLink { a, b, slot_sd, sigma_floor })
}

/// Fitted periodic trend and variance link of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendModel {
    pub period: usize,
    /// Trend at slots `1..=period`.
    pub mu: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub sigma_floor: f64,
}

impl TrendModel {
    pub fn new(mu: Vec<f64>, a: f64, b: f64, sigma_floor: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidParameter("trend must have at least one slot".into()));
        }
        if mu.iter().any(|v| !v.is_finite()) || !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("trend model".into()));
        }
        if !(sigma_floor > 0.0) {
            return Err(Error::InvalidParameter("sigma floor must be positive".into()));
        }
        Ok(Self { period: mu.len(), mu, a, b, sigma_floor })
    }

    pub fn trend(&self, slot: usize) -> f64 {
        self.mu[slot - 1]
    }

    /// Link scale at `slot` before flooring.
    pub fn raw_sigma(&self, slot: usize) -> f64 {
        let mu = self.trend(slot);
        if mu > 0.0 {
            (self.a + self.b * mu.ln()).exp()
        } else if self.b == 0.0 {
            self.a.exp()
        } else {
            0.0
        }
    }

    /// Scale at `slot` and whether the floor was applied.
    pub fn sigma(&self, slot: usize) -> (f64, bool) {
        let raw = self.raw_sigma(slot);
        if raw >= self.sigma_floor {
            (raw, false)
        } else {
            (self.sigma_floor, true)
        }
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if slot == 0 || slot > self.period {
            return Err(Error::InvalidParameter(format!("slot {slot} outside 1..={}", self.period)));
        }
        Ok(())
    }
}

/// A fitted site: the model plus diagnostics of the fit.
#[derive(Debug, Clone)]
pub struct SiteDetrend {
    pub model: TrendModel,
    pub outliers: Vec<bool>,
    pub slot_sd: Vec<f64>,
    pub bandwidth: f64,
}

/// Screens outliers, fits the trend and the variance link for one series.
pub fn fit_site(series: &[f64], start_t: usize, period: usize, bandwidth: Option<f64>) -> Result<SiteDetrend> {
    let outliers = outlier_screen(series, start_t, period)?;
    let bandwidth = match bandwidth {
        Some(h) => h,
        None => default_bandwidth(&outliers, start_t, period)?,
    };
    let mu = fit_trend(series, &outliers, start_t, period, bandwidth)?;
    let link = fit_variance_link(&mu, series, &outliers, start_t, period)?;
    let floor = if link.sigma_floor > 0.0 { link.sigma_floor } else { f64::MIN_POSITIVE };
    let model = TrendModel::new(mu, link.a, link.b, floor)?;
    Ok(SiteDetrend { model, outliers, slot_sd: link.slot_sd, bandwidth })
}

/// Standardized series `(z - mu) / sigma` for times `start_t, start_t + 1, ...`
/// and the positions where the scale was floored.
pub fn standardize(series: &[f64], model: &TrendModel, start_t: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    check_start(start_t)?;
    let mut floored = vec![false; series.len()];
    let x = series
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let d = slot_index(start_t + i, model.period);
            let (sigma, hit) = model.sigma(d);
            floored[i] = hit;
            (z - model.trend(d)) / sigma
        })
        .collect();
    Ok((x, floored))
}

/// Maps standardized values back to the data scale, `mu + sigma x`, with
/// `slots[i]` the slot of `x[i]`.
pub fn reconstruct(x: &[f64], model: &TrendModel, slots: &[usize]) -> Result<Vec<f64>> {
    if x.len() != slots.len() {
        return Err(Error::DimensionMismatch(format!("{} values for {} slots", x.len(), slots.len())));
    }
    x.iter()
        .zip(slots)
        .map(|(v, &d)| {
            model.check_slot(d)?;
            Ok(model.trend(d) + model.sigma(d).0 * v)
        })
        .collect()
}

/// Slots of the times `start_t..start_t + len`.
pub fn slots_for(start_t: usize, len: usize, period: usize) -> Vec<usize> {
    (start_t..start_t + len).map(|t| slot_index(t, period)).collect()
}

/// Inclusive slot ranges; a range with `start > end` wraps around the period.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotFilter {
    pub ranges: Vec<[usize; 2]>,
}

impl SlotFilter {
    pub fn contains(&self, slot: usize) -> bool {
        self.ranges.is_empty()
            || self.ranges.iter().any(|&[lo, hi]| {
                if lo <= hi {
                    (lo..=hi).contains(&slot)
                } else {
                    slot >= lo || slot <= hi
                }
            })
    }

    /// Row indices (0-based) whose slot passes the filter, for rows holding
    /// times `start_t..`.
    pub fn rows(&self, len: usize, start_t: usize, period: usize) -> Vec<usize> {
        (0..len).filter(|&i| self.contains(slot_index(start_t + i, period))).collect()
    }
}

/// Per-site models and the standardized panel.
#[derive(Debug, Clone)]
pub struct PanelDetrend {
    pub standardized: Panel,
    pub sites: Vec<SiteDetrend>,
    pub floored: usize,
}

/// Fits every site independently and standardizes the panel, whose first
/// row is observed at `start_t`.
pub fn detrend_panel(panel: &Panel, start_t: usize, period: usize, bandwidth: Option<f64>) -> Result<PanelDetrend> {
    let values = panel.values();
    let sites: Vec<SiteDetrend> = (0..panel.dim())
        .into_par_iter()
        .map(|s| {
            let series: Vec<f64> = values.column(s).iter().copied().collect();
            fit_site(&series, start_t, period, bandwidth)
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(panel.len(), panel.dim());
    let mut floored = 0;
    for (s, site) in sites.iter().enumerate() {
        let series: Vec<f64> = values.column(s).iter().copied().collect();
        let (x, hit) = standardize(&series, &site.model, start_t)?;
        floored += hit.iter().filter(|h| **h).count();
        out.column_mut(s).copy_from_slice(&x);
    }
    let standardized = Panel::with_ids(out, panel.site_ids().to_vec())?;
    Ok(PanelDetrend { standardized, sites, floored })
}

/// Rows of `panel` whose slot passes `filter`, concatenated in time order.
pub fn filter_panel(panel: &Panel, filter: &SlotFilter, start_t: usize, period: usize) -> Result<Panel> {
    let rows = filter.rows(panel.len(), start_t, period);
    if rows.is_empty() {
        return Err(Error::InsufficientData("slot filter removes every row".into()));
    }
    let values = panel.values();
    let out = DMatrix::from_fn(rows.len(), panel.dim(), |r, c| values[(rows[r], c)]);
    Panel::with_ids(out, panel.site_ids().to_vec())
}
