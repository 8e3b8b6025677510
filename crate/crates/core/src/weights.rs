//! Site geometry and the spatio-temporal penalty weight tensor.
//!
//! Weights grow with the distance between the responding site and the
//! predicting site and, for the lag-aware kinds, with the lag. With `d` the
//! distance, `D` the maximum reachable distance, `l` the 1-based lag and `p`
//! the order:
//!
//! | kind                         | weight                          |
//! |------------------------------|---------------------------------|
//! | `exp-lag-dist`               | `exp(c l d / (p D))`            |
//! | `power-lag-dist`             | `(1 + l d / (p D))^c`           |
//! | `power-of-lag-times-expdist` | `((l / p) exp(d / D))^c`        |
//! | `exp-dist-only`              | `exp(c d / D)`                  |
//!
//! Site pairs declared unreachable carry an infinite distance. Depending on
//! the [`UnreachablePolicy`] they are either clamped to `D` or kept infinite,
//! in which case their weight is infinite and the coefficient is forced to
//! zero by the solver.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnreachablePolicy {
    /// Unreachable pairs are assigned the maximum reachable distance.
    #[default]
    ClampToMax,
    /// Unreachable pairs keep an infinite distance (and weight).
    InfiniteWeight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteGeometry {
    site_ids: Vec<String>,
    coords: Option<Vec<[f64; 2]>>,
    distances: DMatrix<f64>,
    d_max: f64,
}

impl SiteGeometry {
    pub fn from_coords(site_ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if site_ids.len() != coords.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} coordinates",
                site_ids.len(),
                coords.len()
            )));
        }
        check_unique(&site_ids)?;
        let distances = pairwise_distances(&coords)?;
        let d_max = distances.max();
        Ok(Self { site_ids, coords: Some(coords), distances, d_max })
    }

    /// Geometry from an explicit (possibly asymmetric) distance matrix, where
    /// `distances[(s, s')]` is the distance used when `s'` predicts `s`.
    /// Infinite entries mark unreachable pairs.
    pub fn from_distances(
        site_ids: Vec<String>,
        mut distances: DMatrix<f64>,
        policy: UnreachablePolicy,
    ) -> Result<Self> {
        let m = site_ids.len();
        if distances.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!(
                "distance matrix is {}x{}, expected {m}x{m}",
                distances.nrows(),
                distances.ncols()
            )));
        }
        check_unique(&site_ids)?;
        if distances.iter().any(|d| d.is_nan() || *d < 0.0 || *d == f64::NEG_INFINITY) {
            return Err(Error::InvalidParameter(
                "distances must be nonnegative (use inf for unreachable pairs)".into(),
            ));
        }
        if (0..m).any(|i| distances[(i, i)] != 0.0) {
            return Err(Error::InvalidParameter("distance matrix diagonal must be zero".into()));
        }
        let d_max = distances.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
        if policy == UnreachablePolicy::ClampToMax {
            distances.iter_mut().filter(|d| d.is_infinite()).for_each(|d| *d = d_max);
        }
        Ok(Self { site_ids, coords: None, distances, d_max })
    }

    /// Overrides the distances of a coordinate geometry with a road-distance
    /// style matrix, keeping the coordinates for plotting.
    pub fn with_distance_override(self, distances: DMatrix<f64>, policy: UnreachablePolicy) -> Result<Self> {
        let coords = self.coords.clone();
        let mut g = Self::from_distances(self.site_ids, distances, policy)?;
        g.coords = coords;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.site_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.site_ids.is_empty()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn distances(&self) -> &DMatrix<f64> {
        &self.distances
    }

    pub fn distance(&self, s: usize, s_from: usize) -> f64 {
        self.distances[(s, s_from)]
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.len();
        (0..m).all(|i| (0..i).all(|j| {
            let (a, b) = (self.distances[(i, j)], self.distances[(j, i)]);
            a == b || (a - b).abs() <= SYMMETRY_TOL
        }))
    }

    /// The sub-geometry on the given site indices (in that order). `d_max` is
    /// recomputed over the retained pairs.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidParameter(format!("site index {bad} out of range")));
        }
        let ids = indices.iter().map(|&i| self.site_ids[i].clone()).collect();
        // Sub-matrix rather than recomputing from coordinates, so overrides survive.
        let d = DMatrix::from_fn(indices.len(), indices.len(), |a, b| self.distances[(indices[a], indices[b])]);
        let mut g = Self::from_distances(ids, d, UnreachablePolicy::InfiniteWeight)?;
        g.coords = self.coords.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect());
        Ok(g)
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidParameter(format!("duplicate site id {id:?}")));
        }
    }
    Ok(())
}

/// Euclidean distance matrix of planar points.
pub fn pairwise_distances(coords: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("site coordinates".into()));
    }
    let m = coords.len();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let dist = (coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]);
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightKind {
    #[serde(rename = "exp-lag-dist")]
    ExpLagDist,
    #[serde(rename = "power-lag-dist")]
    PowerLagDist,
    #[serde(rename = "power-of-lag-times-expdist")]
    PowerOfLagTimesExpDist,
    #[serde(rename = "exp-dist-only")]
    ExpDistOnly,
}

impl WeightKind {
    pub const ALL: [WeightKind; 4] = [
        WeightKind::ExpLagDist,
        WeightKind::PowerLagDist,
        WeightKind::PowerOfLagTimesExpDist,
        WeightKind::ExpDistOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::ExpLagDist => "exp-lag-dist",
            WeightKind::PowerLagDist => "power-lag-dist",
            WeightKind::PowerOfLagTimesExpDist => "power-of-lag-times-expdist",
            WeightKind::ExpDistOnly => "exp-dist-only",
        }
    }

    /// Weight for 1-based `lag` of order `p` at relative distance
    /// `d / d_max`.
    pub fn weight(self, c: f64, lag: usize, p: usize, rel_dist: f64) -> f64 {
        if rel_dist.is_infinite() {
            return f64::INFINITY;
        }
        let lag_frac = lag as f64 / p as f64;
        match self {
            WeightKind::ExpLagDist => (c * lag_frac * rel_dist).exp(),
            WeightKind::PowerLagDist => (1.0 + lag_frac * rel_dist).powf(c),
            WeightKind::PowerOfLagTimesExpDist => (lag_frac * rel_dist.exp()).powf(c),
            WeightKind::ExpDistOnly => (c * rel_dist).exp(),
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown weight kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub kind: WeightKind,
    pub c: f64,
}

impl WeightSpec {
    pub fn new(kind: WeightKind, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("weight constant must be >= 0, got {c}")));
        }
        Ok(Self { kind, c })
    }
}

/// Penalty weights `w[l][(s, s')]` for every coefficient of a VAR(p).
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyWeights {
    w: Vec<DMatrix<f64>>,
}

impl PenaltyWeights {
    pub fn new(w: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = w
            .first()
            .map(|b| b.nrows())
            .ok_or_else(|| Error::InvalidParameter("weights need at least one lag".into()))?;
        if w.iter().any(|b| b.shape() != (m, m)) {
            return Err(Error::DimensionMismatch("weight blocks must be m x m".into()));
        }
        if w.iter().flat_map(|b| b.iter()).any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::InvalidParameter("penalty weights must be strictly positive".into()));
        }
        Ok(Self { w })
    }

    pub fn uniform(p: usize, m: usize) -> Self {
        Self { w: vec![DMatrix::from_element(m, m, 1.0); p] }
    }

    pub fn order(&self) -> usize {
        self.w.len()
    }

    pub fn dim(&self) -> usize {
        self.w[0].nrows()
    }

    /// Weight of `Phi_{lag+1}[(s, s_from)]`.
    pub fn get(&self, lag: usize, s: usize, s_from: usize) -> f64 {
        self.w[lag][(s, s_from)]
    }

    pub fn block(&self, lag: usize) -> &DMatrix<f64> {
        &self.w[lag]
    }

    /// Weights attached to the coefficients of response column `i`, in design
    /// column order `l*m + s'`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.w.iter().flat_map(|b| b.row(i).iter().copied().collect::<Vec<_>>()).collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { w: self.w.iter().map(|b| b * a).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let m = self.dim();
        self.w.iter().enumerate().flat_map(move |(l, b)| {
            (0..m).flat_map(move |s| (0..m).map(move |sf| (l, s, sf, b[(s, sf)])))
        })
    }

    pub fn has_infinite(&self) -> bool {
        self.w.iter().flat_map(|b| b.iter()).any(|v| v.is_infinite())
    }
}

/// Builds the weight tensor for order `p` on `geometry`.
pub fn weight_tensor(spec: &WeightSpec, geometry: &SiteGeometry, p: usize) -> Result<PenaltyWeights> {
    if p == 0 {
        return Err(Error::InvalidParameter("VAR order must be at least 1".into()));
    }
    if !(spec.c >= 0.0) {
        return Err(Error::InvalidParameter(format!("weight constant must be >= 0, got {}", spec.c)));
    }
    let d_max = geometry.d_max();
    if !(d_max > 0.0) {
        return Err(Error::InvalidParameter("maximum site distance must be positive".into()));
    }
    let m = geometry.len();
    let w = (1..=p)
        .map(|lag| {
            DMatrix::from_fn(m, m, |s, sf| {
                spec.kind.weight(spec.c, lag, p, geometry.distance(s, sf) / d_max)
            })
        })
        .collect();
    PenaltyWeights::new(w)
}

/// Ratio of the largest weight on the support to the smallest weight off it.
///
/// Returns `0` when the support is empty.
pub fn weight_ratio<F>(weights: &PenaltyWeights, mut in_support: F) -> Result<f64>
where
    F: FnMut(usize, usize, usize) -> bool,
{
    let mut max_on = 0.0f64;
    let mut min_off = f64::INFINITY;
    let mut any_off = false;
    for (l, s, sf, w) in weights.iter() {
        if in_support(l, s, sf) {
            max_on = max_on.max(w);
        } else {
            any_off = true;
            min_off = min_off.min(w);
        }
    }
    if !any_off {
        return Err(Error::InvalidParameter("support complement is empty".into()));
    }
    Ok(max_on / min_off)
}
