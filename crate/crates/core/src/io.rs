//! File codecs: CSV for panels and tables, JSON for fitted artifacts.
//!
//! Every writer emits provenance first: `#` comment lines in CSV, a
//! `provenance` member in JSON. Readers skip both. Floats are written in the
//! shortest form that parses back to the same value.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detrend::TrendModel;
use crate::error::{Error, Result};
use crate::evaluation::{EdgeClass, EdgeClassification};
use crate::model::{matrix_from_rows, matrix_to_rows, CoefficientStack, Panel};
use crate::scenario::{RatioRow, ReplicateMetrics, SummaryRow};
use crate::selection::CvRow;
use crate::solver::FitResult;
use crate::weights::{SiteGeometry, UnreachablePolicy, WeightKind};

/// Header label of the optional leading time column of a panel CSV.
pub const TIME_COLUMN: &str = "time";

/// Shortest round-trip text for a double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Identifies the run that produced a file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl Provenance {
    pub fn header_lines(&self) -> Vec<String> {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        vec![
            format!("# {} {}", self.tool, self.version),
            format!("# command: {}", self.command),
            format!("# seed: {seed}"),
            format!("# config-sha256: {}", self.config_hash),
        ]
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match (line, e.into_kind()) {
        (_, csv::ErrorKind::Io(io)) => Error::Io(io),
        (Some(line), kind) => Error::Parse { line, message: csv_kind_message(&kind) },
        (None, kind) => Error::Parse { line: 0, message: csv_kind_message(&kind) },
    }
}

fn csv_kind_message(kind: &csv::ErrorKind) -> String {
    match kind {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        other => format!("{other:?}"),
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(false)
        .from_reader(r)
}

/// All records with their 1-based physical line numbers.
fn read_records<R: Read>(r: R) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv_reader(r);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Parse { line, message: format!("{what}: '{field}' is not a number") })
}

fn check_unique_ids(ids: &[String], line: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(Error::Parse { line, message: "empty site id".into() });
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::Parse { line, message: format!("duplicate site id '{id}'") });
        }
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, prov: Option<&Provenance>) -> Result<()> {
    if let Some(p) = prov {
        for line in p.header_lines() {
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// A panel together with the time labels of its rows, when present.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelFile {
    pub panel: Panel,
    pub times: Option<Vec<usize>>,
}

impl PanelFile {
    /// Time label of the first row, or 1 without a time column.
    pub fn start_time(&self) -> usize {
        self.times.as_ref().and_then(|t| t.first().copied()).unwrap_or(1)
    }
}

/// Reads a panel: a header of site ids (optionally led by `time`) and one
/// row of values per time point.
pub fn read_panel<R: Read>(r: R) -> Result<PanelFile> {
    let records = read_records(r)?;
    let (header_line, header) =
        records.first().ok_or_else(|| Error::Parse { line: 1, message: "empty panel file".into() })?;
    let has_time = header.get(0).is_some_and(|h| h.eq_ignore_ascii_case(TIME_COLUMN));
    let skip = usize::from(has_time);
    let ids: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(Error::Parse { line: *header_line, message: "no site columns".into() });
    }
    check_unique_ids(&ids, *header_line)?;
    let rows = &records[1..];
    if rows.is_empty() {
        return Err(Error::Parse { line: *header_line, message: "panel has no rows".into() });
    }
    let m = ids.len();
    let mut values = DMatrix::zeros(rows.len(), m);
    let mut times = Vec::with_capacity(rows.len());
    for (t, (line, rec)) in rows.iter().enumerate() {
        if has_time {
            let field = rec.get(0).unwrap_or("");
            let time = field.parse::<usize>().map_err(|_| Error::Parse {
                line: *line,
                message: format!("time '{field}' is not a nonnegative integer"),
            })?;
            times.push(time);
        }
        for (s, field) in rec.iter().skip(skip).enumerate() {
            let v = parse_f64(field, *line, &ids[s])?;
            if !v.is_finite() {
                return Err(Error::Parse { line: *line, message: format!("non-finite value in '{}'", ids[s]) });
            }
            values[(t, s)] = v;
        }
    }
    let panel = Panel::with_ids(values, ids)?;
    Ok(PanelFile { panel, times: has_time.then_some(times) })
}

/// Writes a panel with a leading time column, labelled `1, 2, ...` unless
/// `times` is given.
pub fn write_panel<W: Write>(w: W, panel: &Panel, times: Option<&[usize]>, prov: Option<&Provenance>) -> Result<()> {
    if let Some(t) = times {
        if t.len() != panel.len() {
            return Err(Error::DimensionMismatch(format!("{} time labels for {} rows", t.len(), panel.len())));
        }
    }
    let mut w = BufWriter::new(w);
    write_header(&mut w, prov)?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![TIME_COLUMN.to_string()];
    header.extend(panel.site_ids().iter().cloned());
    out.write_record(&header).map_err(csv_error)?;
    for t in 0..panel.len() {
        let label = times.map_or(t + 1, |ts| ts[t]);
        let mut row = vec![label.to_string()];
        row.extend(panel.values().row(t).iter().map(|v| fmt_f64(*v)));
        out.write_record(&row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `site_id, x, y` rows.
pub fn read_geometry<R: Read>(r: R) -> Result<SiteGeometry> {
    let records = read_records(r)?;
    let (header_line, header) =
        records.first().ok_or_else(|| Error::Parse { line: 1, message: "empty geometry file".into() })?;
    let expected = ["site_id", "x", "y"];
    if header.len() != 3 || !header.iter().zip(expected).all(|(h, e)| h.eq_ignore_ascii_case(e)) {
        return Err(Error::Parse { line: *header_line, message: "geometry header must be site_id,x,y".into() });
    }
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut seen = HashSet::new();
    for (line, rec) in &records[1..] {
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Parse { line: *line, message: format!("duplicate site id '{id}'") });
        }
        let x = parse_f64(&rec[1], *line, "x")?;
        let y = parse_f64(&rec[2], *line, "y")?;
        ids.push(id);
        coords.push([x, y]);
    }
    if ids.is_empty() {
        return Err(Error::Parse { line: *header_line, message: "geometry has no sites".into() });
    }
    SiteGeometry::from_coords(ids, coords)
}

pub fn write_geometry<W: Write>(w: W, geometry: &SiteGeometry, prov: Option<&Provenance>) -> Result<()> {
    let coords = geometry
        .coords()
        .ok_or_else(|| Error::InvalidParameter("geometry has no coordinates to write".into()))?;
    let mut w = BufWriter::new(w);
    write_header(&mut w, prov)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["site_id", "x", "y"]).map_err(csv_error)?;
    for (id, c) in geometry.site_ids().iter().zip(coords) {
        out.write_record([id.clone(), fmt_f64(c[0]), fmt_f64(c[1])]).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an `m x m` distance matrix whose header lists site ids, optionally
/// with a leading `site_id` column labelling the rows, and returns it in the
/// order of `site_ids`. `inf` marks unreachable pairs.
pub fn read_distances<R: Read>(r: R, site_ids: &[String]) -> Result<DMatrix<f64>> {
    let records = read_records(r)?;
    let (header_line, header) =
        records.first().ok_or_else(|| Error::Parse { line: 1, message: "empty distance file".into() })?;
    let labelled = header.get(0).is_some_and(|h| h.eq_ignore_ascii_case("site_id"));
    let skip = usize::from(labelled);
    let cols: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    check_unique_ids(&cols, *header_line)?;
    let m = cols.len();
    let rows = &records[1..];
    if rows.len() != m {
        return Err(Error::Parse {
            line: *header_line,
            message: format!("distance matrix has {} rows for {m} columns", rows.len()),
        });
    }
    let row_ids: Vec<String> = if labelled {
        let ids: Vec<String> = rows.iter().map(|(_, rec)| rec[0].to_string()).collect();
        check_unique_ids(&ids, rows[0].0)?;
        ids
    } else {
        cols.clone()
    };
    let mut raw = DMatrix::zeros(m, m);
    for (i, (line, rec)) in rows.iter().enumerate() {
        for (j, field) in rec.iter().skip(skip).enumerate() {
            raw[(i, j)] = parse_f64(field, *line, "distance")?;
        }
    }
    let position = |ids: &[String], id: &str| {
        ids.iter()
            .position(|c| c == id)
            .ok_or_else(|| Error::DimensionMismatch(format!("site '{id}' missing from the distance matrix")))
    };
    if site_ids.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix covers {m} sites, geometry has {}",
            site_ids.len()
        )));
    }
    let rix = site_ids.iter().map(|id| position(&row_ids, id)).collect::<Result<Vec<_>>>()?;
    let cix = site_ids.iter().map(|id| position(&cols, id)).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(m, m, |i, j| raw[(rix[i], cix[j])]))
}

/// Geometry from a coordinates file with an optional distance override.
pub fn load_geometry(coords: &Path, distances: Option<&Path>, policy: UnreachablePolicy) -> Result<SiteGeometry> {
    let geometry = read_geometry(open(coords)?)?;
    match distances {
        Some(path) => {
            let d = read_distances(open(path)?, geometry.site_ids())?;
            geometry.with_distance_override(d, policy)
        }
        None => Ok(geometry),
    }
}

/// Serialized form of a fitted coefficient stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub p: usize,
    pub m: usize,
    pub lambda: f64,
    pub site_ids: Vec<String>,
    /// `p` blocks of row-major `m x m` transition matrices.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub support: usize,
    pub converged: bool,
    #[serde(default)]
    pub objective: Option<f64>,
    #[serde(default)]
    pub max_kkt_residual: Option<f64>,
    #[serde(default)]
    pub weight_kind: Option<WeightKind>,
    #[serde(default)]
    pub weight_c: Option<f64>,
}

impl FitRecord {
    pub fn from_fit(fit: &FitResult, site_ids: &[String]) -> Self {
        let coeffs = &fit.coeffs;
        Self {
            p: coeffs.order(),
            m: coeffs.dim(),
            lambda: fit.lambda,
            site_ids: site_ids.to_vec(),
            coefficients: (0..coeffs.order()).map(|l| matrix_to_rows(&coeffs.phi(l))).collect(),
            support: fit.support_size(),
            converged: fit.converged(),
            objective: Some(fit.objective),
            max_kkt_residual: Some(fit.max_kkt_residual()),
            weight_kind: None,
            weight_c: None,
        }
    }

    pub fn with_weights(mut self, kind: WeightKind, c: f64) -> Self {
        self.weight_kind = Some(kind);
        self.weight_c = Some(c);
        self
    }

    pub fn coeffs(&self) -> Result<CoefficientStack> {
        if self.coefficients.len() != self.p || self.site_ids.len() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "fit declares p = {}, m = {} but holds {} blocks and {} site ids",
                self.p,
                self.m,
                self.coefficients.len(),
                self.site_ids.len()
            )));
        }
        let phis = self
            .coefficients
            .iter()
            .map(|rows| matrix_from_rows(rows, self.m))
            .collect::<Result<Vec<_>>>()?;
        CoefficientStack::from_phis(&phis)
    }
}

/// Trend models of a detrended panel, one per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFile {
    pub period: usize,
    pub sites: Vec<SiteTrend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTrend {
    pub site_id: String,
    pub bandwidth: f64,
    pub outliers: usize,
    #[serde(flatten)]
    pub model: TrendModel,
}

/// Writes `value` as pretty JSON with a `provenance` member added.
pub fn write_json<W: Write, T: Serialize>(w: W, value: &T, prov: Option<&Provenance>) -> Result<()> {
    let mut body = serde_json::to_value(value)?;
    if let (Some(p), serde_json::Value::Object(map)) = (prov, &mut body) {
        map.insert("provenance".into(), serde_json::to_value(p)?);
    }
    let mut w = BufWriter::new(w);
    serde_json::to_writer_pretty(&mut w, &body)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads JSON written by [`write_json`], ignoring the provenance member.
pub fn read_json<R: Read, T: DeserializeOwned>(r: R) -> Result<T> {
    let mut body: serde_json::Value = serde_json::from_reader(BufReader::new(r))?;
    if let serde_json::Value::Object(map) = &mut body {
        map.remove("provenance");
    }
    Ok(serde_json::from_value(body)?)
}

/// Generic CSV table with a provenance header.
pub fn write_table<W: Write>(w: W, prov: Option<&Provenance>, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(w);
    write_header(&mut w, prov)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_error)?;
    for row in rows {
        out.write_record(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Edge list `from_site, to_site, lag, class`; true negatives are omitted and
/// the lag is blank for lag-collapsed classifications.
pub fn write_edges<W: Write>(
    w: W,
    edges: &EdgeClassification,
    site_ids: &[String],
    prov: Option<&Provenance>,
) -> Result<()> {
    let rows: Vec<Vec<String>> = edges
        .edges
        .iter()
        .filter(|e| e.class != EdgeClass::TrueNegative)
        .map(|e| {
            vec![
                site_ids[e.from_site].clone(),
                site_ids[e.to_site].clone(),
                e.lag.map_or_else(String::new, |l| l.to_string()),
                e.class.name().to_string(),
            ]
        })
        .collect();
    write_table(w, prov, &strings(&["from_site", "to_site", "lag", "class"]), &rows)
}

pub fn write_cv_table<W: Write>(w: W, table: &[CvRow], prov: Option<&Provenance>) -> Result<()> {
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| vec![r.p.to_string(), fmt_f64(r.c), fmt_f64(r.lambda), fmt_f64(r.rmsfe)])
        .collect();
    write_table(w, prov, &strings(&["p", "c", "lambda", "rmsfe"]), &rows)
}

/// Reads the `p, c, lambda, rmsfe` table written by [`write_cv_table`].
pub fn read_cv_table<R: Read>(r: R) -> Result<Vec<CvRow>> {
    let records = read_records(r)?;
    records
        .iter()
        .skip(1)
        .map(|(line, rec)| {
            if rec.len() != 4 {
                return Err(Error::Parse { line: *line, message: "expected p,c,lambda,rmsfe".into() });
            }
            let p = rec[0]
                .parse()
                .map_err(|_| Error::Parse { line: *line, message: format!("bad order '{}'", &rec[0]) })?;
            Ok(CvRow {
                p,
                c: parse_f64(&rec[1], *line, "c")?,
                lambda: parse_f64(&rec[2], *line, "lambda")?,
                rmsfe: parse_f64(&rec[3], *line, "rmsfe")?,
            })
        })
        .collect()
}

fn horizon_headers(h: usize) -> Vec<String> {
    (1..=h).map(|k| format!("rmsfe_h{k}")).collect()
}

pub fn write_replicate_metrics<W: Write>(w: W, metrics: &[ReplicateMetrics], prov: Option<&Provenance>) -> Result<()> {
    let h = metrics.first().map_or(0, |m| m.rmsfe.len());
    let mut header = strings(&["replicate", "estimator", "p", "c", "lambda", "l1", "l2", "pfz", "pfnz"]);
    header.extend(horizon_headers(h));
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|m| {
            let mut row = vec![m.replicate.to_string(), m.estimator.clone(), m.p.to_string()];
            row.extend([m.c, m.lambda, m.l1, m.l2, m.pfz, m.pfnz].iter().map(|v| fmt_f64(*v)));
            row.extend(m.rmsfe.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    write_table(w, prov, &header, &rows)
}

pub fn write_ratios<W: Write>(w: W, ratios: &[RatioRow], prov: Option<&Provenance>) -> Result<()> {
    let h = ratios.first().map_or(0, |r| r.rmsfe.len());
    let mut header = strings(&["replicate", "estimator", "l1", "l2", "pfz", "pfnz"]);
    header.extend(horizon_headers(h));
    let rows: Vec<Vec<String>> = ratios
        .iter()
        .map(|r| {
            let mut row = vec![r.replicate.to_string(), r.estimator.clone()];
            row.extend(r.metrics().iter().map(|(_, v)| fmt_f64(*v)));
            row
        })
        .collect();
    write_table(w, prov, &header, &rows)
}

pub fn write_summary<W: Write>(w: W, summary: &[SummaryRow], prov: Option<&Provenance>) -> Result<()> {
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.estimator.clone(),
                s.metric.clone(),
                fmt_f64(s.mean),
                fmt_f64(s.se),
                s.n.to_string(),
                s.undefined.to_string(),
            ]
        })
        .collect();
    write_table(w, prov, &strings(&["estimator", "metric", "mean", "se", "n", "undefined"]), &rows)
}

/// Masked observations as `site_id, time` rows.
pub fn write_outliers<W: Write>(
    w: W,
    site_ids: &[String],
    masks: &[Vec<bool>],
    start_t: usize,
    prov: Option<&Provenance>,
) -> Result<()> {
    let rows: Vec<Vec<String>> = site_ids
        .iter()
        .zip(masks)
        .flat_map(|(id, mask)| {
            mask.iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(move |(i, _)| vec![id.clone(), (start_t + i).to_string()])
        })
        .collect();
    write_table(w, prov, &strings(&["site_id", "time"]), &rows)
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel_text(text: &str) -> Result<PanelFile> {
        read_panel(text.as_bytes())
    }

    #[test]
    fn panel_with_time_and_comments() {
        let f = panel_text("# made by hand\ntime,a,b\n5,1.5,2\n6,-0.25,1e-3\n").unwrap();
        assert_eq!(f.panel.site_ids(), ["a", "b"]);
        assert_eq!(f.times, Some(vec![5, 6]));
        assert_eq!(f.start_time(), 5);
        assert_eq!(f.panel.values()[(1, 1)], 1e-3);
    }

    #[test]
    fn panel_without_time() {
        let f = panel_text("a,b\n1,2\n").unwrap();
        assert!(f.times.is_none());
        assert_eq!(f.start_time(), 1);
    }

    #[test]
    fn ragged_row_reports_line() {
        match panel_text("a,b\n1,2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_duplicate_ids() {
        assert!(matches!(panel_text("a,b\n1,x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(panel_text("a,a\n1,2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(panel_text("a,b\n1,nan\n"), Err(Error::Parse { .. })));
        let geo = "site_id,x,y\nA,0,0\nA,1,1\n";
        assert!(matches!(read_geometry(geo.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1e-7, 1e300, -2.5e-310, 123456789.123456789, f64::MAX] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn distances_reordered_and_inf() {
        let text = "site_id,b,a\nb,0,inf\na,2,0\n";
        let ids = vec!["a".to_string(), "b".to_string()];
        let d = read_distances(text.as_bytes(), &ids).unwrap();
        assert_eq!(d[(0, 0)], 0.0);
        assert_eq!(d[(0, 1)], 2.0);
        assert!(d[(1, 0)].is_infinite());
    }

    #[test]
    fn json_provenance_is_ignored_on_read() {
        let model = TrendModel::new(vec![1.0, 2.0], -0.5, 0.25, 1e-6).unwrap();
        let prov = Provenance { tool: "t".into(), seed: Some(3), ..Default::default() };
        let mut buf = Vec::new();
        write_json(&mut buf, &model, Some(&prov)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("provenance"));
        let back: TrendModel = read_json(buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }
}
