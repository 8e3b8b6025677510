use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use stvar_core::detrend::{self, slot_index, SlotFilter};
use stvar_core::evaluation::{
    classify_network, classify_network_collapsed, dm_test, estimation_errors, support_metrics, EdgeCounts,
};
use stvar_core::io::{self, fmt_f64, FitRecord, PanelFile, SiteTrend, TrendFile};
use stvar_core::rng::derive_seed;
use stvar_core::scenario::{generate_truth, run_study, ScenarioSpec, StudyConfig};
use stvar_core::selection::{forward_cv, CvPlan};
use stvar_core::solver::{self, lambda_grid, SolverOptions};
use stvar_core::weights::{weight_tensor, UnreachablePolicy};
use stvar_core::{CoefficientStack, Error, LaggedRegression, Panel, PenaltyWeights, SiteGeometry, VarModel, WeightSpec};

use crate::context::RunContext;
use crate::{
    CliError, CvArgs, DetrendArgs, EvaluateArgs, FitArgs, ForecastArgs, GeometryArgs, GlobalArgs, NetworkArgs,
    ScenarioArgs, SimulateArgs, StudyArgs,
};

type CliResult = Result<(), CliError>;

fn load_panel(ctx: &mut RunContext, path: &Path) -> Result<PanelFile, CliError> {
    let bytes = ctx.read_input(path)?;
    Ok(io::read_panel(bytes.as_slice())?)
}

fn load_json<T: DeserializeOwned>(ctx: &mut RunContext, path: &Path) -> Result<T, CliError> {
    let bytes = ctx.read_input(path)?;
    Ok(io::read_json(bytes.as_slice())?)
}

/// Parses a TOML file, also returning its raw table for presence checks.
fn load_toml<T: DeserializeOwned>(ctx: &mut RunContext, path: &Path) -> Result<(T, toml::Table), CliError> {
    let text = ctx.read_text(path)?;
    let bad = |e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display()));
    let table: toml::Table = toml::from_str(&text).map_err(bad)?;
    let value = toml::from_str(&text).map_err(bad)?;
    Ok((value, table))
}

/// Geometry restricted and ordered to `site_ids`.
fn load_geometry(
    ctx: &mut RunContext,
    args: &GeometryArgs,
    site_ids: &[String],
) -> Result<Option<SiteGeometry>, CliError> {
    let Some(path) = &args.geometry else { return Ok(None) };
    let bytes = ctx.read_input(path)?;
    let mut geometry = io::read_geometry(bytes.as_slice())?;
    if let Some(dpath) = &args.distances {
        let bytes = ctx.read_input(dpath)?;
        let d = io::read_distances(bytes.as_slice(), geometry.site_ids())?;
        geometry = geometry.with_distance_override(d, UnreachablePolicy::from(args.unreachable))?;
    }
    let indices = site_ids
        .iter()
        .map(|id| {
            geometry
                .site_ids()
                .iter()
                .position(|g| g == id)
                .ok_or_else(|| Error::DimensionMismatch(format!("site '{id}' missing from the geometry")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(geometry.subset(&indices)?))
}

fn write_json<T: Serialize>(ctx: &RunContext, name: &str, value: &T) -> CliResult {
    io::write_json(ctx.output(name)?, value, Some(&ctx.provenance()))?;
    ctx.announce(name);
    Ok(())
}

fn write_panel(ctx: &RunContext, name: &str, panel: &Panel, times: Option<&[usize]>) -> CliResult {
    io::write_panel(ctx.output(name)?, panel, times, Some(&ctx.provenance()))?;
    ctx.announce(name);
    Ok(())
}

/// Estimate and truth padded to a common lag order.
fn common_order(est: &CoefficientStack, truth: &VarModel) -> Result<(CoefficientStack, CoefficientStack), CliError> {
    let truth = truth.coefficients();
    if est.dim() != truth.dim() {
        return Err(Error::DimensionMismatch(format!("fit has {} sites, truth {}", est.dim(), truth.dim())).into());
    }
    let p = est.order().max(truth.order());
    Ok((est.padded_to(p)?, truth.padded_to(p)?))
}

pub fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "simulate")?;
    let seed = ctx.require_seed(g.seed)?;
    let model: VarModel = load_json(&mut ctx, &a.model)?;
    ctx.record(&(a.length, a.burn_in))?;
    let mut panel = model.simulate(a.length, a.burn_in, seed)?;
    if let Some(path) = &a.geometry {
        let bytes = ctx.read_input(path)?;
        let geometry = io::read_geometry(bytes.as_slice())?;
        panel = Panel::with_ids(panel.values().clone(), geometry.site_ids().to_vec())?;
    }
    write_panel(&ctx, "panel.csv", &panel, None)
}

pub fn generate_scenario(g: &GlobalArgs, a: &ScenarioArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "generate-scenario")?;
    let (mut spec, has_seed) = match &a.config {
        Some(path) => {
            let (spec, table): (ScenarioSpec, _) = load_toml(&mut ctx, path)?;
            (spec, table.contains_key("seed"))
        }
        None => (ScenarioSpec::default(), false),
    };
    if let Some(v) = a.order {
        spec.order = v;
    }
    if let Some(v) = a.setting {
        spec.setting = v;
    }
    if let Some(v) = &a.scenario {
        spec.scenario = v.parse()?;
    }
    if let Some(v) = a.sites {
        spec.m = v;
    }
    if let Some(v) = a.sigma_scale {
        spec.sigma_scale = v;
    }
    spec.seed = ctx.require_seed(g.seed.or(has_seed.then_some(spec.seed)))?;
    ctx.record(&spec)?;
    ctx.record(&(a.length, a.burn_in))?;
    let truth = generate_truth(&spec)?;
    write_json(&ctx, "model.json", &truth.model)?;
    io::write_geometry(ctx.output("geometry.csv")?, &truth.geometry, Some(&ctx.provenance()))?;
    ctx.announce("geometry.csv");
    if let Some(len) = a.length {
        let panel = truth.model.simulate(len, a.burn_in, derive_seed(spec.seed, 0))?;
        let panel = Panel::with_ids(panel.values().clone(), truth.geometry.site_ids().to_vec())?;
        write_panel(&ctx, "panel.csv", &panel, None)?;
    }
    println!(
        "order {} sites {} nonzeros {} spectral radius {:.6} attempts {}",
        spec.order,
        spec.m,
        truth.model.coefficients().support_size(),
        truth.model.companion_spectral_radius(),
        truth.attempts
    );
    Ok(())
}

pub fn fit(g: &GlobalArgs, a: &FitArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "fit")?;
    let pf = load_panel(&mut ctx, &a.input)?;
    let panel = &pf.panel;
    let geometry = load_geometry(&mut ctx, &a.geometry, panel.site_ids())?;
    if a.order == 0 {
        return Err(CliError::Usage("--order must be at least 1".into()));
    }
    ctx.record(&json!({
        "kind": a.weights, "c": a.c, "order": a.order, "lambda": a.lambda,
        "lambda_index": a.lambda_index, "lambda_count": a.lambda_count,
        "lambda_ratio": a.lambda_ratio, "threshold": a.threshold,
    }))?;
    let reg = LaggedRegression::build(panel, a.order)?;
    let weights = match &geometry {
        Some(geo) => weight_tensor(&WeightSpec::new(a.weights, a.c)?, geo, a.order)?,
        None => {
            if a.c != 0.0 {
                log::warn!("no geometry given: fitting the unweighted lasso");
            }
            PenaltyWeights::uniform(a.order, panel.dim())
        }
    };
    let lmax = solver::lambda_max(&reg, &weights).ok();
    let lambda = match (a.lambda, a.lambda_index) {
        (Some(l), _) => l,
        (None, Some(k)) => {
            let lmax = lmax.ok_or_else(|| Error::Degenerate("the design is identically zero".into()))?;
            let grid = lambda_grid(lmax, a.lambda_count, a.lambda_ratio)?;
            *grid
                .values()
                .get(k.wrapping_sub(1))
                .ok_or_else(|| CliError::Usage(format!("--lambda-index must be in 1..={}", grid.len())))?
        }
        (None, None) => return Err(CliError::Usage("pass --lambda or --lambda-index".into())),
    };
    let mut result = solver::fit(&reg, &weights, lambda, None, &SolverOptions::default())?;
    if let Some(level) = a.threshold {
        result.coeffs = solver::threshold(&result.coeffs, level);
    }
    let mut record = FitRecord::from_fit(&result, panel.site_ids());
    if geometry.is_some() {
        record = record.with_weights(a.weights, a.c);
    }
    write_json(&ctx, "fit.json", &record)?;
    let lmax_text = lmax.map_or_else(|| "undefined".to_string(), fmt_f64);
    println!(
        "lambda {} lambda_max {lmax_text} support {} converged {}",
        fmt_f64(lambda),
        record.support,
        record.converged
    );
    if !record.converged {
        return Err(CliError::Numerical(format!(
            "solver did not converge (max KKT residual {:e}); fit.json written anyway",
            result.max_kkt_residual()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct Selected<'a> {
    p: usize,
    c: f64,
    lambda: f64,
    rmsfe: f64,
    train_rows: usize,
    warnings: &'a [String],
}

pub fn cv(g: &GlobalArgs, a: &CvArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "cv")?;
    let pf = load_panel(&mut ctx, &a.input)?;
    let geometry = load_geometry(&mut ctx, &a.geometry, pf.panel.site_ids())?
        .ok_or_else(|| CliError::Usage("cv needs --geometry".into()))?;
    let mut plan = match &a.config {
        Some(path) => load_toml::<CvPlan>(&mut ctx, path)?.0,
        None => CvPlan::default(),
    };
    if let Some(k) = a.weights {
        plan.kind = k;
    }
    if let Some(c) = &a.c {
        plan.c_candidates = c.clone();
    }
    if let Some(p) = &a.orders {
        plan.p_candidates = p.clone();
    }
    if a.train_end.is_some() {
        plan.train_end = a.train_end;
    }
    if let Some(n) = a.lambda_count {
        plan.lambda_count = n;
    }
    if let Some(r) = a.lambda_ratio {
        plan.lambda_ratio = r;
    }
    ctx.record(&plan)?;
    let res = forward_cv(&pf.panel, &geometry, &plan)?;
    for w in &res.warnings {
        log::warn!("{w}");
    }
    io::write_cv_table(ctx.output("cv_table.csv")?, &res.table, Some(&ctx.provenance()))?;
    ctx.announce("cv_table.csv");
    let s = res.selected;
    let selected =
        Selected { p: s.p, c: s.c, lambda: s.lambda, rmsfe: s.rmsfe, train_rows: res.train_rows, warnings: &res.warnings };
    write_json(&ctx, "selected.json", &selected)?;
    let record = FitRecord::from_fit(&res.fit, pf.panel.site_ids()).with_weights(plan.kind, s.c);
    write_json(&ctx, "fit.json", &record)?;
    println!(
        "selected p {} c {} lambda {} rmsfe {} support {}",
        s.p,
        fmt_f64(s.c),
        fmt_f64(s.lambda),
        fmt_f64(s.rmsfe),
        record.support
    );
    Ok(())
}

pub fn forecast(g: &GlobalArgs, a: &ForecastArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "forecast")?;
    let pf = load_panel(&mut ctx, &a.input)?;
    let record: FitRecord = load_json(&mut ctx, &a.fit)?;
    if record.site_ids != pf.panel.site_ids() {
        return Err(Error::DimensionMismatch("panel and fit have different site ids".into()).into());
    }
    if a.horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    ctx.record(&a.horizon)?;
    let coeffs = record.coeffs()?;
    let fc = stvar_core::model::forecast(&coeffs, &pf.panel, a.horizon)?;
    let last = pf.times.as_ref().and_then(|t| t.last().copied()).unwrap_or(pf.panel.len());
    let times: Vec<usize> = (last + 1..=last + a.horizon).collect();
    let m = pf.panel.dim();
    let mut values = DMatrix::from_fn(a.horizon, m, |i, s| fc[i][s]);
    if let Some(path) = &a.trend {
        let trends: TrendFile = load_json(&mut ctx, path)?;
        let slots: Vec<usize> = times.iter().map(|&t| slot_index(t, trends.period)).collect();
        for (s, id) in pf.panel.site_ids().iter().enumerate() {
            let site = trends
                .sites
                .iter()
                .find(|t| &t.site_id == id)
                .ok_or_else(|| Error::DimensionMismatch(format!("no trend for site '{id}'")))?;
            let x: Vec<f64> = values.column(s).iter().copied().collect();
            let z = detrend::reconstruct(&x, &site.model, &slots)?;
            values.column_mut(s).copy_from_slice(&z);
        }
    }
    let out = Panel::with_ids(values, pf.panel.site_ids().to_vec())?;
    write_panel(&ctx, "forecast.csv", &out, Some(&times))
}

#[derive(Serialize)]
struct Evaluation {
    l1: f64,
    l2: f64,
    pfz: f64,
    pfnz: f64,
    edges: EdgeCounts,
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> CliResult {
    if a.fit.is_none() && a.errors_a.is_none() {
        return Err(CliError::Usage("pass --fit/--truth, --errors-a/--errors-b, or both".into()));
    }
    let mut ctx = RunContext::new(g, "evaluate")?;
    ctx.record(&a.horizon)?;
    if let (Some(fit), Some(truth)) = (&a.fit, &a.truth) {
        let record: FitRecord = load_json(&mut ctx, fit)?;
        let truth: VarModel = load_json(&mut ctx, truth)?;
        let (est, tru) = common_order(&record.coeffs()?, &truth)?;
        let err = estimation_errors(&est, &tru)?;
        let sup = support_metrics(&est, &tru)?;
        let edges = classify_network(&est, &tru)?.counts();
        let ev = Evaluation { l1: err.l1, l2: err.l2, pfz: sup.pfz, pfnz: sup.pfnz, edges };
        write_json(&ctx, "evaluation.json", &ev)?;
        println!("l1 {} l2 {} pfz {} pfnz {}", fmt_f64(ev.l1), fmt_f64(ev.l2), fmt_f64(ev.pfz), fmt_f64(ev.pfnz));
    }
    if let (Some(pa), Some(pb)) = (&a.errors_a, &a.errors_b) {
        let ea = load_panel(&mut ctx, pa)?.panel;
        let eb = load_panel(&mut ctx, pb)?.panel;
        if ea.site_ids() != eb.site_ids() || ea.len() != eb.len() {
            return Err(Error::DimensionMismatch("error panels differ in sites or length".into()).into());
        }
        let mut rows = Vec::with_capacity(ea.dim());
        for (s, id) in ea.site_ids().iter().enumerate() {
            let x: Vec<f64> = ea.values().column(s).iter().copied().collect();
            let y: Vec<f64> = eb.values().column(s).iter().copied().collect();
            let dm = dm_test(&x, &y, a.horizon)?;
            rows.push(vec![id.clone(), fmt_f64(dm.statistic), fmt_f64(dm.p_value), dm.degenerate.to_string()]);
        }
        let header: Vec<String> =
            ["site_id", "statistic", "p_value", "degenerate"].iter().map(|s| s.to_string()).collect();
        io::write_table(ctx.output("dm.csv")?, Some(&ctx.provenance()), &header, &rows)?;
        ctx.announce("dm.csv");
    }
    Ok(())
}

pub fn study(g: &GlobalArgs, a: &StudyArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "study")?;
    let (mut config, table): (StudyConfig, _) = load_toml(&mut ctx, &a.config)?;
    let has_seed = table.get("scenario").and_then(|s| s.as_table()).is_some_and(|s| s.contains_key("seed"));
    config.scenario.seed = ctx.require_seed(g.seed.or(has_seed.then_some(config.scenario.seed)))?;
    ctx.record(&config)?;
    let res = run_study(&config)?;
    let prov = ctx.provenance();
    io::write_replicate_metrics(ctx.output("metrics.csv")?, &res.metrics, Some(&prov))?;
    io::write_ratios(ctx.output("ratios.csv")?, &res.ratios, Some(&prov))?;
    io::write_summary(ctx.output("summary.csv")?, &res.summary, Some(&prov))?;
    for name in ["metrics.csv", "ratios.csv", "summary.csv"] {
        ctx.announce(name);
    }
    write_json(&ctx, "truth_model.json", &res.truth.model)?;
    io::write_geometry(ctx.output("geometry.csv")?, &res.truth.geometry, Some(&prov))?;
    ctx.announce("geometry.csv");
    for row in &res.summary {
        println!(
            "{:<10} {:<10} mean {:.4} se {:.4} n {}{}",
            row.estimator,
            row.metric,
            row.mean,
            row.se,
            row.n,
            if row.undefined > 0 { format!(" undefined {}", row.undefined) } else { String::new() }
        );
    }
    Ok(())
}

pub fn detrend(g: &GlobalArgs, a: &DetrendArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "detrend")?;
    let pf = load_panel(&mut ctx, &a.input)?;
    if let Some(times) = &pf.times {
        if times.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::InvalidParameter("detrending needs consecutive time labels".into()).into());
        }
    }
    let filter = match &a.slots {
        Some(path) => Some(load_toml::<SlotFilter>(&mut ctx, path)?.0),
        None => None,
    };
    ctx.record(&json!({ "period": a.period, "bandwidth": a.bandwidth, "slots": filter }))?;
    let start = pf.start_time();
    let panel = &pf.panel;
    let res = detrend::detrend_panel(panel, start, a.period, a.bandwidth)?;
    if res.floored > 0 {
        log::warn!("{} standardized values used the sigma floor", res.floored);
    }
    let times: Vec<usize> = (start..start + panel.len()).collect();
    write_panel(&ctx, "standardized.csv", &res.standardized, Some(&times))?;
    let trends = TrendFile {
        period: a.period,
        sites: panel
            .site_ids()
            .iter()
            .zip(&res.sites)
            .map(|(id, s)| SiteTrend {
                site_id: id.clone(),
                bandwidth: s.bandwidth,
                outliers: s.outliers.iter().filter(|m| **m).count(),
                model: s.model.clone(),
            })
            .collect(),
    };
    write_json(&ctx, "trend.json", &trends)?;
    let masks: Vec<Vec<bool>> = res.sites.iter().map(|s| s.outliers.clone()).collect();
    io::write_outliers(ctx.output("outliers.csv")?, panel.site_ids(), &masks, start, Some(&ctx.provenance()))?;
    ctx.announce("outliers.csv");
    if let Some(filter) = &filter {
        let rows = filter.rows(panel.len(), start, a.period);
        let kept = detrend::filter_panel(&res.standardized, filter, start, a.period)?;
        let kept_times: Vec<usize> = rows.iter().map(|r| start + r).collect();
        write_panel(&ctx, "standardized_filtered.csv", &kept, Some(&kept_times))?;
    }
    for t in &trends.sites {
        println!(
            "{} a {:.4} b {:.4} bandwidth {:.3} outliers {}",
            t.site_id, t.model.a, t.model.b, t.bandwidth, t.outliers
        );
    }
    Ok(())
}

pub fn network(g: &GlobalArgs, a: &NetworkArgs) -> CliResult {
    let mut ctx = RunContext::new(g, "network")?;
    ctx.record(&a.collapse)?;
    let record: FitRecord = load_json(&mut ctx, &a.fit)?;
    let truth: VarModel = load_json(&mut ctx, &a.truth)?;
    let (est, tru) = common_order(&record.coeffs()?, &truth)?;
    let edges = if a.collapse { classify_network_collapsed(&est, &tru)? } else { classify_network(&est, &tru)? };
    io::write_edges(ctx.output("edges.csv")?, &edges, &record.site_ids, Some(&ctx.provenance()))?;
    ctx.announce("edges.csv");
    let c = edges.counts();
    println!(
        "true-positive {} false-negative {} false-positive {} true-negative {}",
        c.true_positive, c.false_negative, c.false_positive, c.true_negative
    );
    Ok(())
}
