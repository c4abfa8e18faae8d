//! The `twostage` command line.
//!
//! Values resolve as flag, then config file (`--config`, a flat TOML table
//! whose keys are the long flag names with underscores), then environment
//! (`TWOSTAGE_SEED`, `TWOSTAGE_THREADS`), then built-in defaults.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input,
//! 3 bracket or resource failure.

use std::sync::Mutex;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::critical::{bisect_critical, sweep, trend_study, BisectSettings, CriticalEstimate, SurvivalProxy};
use crate::engine::{simulate, Outcome, ProcessKind, ProcessParams, SimOptions, SiteState, SparseConfig};
use crate::error::Error;
use crate::lattice::{Domain, LatticeGeometry, SiteCoord};
use crate::meanfield::{build_g, lower_bound_lambda, max_real_eigenvalue, scaled_target, solve_moments};
use crate::oracle::{brute_union_spaces, build_exact, build_single_site, rate_table_check, ring_marginal_checks, transient};
use crate::rng::StreamSeed;
use crate::saw::estimate_survival_lower_bound;

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "twostage", version, about = "Two-stage contact process simulations and estimates")]
pub struct Cli {
    /// Flat TOML file of option values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Output file (default: stdout).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Record elapsed wall-clock seconds in the metadata.
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    JsonLines,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-replica summaries of single runs from a fully-infected origin.
    #[command(allow_negative_numbers = true)]
    Simulate(SimulateArgs),
    /// Survival estimates over a lambda grid.
    #[command(allow_negative_numbers = true)]
    Sweep(SweepArgs),
    /// Bisection for the empirical critical rate.
    #[command(allow_negative_numbers = true)]
    Bisect(BisectArgs),
    /// Critical-rate estimates across dimensions.
    #[command(allow_negative_numbers = true)]
    Trend(TrendArgs),
    /// First-moment ODE of the linear system.
    #[command(allow_negative_numbers = true)]
    Ode(OdeArgs),
    /// Second-moment survival lower bound from walk pairs.
    #[command(allow_negative_numbers = true)]
    Sawbound(SawboundArgs),
    /// Exact-chain and enumeration cross-checks.
    #[command(allow_negative_numbers = true)]
    OracleCheck(OracleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ProxyArgs {
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub box_radius: Option<i32>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `box` or `torus`.
    #[arg(long)]
    pub geometry: Option<String>,
    /// Box radius or torus side.
    #[arg(long)]
    pub size: Option<i32>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub replicas: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[command(flatten)]
    pub proxy: ProxyArgs,
    #[arg(long)]
    pub replicas: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BisectOpts {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub probe_replicas: Option<u64>,
    #[arg(long)]
    pub bracket_replicas: Option<u64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[command(flatten)]
    pub proxy: ProxyArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BisectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub opts: BisectOpts,
}

#[derive(Debug, Clone, Args)]
pub struct TrendArgs {
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub ds: Option<Vec<usize>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub opts: BisectOpts,
}

#[derive(Debug, Clone, Args)]
pub struct OdeArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct SawboundArgs {
    #[arg(long)]
    pub d: Option<usize>,
    /// Sets `lambda = theta (1 + gamma + delta) / (2 d gamma)`.
    #[arg(long, conflicts_with = "lambda")]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub replicas: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// `all`, `rates`, `transient`, `ring` or `union`.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub replicas: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(Error::Domain(_) | Error::Parameter(_)) | CliError::Config(_) => 2,
            CliError::Lib(Error::Bracket(_) | Error::Resource(_)) => 3,
            CliError::Lib(Error::Contract(_)) | CliError::Io(_) | CliError::ChecksFailed(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Config-file layer. Remembers which keys were read and echoes every
/// resolved value.
struct Layer {
    file: toml::Table,
    used: Mutex<Vec<String>>,
    echo: Mutex<Map<String, Value>>,
}

trait FromToml: Sized + Clone + Into<Value> {
    fn from_toml(v: &toml::Value) -> Option<Self>;
}

impl FromToml for f64 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
}

impl FromToml for u64 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
}

impl FromToml for usize {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
}

impl FromToml for i32 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| i32::try_from(i).ok())
    }
}

impl FromToml for String {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_str().map(str::to_owned)
    }
}

impl<T: FromToml> FromToml for Vec<T> {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_array()?.iter().map(T::from_toml).collect()
    }
}

impl Layer {
    fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Ok(Layer { file, used: Mutex::new(Vec::new()), echo: Mutex::new(Map::new()) })
    }

    fn opt<T: FromToml>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        self.used.lock().unwrap().push(key.to_owned());
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    T::from_toml(raw).ok_or_else(|| CliError::Config(format!("bad value for `{key}`: {raw}")))?,
                ),
                None => None,
            },
        };
        self.echo.lock().unwrap().insert(key.to_owned(), v.clone().map_or(Value::Null, Into::into));
        Ok(v)
    }

    fn get<T: FromToml>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        let v = self.opt(flag, key)?.unwrap_or(default);
        self.echo.lock().unwrap().insert(key.to_owned(), v.clone().into());
        Ok(v)
    }

    fn need<T: FromToml>(&self, flag: Option<T>, key: &str) -> CliResult<T> {
        self.opt(flag, key)?
            .ok_or_else(|| CliError::Lib(Error::Parameter(format!("missing required option --{}", key.replace('_', "-")))))
    }

    fn finish(&self) -> CliResult<Map<String, Value>> {
        let used = self.used.lock().unwrap();
        if let Some(k) = self.file.keys().find(|k| !used.contains(k)) {
            return Err(CliError::Config(format!("unknown key `{k}` for this command")));
        }
        Ok(self.echo.lock().unwrap().clone())
    }
}

fn env_u64(name: &str) -> CliResult<Option<u64>> {
    match std::env::var(name) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::Config(format!("{name}={s} is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_kind(s: &str) -> CliResult<ProcessKind> {
    s.parse().map_err(CliError::Lib)
}

fn model(layer: &Layer, m: &ModelArgs, d_default: usize) -> CliResult<(ProcessKind, usize, f64, f64)> {
    let kind = parse_kind(&layer.get(m.kind.clone(), "kind", "contact".to_owned())?)?;
    let d = layer.get(m.d, "d", d_default)?;
    if d == 0 {
        return Err(Error::Parameter("d must be >= 1".into()).into());
    }
    Ok((kind, d, layer.get(m.gamma, "gamma", 1.0)?, layer.get(m.delta, "delta", 1.0)?))
}

fn proxy(layer: &Layer, a: &ProxyArgs, d: usize) -> CliResult<SurvivalProxy> {
    let def = SurvivalProxy::defaults_for(d);
    let p = SurvivalProxy {
        horizon: layer.get(a.horizon, "horizon", def.horizon)?,
        cap: layer.get(a.cap, "cap", def.cap)?,
        box_radius: layer.get(a.box_radius, "box_radius", def.box_radius)?,
    };
    p.validate()?;
    Ok(p)
}

fn bisect_settings(layer: &Layer, o: &BisectOpts, d_for_proxy: Option<usize>) -> CliResult<BisectSettings> {
    let def = BisectSettings::default();
    let tol = layer.opt(o.tol, "tol")?;
    // Proxy flags given explicitly apply to every dimension.
    let explicit = o.proxy.horizon.is_some() || o.proxy.cap.is_some() || o.proxy.box_radius.is_some();
    let explicit = explicit || ["horizon", "cap", "box_radius"].iter().any(|k| layer.file.contains_key(*k));
    let proxy = match d_for_proxy {
        Some(d) => Some(proxy(layer, &o.proxy, d)?),
        None if explicit => Some(proxy(layer, &o.proxy, 1)?),
        None => None,
    };
    Ok(BisectSettings {
        eps: layer.get(o.eps, "eps", def.eps)?,
        tol,
        probe_replicas: layer.get(o.probe_replicas, "probe_replicas", def.probe_replicas)?,
        bracket_replicas: layer.get(o.bracket_replicas, "bracket_replicas", def.bracket_replicas)?,
        lambda_max: layer.get(o.lambda_max, "lambda_max", def.lambda_max)?,
        proxy,
    })
}

/// A table plus metadata, written as CSV or JSON lines.
struct Report {
    columns: Vec<&'static str>,
    rows: Vec<Vec<Value>>,
    summary: Option<Map<String, Value>>,
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn write_report(out: &mut dyn Write, format: Format, meta: &Map<String, Value>, r: &Report) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            writeln!(out, "# meta {}", Value::Object(meta.clone()))?;
            writeln!(out, "{}", r.columns.join(","))?;
            for row in &r.rows {
                writeln!(out, "{}", row.iter().map(csv_cell).collect::<Vec<_>>().join(","))?;
            }
            if let Some(s) = &r.summary {
                writeln!(out, "# summary {}", Value::Object(s.clone()))?;
            }
        }
        Format::JsonLines => {
            let mut m = Map::new();
            m.insert("record".into(), "meta".into());
            m.extend(meta.clone());
            writeln!(out, "{}", Value::Object(m))?;
            for row in &r.rows {
                let mut m = Map::new();
                m.insert("record".into(), "row".into());
                for (c, v) in r.columns.iter().zip(row) {
                    m.insert((*c).into(), v.clone());
                }
                writeln!(out, "{}", Value::Object(m))?;
            }
            if let Some(s) = &r.summary {
                let mut m = Map::new();
                m.insert("record".into(), "summary".into());
                m.extend(s.clone());
                writeln!(out, "{}", Value::Object(m))?;
            }
        }
    }
    Ok(())
}

fn num(x: f64) -> Value {
    // JSON has no infinities; non-finite values become null.
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn opt_num(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

fn targets(gamma: f64, delta: f64) -> Value {
    json!({ "scaled_limit": num(scaled_target(gamma, delta)) })
}

fn cmd_simulate(layer: &Layer, a: &SimulateArgs, seed: StreamSeed) -> CliResult<(Report, Map<String, Value>)> {
    let (kind, d, gamma, delta) = model(layer, &a.model, 2)?;
    let lambda = layer.need(a.lambda, "lambda")?;
    let p = ProcessParams::new(lambda, gamma, delta)?;
    let geometry = layer.get(a.geometry.clone(), "geometry", "box".to_owned())?;
    let g = match geometry.as_str() {
        "box" => LatticeGeometry::new(d, Domain::Box { radius: layer.get(a.size, "size", 50)? })?,
        "torus" => LatticeGeometry::new(d, Domain::Torus { side: layer.get(a.size, "size", 10)? })?,
        other => return Err(Error::Parameter(format!("geometry `{other}` is not box or torus")).into()),
    };
    let horizon = layer.get(a.horizon, "horizon", 100.0)?;
    let cap = layer.get(a.cap, "cap", 5000usize)?;
    let replicas = layer.get(a.replicas, "replicas", 100u64)?;
    if replicas == 0 {
        return Err(Error::Parameter("replicas must be >= 1".into()).into());
    }
    let opts = SimOptions::new(horizon).with_cap(cap).without_final();
    opts.validate()?;
    let init = SparseConfig::single(SiteCoord::origin(d));
    use rayon::prelude::*;
    let runs = (0..replicas)
        .into_par_iter()
        .map(|r| simulate(kind, &init, &p, &g, &opts, &mut seed.replica(r)))
        .collect::<crate::Result<Vec<_>>>()?;
    let rows = runs
        .iter()
        .enumerate()
        .map(|(r, t)| {
            let outcome = match t.outcome {
                Outcome::Extinct(_) => "extinct",
                Outcome::Horizon => "horizon",
                Outcome::Cap => "cap",
            };
            vec![
                json!(r),
                json!(outcome),
                opt_num(t.extinction_time()),
                json!(t.peak_active),
                json!(t.event_count),
                json!(t.survived()),
            ]
        })
        .collect();
    let survived = runs.iter().filter(|t| t.survived()).count();
    let mut extra = Map::new();
    extra.insert("targets".into(), targets(gamma, delta));
    let summary = json!({ "replicas": replicas, "survived": survived }).as_object().cloned();
    Ok((
        Report {
            columns: vec!["replica", "outcome", "extinction_time", "peak_active", "events", "survived"],
            rows,
            summary,
        },
        extra,
    ))
}

fn survival_rows(d: usize, list: &[crate::critical::SurvivalEstimate]) -> Vec<Vec<Value>> {
    list.iter()
        .map(|e| {
            vec![
                json!(d),
                num(e.lambda),
                json!(e.trials),
                json!(e.survivals),
                num(e.p_hat),
                num(e.ci95.0),
                num(e.ci95.1),
            ]
        })
        .collect()
}

const SURVIVAL_COLUMNS: [&str; 7] = ["d", "lambda", "trials", "survivals", "p_hat", "ci_low", "ci_high"];

fn proxy_json(p: &SurvivalProxy) -> Value {
    json!({ "horizon": num(p.horizon), "cap": p.cap, "box_radius": p.box_radius })
}

fn cmd_sweep(layer: &Layer, a: &SweepArgs, seed: StreamSeed) -> CliResult<(Report, Map<String, Value>)> {
    let (kind, d, gamma, delta) = model(layer, &a.model, 2)?;
    let lambdas = layer.need(a.lambdas.clone(), "lambdas")?;
    let px = proxy(layer, &a.proxy, d)?;
    let replicas = layer.get(a.replicas, "replicas", 2000u64)?;
    let base = ProcessParams::new(0.0, gamma, delta)?;
    for &l in &lambdas {
        base.with_lambda(l).validate()?;
    }
    let list = sweep(kind, d, &base, &lambdas, &px, replicas, seed)?;
    let mut extra = Map::new();
    extra.insert("grid".into(), lambdas.iter().map(|&l| num(l)).collect());
    extra.insert("proxy".into(), proxy_json(&px));
    extra.insert("lower_bound_lambda".into(), num(lower_bound_lambda(d, gamma, delta)));
    extra.insert("targets".into(), targets(gamma, delta));
    Ok((Report { columns: SURVIVAL_COLUMNS.to_vec(), rows: survival_rows(d, &list), summary: None }, extra))
}

fn critical_summary(c: &CriticalEstimate) -> Map<String, Value> {
    let (lo, hi) = c.scaled_interval();
    json!({
        "d": c.d,
        "lambda_hat": num(c.lambda_hat),
        "scaled": num(c.scaled),
        "bracket": [num(c.bracket.0), num(c.bracket.1)],
        "ci_bracket": [opt_num(c.ci_bracket.0), opt_num(c.ci_bracket.1)],
        "scaled_interval": [num(lo), num(hi)],
        "threshold_eps": num(c.threshold_eps),
        "resolution": num(c.resolution),
        "lower_bound_lambda": num(lower_bound_lambda(c.d, c.gamma, c.delta)),
        "target": num(scaled_target(c.gamma, c.delta)),
    })
    .as_object()
    .cloned()
    .unwrap()
}

fn cmd_bisect(layer: &Layer, a: &BisectArgs, seed: StreamSeed) -> CliResult<(Report, Map<String, Value>)> {
    let (kind, d, gamma, delta) = model(layer, &a.model, 4)?;
    let settings = bisect_settings(layer, &a.opts, Some(d))?;
    let base = ProcessParams::new(0.0, gamma, delta)?;
    let c = bisect_critical(kind, d, &base, &settings, seed)?;
    let mut extra = Map::new();
    extra.insert("proxy".into(), proxy_json(&settings.proxy_for(d)));
    extra.insert("targets".into(), targets(gamma, delta));
    let mut columns = vec!["probe"];
    columns.extend(SURVIVAL_COLUMNS);
    let rows = survival_rows(d, &c.probes)
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            r.insert(0, json!(i));
            r
        })
        .collect();
    Ok((Report { columns, rows, summary: Some(critical_summary(&c)) }, extra))
}

fn cmd_trend(layer: &Layer, a: &TrendArgs, seed: StreamSeed) -> CliResult<(Report, Map<String, Value>)> {
    let kind = parse_kind(&layer.get(a.kind.clone(), "kind", "contact".to_owned())?)?;
    let ds = layer.get(a.ds.clone(), "ds", vec![4usize, 6, 8])?;
    let gamma = layer.get(a.gamma, "gamma", 1.0)?;
    let delta = layer.get(a.delta, "delta", 1.0)?;
    let settings = bisect_settings(layer, &a.opts, None)?;
    let table = trend_study(kind, &ds, gamma, delta, &settings, seed)?;
    let rows = table
        .rows
        .iter()
        .map(|c| {
            let (lo, hi) = c.scaled_interval();
            vec![
                json!(c.d),
                num(c.lambda_hat),
                num(c.scaled),
                num(table.target),
                num(lo),
                num(hi),
                json!(c.probes.len()),
            ]
        })
        .collect();
    let mut extra = Map::new();
    extra.insert("targets".into(), targets(gamma, delta));
    extra.insert(
        "proxies".into(),
        ds.iter().map(|&d| (d.to_string(), proxy_json(&settings.proxy_for(d)))).collect::<Map<_, _>>().into(),
    );
    let summary = json!({ "target": num(table.target) }).as_object().cloned();
    Ok((
        Report {
            columns: vec!["d", "lambda_hat", "scaled", "target", "scaled_ci_low", "scaled_ci_high", "probes"],
            rows,
            summary,
        },
        extra,
    ))
}

fn cmd_ode(layer: &Layer, a: &OdeArgs) -> CliResult<(Report, Map<String, Value>)> {
    let d = layer.get(a.d, "d", 5usize)?;
    let lambda = layer.need(a.lambda, "lambda")?;
    let gamma = layer.get(a.gamma, "gamma", 1.0)?;
    let delta = layer.get(a.delta, "delta", 1.0)?;
    let times = layer.get(a.times.clone(), "times", vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0])?;
    if d == 0 {
        return Err(Error::Parameter("d must be >= 1".into()).into());
    }
    let p = ProcessParams::new(lambda, gamma, delta)?;
    let rows = times
        .iter()
        .map(|&t| {
            let (z, th) = solve_moments(d, &p, t)?;
            Ok(vec![num(t), num(z), num(th)])
        })
        .collect::<crate::Result<_>>()?;
    let g = build_g(d, &p);
    let eig: Vec<Value> = g.eigenvalues().iter().map(|c| json!([num(c.re), num(c.im)])).collect();
    let max = max_real_eigenvalue(d, &p);
    let summary = json!({
        "matrix": [[num(g.entries[0][0]), num(g.entries[0][1])], [num(g.entries[1][0]), num(g.entries[1][1])]],
        "eigenvalues": eig,
        "max_real_eigenvalue": num(max),
        "subcritical": max < 0.0,
        "lower_bound_lambda": num(lower_bound_lambda(d, gamma, delta)),
    })
    .as_object()
    .cloned();
    let mut extra = Map::new();
    extra.insert("targets".into(), targets(gamma, delta));
    Ok((Report { columns: vec!["t", "zeta", "theta"], rows, summary }, extra))
}

fn cmd_sawbound(layer: &Layer, a: &SawboundArgs, seed: StreamSeed) -> CliResult<(Report, Map<String, Value>)> {
    let d = layer.get(a.d, "d", 12usize)?;
    let gamma = layer.get(a.gamma, "gamma", 1.0)?;
    let delta = layer.get(a.delta, "delta", 1.0)?;
    let theta = layer.opt(a.theta, "theta")?;
    let lambda = layer.opt(a.lambda, "lambda")?;
    let lambda = match (theta, lambda) {
        (Some(th), None) => th * (1.0 + gamma + delta) / (2.0 * d as f64 * gamma),
        (None, Some(l)) => l,
        _ => return Err(Error::Parameter("give exactly one of --theta and --lambda".into()).into()),
    };
    let n_max = layer.get(a.n_max, "n_max", 2000usize)?;
    let replicas = layer.get(a.replicas, "replicas", 1000u64)?;
    let p = ProcessParams::new(lambda, gamma, delta)?;
    let b = estimate_survival_lower_bound(d, &p, n_max, replicas, seed)?;
    let rows = b
        .points
        .iter()
        .map(|pt| {
            vec![json!(pt.n), num(pt.ln_mean_weight), num(pt.rel_std_err), num(pt.bound), num(pt.ci95.0), num(pt.ci95.1)]
        })
        .collect();
    let f = b.final_point();
    let summary = json!({
        "lambda": num(lambda),
        "theta": num(lambda * 2.0 * d as f64 * gamma / (1.0 + gamma + delta)),
        "drift_period": b.shape.drift_period,
        "drift_band": b.shape.drift_band,
        "bound": num(f.bound),
        "ci95": [num(f.ci95.0), num(f.ci95.1)],
        "convergence_drift": num(b.drift()),
        "top_share": num(b.top_share),
        "heavy_tail": b.heavy_tail,
    })
    .as_object()
    .cloned();
    Ok((
        Report { columns: vec!["n", "ln_mean_weight", "rel_std_err", "bound", "ci_low", "ci_high"], rows, summary },
        Map::new(),
    ))
}

fn cmd_oracle(layer: &Layer, a: &OracleArgs, seed: StreamSeed) -> CliResult<(Report, Map<String, Value>, usize)> {
    let suite = layer.get(a.suite.clone(), "suite", "all".to_owned())?;
    let known = ["all", "rates", "transient", "ring", "union"];
    if !known.contains(&suite.as_str()) {
        return Err(Error::Parameter(format!("unknown suite `{suite}`")).into());
    }
    let p = ProcessParams::new(
        layer.get(a.lambda, "lambda", 1.2)?,
        layer.get(a.gamma, "gamma", 1.5)?,
        layer.get(a.delta, "delta", 0.5)?,
    )?;
    let replicas = layer.get(a.replicas, "replicas", 20_000u64)?;
    let on = |s: &str| suite == "all" || suite == s;
    let mut rows: Vec<Vec<Value>> = Vec::new();
    let mut push = |suite: &str, check: String, expected: f64, observed: f64, tol: f64| {
        let pass = (observed - expected).abs() <= tol;
        rows.push(vec![json!(suite), json!(check), num(expected), num(observed), num(tol), json!(pass)]);
    };
    let ring = LatticeGeometry::torus(1, 3)?;
    let kinds = [ProcessKind::Contact, ProcessKind::Sir];
    if on("rates") {
        for kind in kinds {
            let chain = build_exact(kind, &ring, &p)?;
            let (checked, bad) = rate_table_check(&chain, &ring, &p)?;
            push("rates", format!("{} ring rows ({checked} transitions)", kind.name()), 0.0, bad as f64, 0.0);
        }
    }
    if on("transient") {
        let c = build_single_site(ProcessKind::Contact, 1, &p)?;
        let s = build_single_site(ProcessKind::Sir, 1, &p)?;
        let state = |chain: &crate::oracle::ExactChain, st: SiteState| {
            let mut cfg = SparseConfig::new();
            cfg.set(SiteCoord::origin(1), st);
            chain.index_of(&cfg)
        };
        let (g, dl) = (p.gamma, p.delta);
        for t in [0.5, 1.0, 2.0] {
            let v = transient(&c, state(&c, SiteState::Full)?, t)?;
            push("transient", format!("contact site 2->0 t={t}"), 1.0 - (-t).exp(), v[state(&c, SiteState::Healthy)?], 1e-10);
            let v = transient(&s, state(&s, SiteState::Semi)?, t)?;
            let want = g / (g + dl) * ((-t).exp() - (-(1.0 + g + dl) * t).exp());
            push("transient", format!("sir site 1->2 t={t}"), want, v[state(&s, SiteState::Full)?], 1e-10);
        }
    }
    if on("ring") {
        for kind in kinds {
            for c in ring_marginal_checks(kind, &p, &[0.5, 1.0, 2.0], replicas, seed.derive_str(kind.name()))? {
                push(
                    "ring",
                    format!("{} P(O={}) t={}", kind.name(), c.state.code(), c.time),
                    c.exact,
                    c.estimate,
                    3.0 * c.std_err,
                );
            }
        }
    }
    if on("union") {
        let r = brute_union_spaces(1000, &mut seed.derive_str("union").replica(0))?;
        push("union", format!("violations over {} spaces", r.spaces), 0.0, r.violations as f64, 0.0);
    }
    let failed = rows.iter().filter(|r| r[5] == json!(false)).count();
    let summary = json!({ "checks": rows.len(), "failed": failed }).as_object().cloned();
    Ok((
        Report { columns: vec!["suite", "check", "expected", "observed", "tolerance", "pass"], rows, summary },
        Map::new(),
        failed,
    ))
}

/// Parses `args` and runs the command, writing to `--output` or `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    execute(&cli, stdout)
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let start = Instant::now();
    let layer = Layer::load(cli.config.as_ref())?;
    let seed = match layer.opt(cli.seed, "seed")? {
        Some(s) => s,
        None => env_u64("TWOSTAGE_SEED")?.unwrap_or(DEFAULT_SEED),
    };
    let threads = match layer.opt(cli.threads, "threads")? {
        Some(t) => Some(t),
        None => env_u64("TWOSTAGE_THREADS")?.map(|t| t as usize),
    };
    let format = match layer.opt(cli.format.map(|f| format_name(f).to_owned()), "format")? {
        Some(s) => parse_format(&s)?,
        None => Format::Csv,
    };
    layer.opt(cli.output.as_ref().map(|p| p.display().to_string()), "output")?;
    {
        let mut echo = layer.echo.lock().unwrap();
        echo.insert("seed".into(), seed.into());
        echo.insert("threads".into(), threads.map_or(Value::Null, Into::into));
    }
    if threads == Some(0) {
        return Err(Error::Parameter("threads must be >= 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let stream = StreamSeed::new(seed);
    let (name, result) = pool.install(|| match &cli.command {
        Command::Simulate(a) => ("simulate", cmd_simulate(&layer, a, stream).map(|(r, m)| (r, m, 0))),
        Command::Sweep(a) => ("sweep", cmd_sweep(&layer, a, stream).map(|(r, m)| (r, m, 0))),
        Command::Bisect(a) => ("bisect", cmd_bisect(&layer, a, stream).map(|(r, m)| (r, m, 0))),
        Command::Trend(a) => ("trend", cmd_trend(&layer, a, stream).map(|(r, m)| (r, m, 0))),
        Command::Ode(a) => ("ode", cmd_ode(&layer, a).map(|(r, m)| (r, m, 0))),
        Command::Sawbound(a) => ("sawbound", cmd_sawbound(&layer, a, stream).map(|(r, m)| (r, m, 0))),
        Command::OracleCheck(a) => ("oracle-check", cmd_oracle(&layer, a, stream)),
    });
    let (report, extra, failed) = result?;
    let mut meta = Map::new();
    meta.insert("tool".into(), "twostage".into());
    meta.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    meta.insert("command".into(), name.into());
    meta.insert("seed".into(), seed.into());
    meta.insert("config".into(), Value::Object(layer.finish()?));
    meta.extend(extra);
    if cli.timing {
        meta.insert("wall_clock_s".into(), num(start.elapsed().as_secs_f64()));
    }
    match &cli.output {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_report(&mut f, format, &meta, &report)?;
            f.flush()?;
        }
        None => write_report(stdout, format, &meta, &report)?,
    }
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::JsonLines => "json-lines",
    }
}

fn parse_format(s: &str) -> CliResult<Format> {
    match s {
        "csv" => Ok(Format::Csv),
        "json-lines" | "jsonl" => Ok(Format::JsonLines),
        other => Err(CliError::Config(format!("unknown format `{other}`"))),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> CliResult<String> {
        let mut buf = Vec::new();
        let mut full = vec!["twostage"];
        full.extend_from_slice(args);
        run(full, &mut buf)?;
        Ok(String::from_utf8(buf).unwrap())
    }

    #[test]
    fn simulate_rows_and_determinism() {
        let args = ["simulate", "--kind", "contact", "--d", "4", "--lambda", "0.5", "--gamma", "1", "--delta", "1", "--replicas", "100", "--seed", "7"];
        let a = run_str(&args).unwrap();
        let lines: Vec<_> = a.lines().collect();
        assert!(lines[0].starts_with("# meta "));
        assert_eq!(lines[1], "replica,outcome,extinction_time,peak_active,events,survived");
        assert_eq!(lines.len(), 2 + 100 + 1);
        assert_eq!(a, run_str(&args).unwrap());
        assert!(lines[0].contains("\"seed\":7"));
    }

    #[test]
    fn negative_lambda_is_a_validation_error() {
        let e = run_str(&["simulate", "--lambda", "-1"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = run_str(&["simulate"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = run_str(&["ode", "--lambda", "0.3", "--gamma", "0"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn ode_equality_point() {
        let out = run_str(&["ode", "--d", "5", "--lambda", "0.3", "--gamma", "1", "--delta", "1", "--format", "json-lines"]).unwrap();
        let summary: Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
        assert_eq!(summary["record"], "summary");
        assert!(summary["max_real_eigenvalue"].as_f64().unwrap().abs() < 1e-12);
        let meta: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
        assert_eq!(meta["targets"]["scaled_limit"], 3.0);
    }

    #[test]
    fn config_file_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "lambda = 0.3\nd = 5\ngamma = 1\nseed = 11\n").unwrap();
        let cfg = path.to_str().unwrap();
        let out = run_str(&["ode", "--config", cfg]).unwrap();
        assert!(out.contains("\"seed\":11"));
        assert!(out.contains("\"lambda\":0.3"));
        let out = run_str(&["ode", "--config", cfg, "--lambda", "0.31", "--seed", "12"]).unwrap();
        assert!(out.contains("\"lambda\":0.31") && out.contains("\"seed\":12"));
        std::fs::write(&path, "lambda = 0.3\nbogus = 1\n").unwrap();
        assert_eq!(run_str(&["ode", "--config", cfg]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn sawbound_resolves_lambda_from_theta() {
        let out = run_str(&["sawbound", "--d", "12", "--theta", "1.5", "--n-max", "200", "--replicas", "200"]).unwrap();
        let summary = out.lines().last().unwrap().strip_prefix("# summary ").unwrap();
        let v: Value = serde_json::from_str(summary).unwrap();
        assert!((v["lambda"].as_f64().unwrap() - 1.5 * 3.0 / 24.0).abs() < 1e-15);
        assert!(v["bound"].as_f64().unwrap() > 0.0);
        assert!(run_str(&["sawbound", "--d", "12"]).is_err());
    }

    #[test]
    fn sweep_echoes_grid_and_bisect_lists_probes() {
        let out = run_str(&["sweep", "--d", "2", "--lambdas", "0.3,0.9", "--replicas", "50", "--horizon", "5", "--cap", "100"]).unwrap();
        assert!(out.lines().next().unwrap().contains("\"grid\":[0.3,0.9]"));
        assert_eq!(out.lines().count(), 4);
        let out = run_str(&[
            "bisect", "--d", "3", "--probe-replicas", "100", "--bracket-replicas", "100", "--tol", "0.05", "--horizon", "10", "--cap", "200", "--box-radius", "15",
        ])
        .unwrap();
        let probes = out.lines().filter(|l| !l.starts_with('#')).count() - 1;
        assert!(probes >= 3);
        assert!(out.contains("\"lambda_hat\""));
    }

    #[test]
    fn bracket_failure_exit_code() {
        let e = run_str(&["bisect", "--d", "3", "--lambda-max", "0.4", "--probe-replicas", "50", "--bracket-replicas", "50", "--horizon", "100", "--cap", "100"]).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn oracle_suites_pass() {
        let out = run_str(&["oracle-check", "--suite", "rates"]).unwrap();
        assert!(out.contains("rates,contact"));
        run_str(&["oracle-check", "--suite", "transient"]).unwrap();
        run_str(&["oracle-check", "--suite", "union"]).unwrap();
        assert_eq!(run_str(&["oracle-check", "--suite", "nope"]).unwrap_err().exit_code(), 2);
    }
}
