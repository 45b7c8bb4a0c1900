//! Config-driven experiment runner.
//!
//! Every experiment writes its CSV/JSON outputs into the run directory and
//! finishes with `manifest.json`, which lists every file in the directory
//! with its SHA-256. The manifest is written through a temporary file and a
//! rename, so its presence marks a completed run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::boundary::{
    drift_experiment, escape_experiment, gradient_expansion_check, DriftConfig, EscapeConfig, EscapeResult,
};
use crate::correlations::{
    build_a, build_b, certify, correlation, estimate_ck_norm_with, gamma_upper_bound, BallSpec, CertificateStatus,
    GammaConfig, GammaOutcome, DEFAULT_NORM_POINTS,
};
use crate::error::{Error, Result};
use crate::flow::{cusp_geodesic_oracle, integrate, IntegratorOptions, Output, PhasePoint};
use crate::geometry::{sectional_curvature, ManifoldPoint, MetricSpec, TangentVector};
use crate::measure::{
    minkowski_codimension, power_law_fit, uniform_s3, volume_scaling, BaseDensity, FitPoint, FitResult, RegionFamily,
    ScalingResult,
};
use crate::seed::{par_indexed, stream};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "WPFLOW_OUT";
pub const MANIFEST: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "wpflow",
    version,
    about = "Geodesic-flow experiments on the model cusp manifold"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config with optional [metric] and [params] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (required here or in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; WPFLOW_OUT takes precedence.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Curvature law and gradient expansion on sample points.
    GeometryReport,
    /// One trajectory from `point` / `direction`.
    Geodesic,
    /// Escape-time scaling and the calibrated window.
    Escape,
    /// Drift of r against f.
    Drift,
    /// Volume scaling of E_rho and V_eps.
    Volumes,
    /// Minkowski codimension of the boundary.
    Codim,
    /// Correlation of a and b_eps at a list of times.
    Correlation,
    /// Support-overlap certificate over an eps sweep.
    Certificate,
    /// Upper bound on the polynomial mixing exponent.
    GammaBound,
    /// Reduced-size run of every module invariant.
    Validate,
}

impl Command {
    pub fn id(self) -> &'static str {
        match self {
            Command::GeometryReport => "geometry-report",
            Command::Geodesic => "geodesic",
            Command::Escape => "escape",
            Command::Drift => "drift",
            Command::Volumes => "volumes",
            Command::Codim => "codim",
            Command::Correlation => "correlation",
            Command::Certificate => "certificate",
            Command::GammaBound => "gamma-bound",
            Command::Validate => "validate",
        }
    }
}

/// Experiment parameters; unset fields take per-experiment defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub eps: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub n: Option<usize>,
    pub n_per_half: Option<usize>,
    pub n_norm: Option<usize>,
    pub n_certificate: Option<usize>,
    pub n_calibration: Option<usize>,
    pub k: Option<usize>,
    pub c0: Option<f64>,
    pub t: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub point: Option<[f64; 4]>,
    /// Orthonormal-frame components of the initial direction.
    pub direction: Option<[f64; 4]>,
    pub points: Option<usize>,
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
    pub bins: Option<usize>,
    pub n_per_bin: Option<usize>,
    pub window_factor: Option<f64>,
    pub fixed_scale: Option<f64>,
    pub ball_center: Option<[f64; 4]>,
    pub ball_radius: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    metric: Option<MetricSpec>,
    params: Params,
}

/// The fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: &'static str,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub metric: MetricSpec,
    pub params: Params,
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                toml::from_str::<ConfigFile>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ConfigFile::default(),
        };
        let experiment = cli.command.id();
        let seed = cli
            .seed
            .or(file.seed)
            .ok_or_else(|| Error::Config("a seed is required (--seed or `seed` in the config)".into()))?;
        let out = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .or_else(|| cli.out.clone())
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{experiment}-s{seed}")));
        let workers = cli.workers.or(file.workers);
        if workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let metric = file.metric.unwrap_or_default();
        metric.validate()?;
        let cfg = RunConfig {
            experiment,
            seed,
            out,
            workers,
            metric,
            params: file.params,
        };
        cfg.check_params()?;
        Ok(cfg)
    }

    fn check_params(&self) -> Result<()> {
        let p = &self.params;
        for (name, list) in [("eps", &p.eps), ("rho", &p.rho), ("t", &p.t)] {
            if let Some(list) = list {
                if list.is_empty()
                    || list
                        .iter()
                        .any(|v| !v.is_finite() || *v < 0.0 || (name != "t" && *v == 0.0))
                {
                    return Err(Error::Config(format!(
                        "params.{name}: values must be finite and positive"
                    )));
                }
            }
        }
        for (name, v) in [
            ("c0", p.c0),
            ("horizon", p.horizon),
            ("dt", p.dt),
            ("f_min", p.f_min),
            ("f_max", p.f_max),
            ("window_factor", p.window_factor),
            ("fixed_scale", p.fixed_scale),
            ("ball_radius", p.ball_radius),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Config(format!("params.{name} must be positive, got {v}")));
                }
            }
        }
        for (name, v) in [
            ("n", p.n),
            ("n_per_half", p.n_per_half),
            ("n_norm", p.n_norm),
            ("n_certificate", p.n_certificate),
            ("n_calibration", p.n_calibration),
            ("points", p.points),
            ("bins", p.bins),
            ("n_per_bin", p.n_per_bin),
        ] {
            if v == Some(0) {
                return Err(Error::Config(format!("params.{name} must be at least 1")));
            }
        }
        if let Some(k) = p.k {
            if !(1..=3).contains(&k) {
                return Err(Error::Config(format!("params.k must be 1, 2 or 3, got {k}")));
            }
        }
        Ok(())
    }

    fn ball(&self) -> BallSpec {
        let d = BallSpec::default();
        BallSpec {
            center: self.params.ball_center.unwrap_or(d.center),
            radius: self.params.ball_radius.unwrap_or(d.radius),
        }
    }

    fn eps_or(&self, default: &[f64]) -> Vec<f64> {
        self.params.eps.clone().unwrap_or_else(|| default.to_vec())
    }
}

/// One assertion of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn within(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            target,
            tolerance,
            passed: (value - target).abs() <= tolerance,
        }
    }

    fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            target: bound,
            tolerance: 0.0,
            passed: value < bound,
        }
    }

    fn flag(name: impl Into<String>, ok: bool) -> Self {
        Check {
            name: name.into(),
            value: ok as u8 as f64,
            target: 1.0,
            tolerance: 0.0,
            passed: ok,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub started: String,
    pub finished: String,
    /// `passed`, `assertion_failed` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub files: Vec<FileEntry>,
}

/// Output sink for one run.
pub struct Run {
    cfg: RunConfig,
    summary: BTreeMap<String, Value>,
}

impl Run {
    fn file_name(&self, name: &str) -> PathBuf {
        self.cfg
            .out
            .join(format!("{}-s{}-{}", self.cfg.experiment, self.cfg.seed, name))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.file_name(&format!("{name}.csv")))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON result embedding the metric, the seed and the payload.
    pub fn write_json<T: Serialize>(&self, name: &str, payload: &T) -> Result<()> {
        let doc = json!({
            "experiment": self.cfg.experiment,
            "seed": self.cfg.seed,
            "metric": self.cfg.metric,
            "params": self.cfg.params,
            "result": payload,
        });
        let mut f = fs::File::create(self.file_name(&format!("{name}.json")))?;
        serde_json::to_writer_pretty(&mut f, &doc)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    fn note(&mut self, key: &str, v: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            list_files(&path, base, out)?;
            continue;
        }
        let rel = path
            .strip_prefix(base)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST || rel.starts_with(".manifest") {
            continue;
        }
        out.push(FileEntry {
            bytes: e.metadata()?.len(),
            sha256: sha256_file(&path)?,
            path: rel,
        });
    }
    Ok(())
}

fn write_manifest(m: &RunManifest) -> Result<()> {
    let tmp = m.config.out.join(".manifest.json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, m)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, m.config.out.join(MANIFEST))?;
    Ok(())
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::Precondition(_)
        | Error::NonPositive { .. }
        | Error::RegionOverlap(_)
        | Error::FitWindow(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Runs a resolved configuration: outputs, then the manifest. Returns the
/// manifest and the exit code.
pub fn run(cfg: RunConfig) -> Result<(RunManifest, i32)> {
    fs::create_dir_all(&cfg.out)?;
    let started = chrono::Utc::now().to_rfc3339();
    let mut run = Run {
        cfg: cfg.clone(),
        summary: BTreeMap::new(),
    };
    let outcome = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(|| dispatch(&mut run)),
        None => dispatch(&mut run),
    };
    let (status, error, checks, code) = match outcome {
        Ok(checks) => {
            let ok = checks.iter().all(|c| c.passed);
            let status = if ok { "passed" } else { "assertion_failed" };
            (status, None, checks, if ok { EXIT_OK } else { EXIT_ASSERTION })
        }
        Err(e) => ("failed", Some(e.to_string()), Vec::new(), exit_code_for(&e)),
    };
    let mut files = Vec::new();
    list_files(&cfg.out, &cfg.out, &mut files)?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        status: status.to_string(),
        error,
        summary: run.summary,
        checks,
        files,
    };
    write_manifest(&manifest)?;
    Ok((manifest, code))
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return EXIT_CONFIG;
        }
    };
    match run(cfg) {
        Ok((m, code)) => {
            for c in m.checks.iter().filter(|c| !c.passed) {
                eprintln!(
                    "FAILED {}: value {} target {} tolerance {}",
                    c.name, c.value, c.target, c.tolerance
                );
            }
            if let Some(e) = &m.error {
                eprintln!("error: {e}");
            }
            println!(
                "{} {} -> {}",
                m.config.experiment,
                m.status,
                m.config.out.join(MANIFEST).display()
            );
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(run: &mut Run) -> Result<Vec<Check>> {
    match run.cfg.experiment {
        "geometry-report" => geometry_report(run),
        "geodesic" => geodesic(run),
        "escape" => escape(run),
        "drift" => drift(run),
        "volumes" => volumes(run),
        "codim" => codim(run),
        "correlation" => correlation_run(run),
        "certificate" => certificate(run),
        "gamma-bound" => gamma(run),
        "validate" => validate(run),
        other => Err(Error::Config(format!("unknown experiment {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Plot data

#[derive(Serialize)]
struct ScalingRow {
    param: f64,
    estimate: f64,
    stderr: f64,
    fit_value: f64,
}

#[derive(Serialize)]
struct EscapePlotRow {
    eps: f64,
    min_t: f64,
    median_t: f64,
    fit: f64,
}

#[derive(Serialize)]
struct GammaPlotRow {
    eps: f64,
    m: f64,
    n_k: f64,
    t: f64,
    implied_gamma: f64,
}

/// Figure data a plotting tool can read directly.
pub enum PlotData<'a> {
    Scaling { name: &'a str, result: &'a ScalingResult },
    Escape(&'a EscapeResult),
    Gamma(&'a crate::correlations::GammaReport),
}

pub fn emit_plot_data(run: &Run, data: PlotData<'_>) -> Result<()> {
    match data {
        PlotData::Scaling { name, result } => {
            let rows: Vec<ScalingRow> = result
                .points
                .iter()
                .map(|p| ScalingRow {
                    param: p.param,
                    estimate: p.volume,
                    stderr: p.stderr,
                    fit_value: result.fit.predict(p.param),
                })
                .collect();
            run.write_csv(name, &rows)
        }
        PlotData::Escape(r) => {
            let rows: Vec<EscapePlotRow> = r
                .rows
                .iter()
                .map(|row| EscapePlotRow {
                    eps: row.eps,
                    min_t: row.min_t,
                    median_t: row.median_t,
                    fit: r.fit.predict(row.eps),
                })
                .collect();
            run.write_csv("escape-scaling", &rows)
        }
        PlotData::Gamma(r) => {
            let rows: Vec<GammaPlotRow> = r
                .rows
                .iter()
                .map(|row| GammaPlotRow {
                    eps: row.eps,
                    m: row.m,
                    n_k: row.n_k,
                    t: row.t,
                    implied_gamma: row.implied_gamma,
                })
                .collect();
            run.write_csv("gamma", &rows)
        }
    }
}

// ---------------------------------------------------------------------------
// Experiments

const ESCAPE_EPS: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
const RHO_SWEEP: [f64; 6] = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125];
const EPS_SWEEP: [f64; 6] = [0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625];

fn fit_summary(f: &FitResult) -> Value {
    json!({ "exponent": f.exponent, "ci": [f.ci_low, f.ci_high], "n_points": f.n_points })
}

#[derive(Serialize)]
struct CurvatureRow {
    x: f64,
    curvature: f64,
    curvature_x2: f64,
    rel_err: f64,
}

fn curvature_rows(points: usize) -> Result<Vec<CurvatureRow>> {
    // the law is stated for the uncoupled metric
    let spec = MetricSpec::with_eta(0.0);
    (0..points)
        .map(|i| {
            let x = 0.05 + 0.95 * i as f64 / (points.max(2) - 1) as f64;
            let p = ManifoldPoint::new(x, 0.3, 0.2, 0.1, &spec);
            let k = sectional_curvature(
                &p,
                (
                    &TangentVector::new(1.0, 0.0, 0.0, 0.0),
                    &TangentVector::new(0.0, 1.0, 0.0, 0.0),
                ),
                &spec,
            )?;
            Ok(CurvatureRow {
                x,
                curvature: k,
                curvature_x2: k * x * x,
                rel_err: ((k * x * x + 1.5) / 1.5).abs(),
            })
        })
        .collect()
}

fn gradient_samples(n: usize, seed: u64, spec: &MetricSpec) -> Vec<PhasePoint> {
    let mut rng = stream(seed, "gradient", 0);
    (0..n)
        .map(|i| {
            let x = 0.05 + 0.85 * i as f64 / (n.max(2) - 1) as f64;
            PhasePoint::from_frame(ManifoldPoint::new(x, 0.1, 0.2, 0.3, spec), uniform_s3(&mut rng), spec)
        })
        .collect()
}

fn geometry_report(run: &mut Run) -> Result<Vec<Check>> {
    let points = run.cfg.params.points.unwrap_or(100);
    let rows = curvature_rows(points)?;
    run.write_csv("curvature", &rows)?;
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let grad = gradient_expansion_check(
        &gradient_samples(points, run.cfg.seed, &MetricSpec::with_eta(0.0)),
        &MetricSpec::with_eta(0.0),
    )?;
    run.write_json("gradient", &grad)?;
    run.note("curvature_max_rel_err", worst);
    run.note("gradient_c_star", grad.c_star);
    run.note("gradient_reference_constant", grad.reference_constant);
    let mut checks = vec![
        Check::below("curvature K x^2 = -1.5 (rel err)", worst, 1e-6),
        Check::below("gradient orthogonal part", grad.max_orthogonal, 1e-10),
    ];
    if let Some(s) = &grad.inverse_f_slope {
        checks.push(Check::within("gradient 1/f slope", s.exponent, 1.0, 1e-6));
    }
    Ok(checks)
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    x: f64,
    tau: f64,
    y1: f64,
    y2: f64,
    vx: f64,
    vtau: f64,
    vy1: f64,
    vy2: f64,
    f: f64,
    r: f64,
}

fn geodesic(run: &mut Run) -> Result<Vec<Check>> {
    let spec = run.cfg.metric.clone();
    let p = run.cfg.params.point.unwrap_or([0.5, 0.0, 0.0, 0.0]);
    let w = run.cfg.params.direction.unwrap_or([0.6, 0.0, 0.8, 0.0]);
    let horizon = run.cfg.params.horizon.unwrap_or(10.0);
    let dt = run.cfg.params.dt.unwrap_or(0.05);
    spec.check_domain(p[0])?;
    if w.iter().all(|c| *c == 0.0) {
        return Err(Error::Config("params.direction must be nonzero".into()));
    }
    let v0 = PhasePoint::from_frame(ManifoldPoint::new(p[0], p[1], p[2], p[3], &spec), w, &spec);
    let opts = IntegratorOptions {
        output: Output::Uniform(dt),
        ..IntegratorOptions::default()
    };
    let tr = integrate(&v0, horizon, &spec, &opts)?;
    let rows: Vec<TrajectoryRow> = tr
        .samples
        .iter()
        .map(|s| {
            let b = crate::boundary::boundary_state(&s.state, &spec);
            let (q, v) = (s.state.point, s.state.velocity);
            TrajectoryRow {
                t: s.t,
                x: q.x,
                tau: q.tau,
                y1: q.y1,
                y2: q.y2,
                vx: v.vx,
                vtau: v.vtau,
                vy1: v.vy1,
                vy2: v.vy2,
                f: b.f,
                r: b.r,
            }
        })
        .collect();
    run.write_csv("trajectory", &rows)?;
    run.write_json(
        "trajectory",
        &json!({ "stats": tr.stats, "events": tr.events, "termination": tr.termination, "samples": rows.len() }),
    )?;
    run.note("max_energy_drift", tr.stats.max_energy_drift);
    Ok(vec![Check::below(
        "energy drift",
        tr.stats.max_energy_drift,
        opts.energy_tolerance,
    )])
}

fn run_escape(cfg: &RunConfig, eps: Vec<f64>, n_per_half: usize, seed: u64) -> Result<EscapeResult> {
    escape_experiment(
        &EscapeConfig {
            eps_list: eps,
            n_per_half,
        },
        &cfg.metric,
        seed,
    )
}

fn escape(run: &mut Run) -> Result<Vec<Check>> {
    let eps = run.cfg.eps_or(&ESCAPE_EPS);
    let n = run.cfg.params.n_per_half.unwrap_or(EscapeConfig::default().n_per_half);
    let r = run_escape(&run.cfg, eps, n, run.cfg.seed)?;
    run.write_csv("escape-table", &r.rows)?;
    emit_plot_data(run, PlotData::Escape(&r))?;
    run.write_json("result", &r)?;
    run.note("slope", fit_summary(&r.fit));
    run.note("c0", r.c0);
    run.note("violations", r.total_violations);
    Ok(vec![
        Check::within("escape slope", r.fit.exponent, -1.0, 0.15),
        Check::flag("no violations in the calibrated window", r.total_violations == 0),
    ])
}

#[derive(Serialize)]
struct DriftRow {
    f: f64,
    n: usize,
    mean_abs_r_prime: f64,
    stderr: f64,
    max_abs_r_prime: f64,
    fit_value: f64,
}

fn drift(run: &mut Run) -> Result<Vec<Check>> {
    let d = DriftConfig::default();
    let p = &run.cfg.params;
    let cfg = DriftConfig {
        f_min: p.f_min.unwrap_or(d.f_min),
        f_max: p.f_max.unwrap_or(d.f_max),
        bins: p.bins.unwrap_or(d.bins),
        n_per_bin: p.n_per_bin.unwrap_or(d.n_per_bin),
        spacing: d.spacing,
    };
    let r = drift_experiment(&cfg, &run.cfg.metric, run.cfg.seed)?;
    let rows: Vec<DriftRow> = r
        .bins
        .iter()
        .map(|b| DriftRow {
            f: b.f,
            n: b.n,
            mean_abs_r_prime: b.mean_abs_r_prime,
            stderr: b.stderr,
            max_abs_r_prime: b.max_abs_r_prime,
            fit_value: r.fit.as_ref().map_or(f64::NAN, |f| f.predict(b.f)),
        })
        .collect();
    run.write_csv("drift", &rows)?;
    run.write_json(
        "result",
        &json!({ "bins": r.bins, "fit": r.fit, "degenerate": r.degenerate,
        "max_abs_r_prime": r.max_abs_r_prime, "b_estimate": r.b_estimate, "failed": r.failed }),
    )?;
    run.note("max_abs_r_prime", r.max_abs_r_prime);
    if run.cfg.metric.eta == 0.0 {
        return Ok(vec![Check::below(
            "drift vanishes at eta = 0",
            r.max_abs_r_prime,
            1e-10,
        )]);
    }
    let fit = r
        .fit
        .as_ref()
        .ok_or_else(|| Error::FitWindow("drift is degenerate".into()))?;
    run.note("exponent", fit_summary(fit));
    run.note("b_estimate", r.b_estimate);
    Ok(vec![Check::within("drift exponent", fit.exponent, 3.0, 0.3)])
}

fn volumes(run: &mut Run) -> Result<Vec<Check>> {
    let n = run.cfg.params.n.unwrap_or(100_000);
    let rho = run.cfg.params.rho.clone().unwrap_or_else(|| RHO_SWEEP.to_vec());
    let eps = run.cfg.eps_or(&EPS_SWEEP);
    let e = volume_scaling(RegionFamily::ERho, &rho, n, &run.cfg.metric, run.cfg.seed)?;
    let v = volume_scaling(RegionFamily::VEps, &eps, n, &run.cfg.metric, run.cfg.seed)?;
    emit_plot_data(
        run,
        PlotData::Scaling {
            name: "e_rho",
            result: &e,
        },
    )?;
    emit_plot_data(
        run,
        PlotData::Scaling {
            name: "v_eps",
            result: &v,
        },
    )?;
    run.write_json("result", &json!({ "e_rho": e, "v_eps": v }))?;
    run.note("e_rho", fit_summary(&e.fit));
    run.note("v_eps", fit_summary(&v.fit));
    Ok(vec![
        Check::within("E_rho exponent", e.fit.exponent, 4.0, 0.1),
        Check::within("V_eps exponent", v.fit.exponent, 8.0, 0.2),
    ])
}

fn codim(run: &mut Run) -> Result<Vec<Check>> {
    let n = run.cfg.params.n.unwrap_or(100_000);
    let eps = run.cfg.eps_or(&EPS_SWEEP);
    let c = minkowski_codimension(&eps, n, &run.cfg.metric, run.cfg.seed)?;
    emit_plot_data(
        run,
        PlotData::Scaling {
            name: "n_eps",
            result: &c.scaling,
        },
    )?;
    run.write_json("result", &c)?;
    run.note("codimension", fit_summary(&c.scaling.fit));
    run.note("exceeds_two", c.exceeds_two);
    Ok(vec![
        Check::within("codimension", c.codimension, 4.0, 0.1),
        Check::flag("codimension exceeds 2", c.exceeds_two),
    ])
}

/// `params.c0` if given, otherwise a calibration escape run over `eps`.
fn resolve_c0(run: &mut Run, eps: &[f64]) -> Result<f64> {
    if let Some(c0) = run.cfg.params.c0 {
        run.note("c0_source", "config");
        run.note("c0", c0);
        return Ok(c0);
    }
    let n = run.cfg.params.n_calibration.unwrap_or(200);
    let seed = crate::seed::sub_seed(run.cfg.seed, "calibration", 0);
    let r = run_escape(&run.cfg, eps.to_vec(), n, seed)?;
    run.write_json("calibration", &r)?;
    run.note("c0_source", "calibration");
    run.note("c0", r.c0);
    Ok(r.c0)
}

#[derive(Serialize)]
struct CorrelationRow {
    t: f64,
    value: f64,
    signed: f64,
    stderr: f64,
    cross: f64,
    int_a: f64,
    int_b: f64,
    n: usize,
    failed: usize,
}

fn correlation_run(run: &mut Run) -> Result<Vec<Check>> {
    let eps = run.cfg.eps_or(&[0.05]);
    let eps = eps[0];
    let ball = run.cfg.ball();
    let spec = run.cfg.metric.clone();
    let a = build_a(&ball, eps, &spec)?;
    let b = build_b(eps, &ball, &spec)?;
    let c0 = resolve_c0(run, &[eps])?;
    let window = 1.0 / (c0 * eps);
    let times = run
        .cfg
        .params
        .t
        .clone()
        .unwrap_or_else(|| vec![0.0, 0.5 * window, window]);
    let n = run.cfg.params.n.unwrap_or(100_000);
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        let c = correlation(
            &a,
            &b,
            t,
            n,
            &spec,
            crate::seed::sub_seed(run.cfg.seed, "correlation", i as u64),
        )?;
        if t > 0.0 && t <= window {
            checks.push(Check::within(
                format!("cross term vanishes at t = {t}"),
                c.cross,
                0.0,
                0.0,
            ));
        }
        rows.push(CorrelationRow {
            t,
            value: c.value,
            signed: c.signed,
            stderr: c.stderr,
            cross: c.cross,
            int_a: c.int_a,
            int_b: c.int_b,
            n: c.n,
            failed: c.failed,
        });
    }
    run.write_csv("correlation", &rows)?;
    run.write_json(
        "result",
        &json!({ "eps": eps, "c0": c0, "window": window, "rows": rows }),
    )?;
    Ok(checks)
}

#[derive(Serialize)]
struct CertificateRow {
    eps: f64,
    t: f64,
    protected_t: f64,
    n: usize,
    violations: usize,
    max_product: f64,
    failed: usize,
    status: CertificateStatus,
}

fn certificate(run: &mut Run) -> Result<Vec<Check>> {
    let eps = run.cfg.eps_or(&ESCAPE_EPS);
    let ball = run.cfg.ball();
    let spec = run.cfg.metric.clone();
    let n = run.cfg.params.n.unwrap_or(100_000);
    let factor = run.cfg.params.window_factor.unwrap_or(1.0);
    let c0 = resolve_c0(run, &eps)?;
    let bs = eps
        .iter()
        .map(|&e| build_b(e, &ball, &spec))
        .collect::<Result<Vec<_>>>()?;
    let eps_max = eps.iter().cloned().fold(0.0, f64::max);
    let a = build_a(&ball, eps_max, &spec)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for (i, (&e, b)) in eps.iter().zip(&bs).enumerate() {
        let rep = certify(
            &a,
            b,
            factor / (c0 * e),
            n,
            &spec,
            crate::seed::sub_seed(run.cfg.seed, "certificate", i as u64),
            c0,
        )?;
        if rep.status != CertificateStatus::Unprotected {
            checks.push(Check::flag(
                format!("certificate at eps = {e}"),
                rep.status == CertificateStatus::Certified,
            ));
        }
        rows.push(CertificateRow {
            eps: e,
            t: rep.t,
            protected_t: rep.protected_t,
            n: rep.n,
            violations: rep.violations,
            max_product: rep.max_product,
            failed: rep.failed,
            status: rep.status,
        });
        reports.push(rep);
    }
    run.write_csv("certificate", &rows)?;
    run.write_json(
        "result",
        &json!({ "c0": c0, "window_factor": factor, "reports": reports }),
    )?;
    run.note("violations", rows.iter().map(|r| r.violations).sum::<usize>());
    run.note("statuses", rows.iter().map(|r| r.status).collect::<Vec<_>>());
    Ok(checks)
}

fn gamma(run: &mut Run) -> Result<Vec<Check>> {
    let eps = run.cfg.eps_or(&ESCAPE_EPS);
    let d = GammaConfig::default();
    let c0 = resolve_c0(run, &eps)?;
    let p = &run.cfg.params;
    let cfg = GammaConfig {
        eps_list: eps,
        k: p.k.unwrap_or(d.k),
        n_integral: p.n.unwrap_or(d.n_integral),
        n_norm: p.n_norm.unwrap_or(d.n_norm),
        n_certificate: p.n_certificate.unwrap_or(d.n_certificate),
        c0,
        ball: run.cfg.ball(),
        fixed_scale: p.fixed_scale,
    };
    let r = gamma_upper_bound(&cfg, &run.cfg.metric, run.cfg.seed)?;
    emit_plot_data(run, PlotData::Gamma(&r))?;
    // which norm growth holds: ε^{-k} or ε^{-2k}
    let norm_fit = power_law_fit(
        &r.rows
            .iter()
            .map(|row| FitPoint::new(row.eps, row.norm_b, None))
            .collect::<Vec<_>>(),
    )?;
    let k = cfg.k as f64;
    let reading = if (norm_fit.exponent + 2.0 * k).abs() < (norm_fit.exponent + k).abs() {
        "eps^-2k"
    } else {
        "eps^-k"
    };
    run.write_json(
        "result",
        &json!({ "report": r, "norm_b_fit": norm_fit, "norm_growth": reading }),
    )?;
    run.note("outcome", r.outcome);
    run.note("gamma_max", r.gamma_max);
    run.note("gamma_ci", r.gamma_ci);
    run.note("m_slope", fit_summary(&r.m_fit));
    run.note("n_slope", fit_summary(&r.n_fit));
    run.note("norm_b_exponent", norm_fit.exponent);
    run.note("norm_growth", reading);
    if cfg.fixed_scale.is_some() {
        return Ok(vec![Check::flag(
            "fixed-scale control shows no obstruction",
            r.outcome == GammaOutcome::NoObstruction,
        )]);
    }
    let target = 8.0 + 2.0 * k;
    Ok(vec![
        Check::flag("all certificates hold", r.outcome == GammaOutcome::Bounded),
        Check::within("gamma_max", r.gamma_max.unwrap_or(f64::NAN), target, 0.05 * target),
    ])
}

// ---------------------------------------------------------------------------
// Validation suite

fn wrapped(a: f64, b: f64, period: f64) -> f64 {
    ((a - b) / period + 0.5).rem_euclid(1.0) * period - 0.5 * period
}

fn random_phase_point(
    seed: u64,
    label: &str,
    i: usize,
    x_lo: f64,
    x_hi: f64,
    cusp_only: bool,
    spec: &MetricSpec,
) -> PhasePoint {
    use rand::Rng;
    let mut rng = stream(seed, label, i as u64);
    let x = x_lo + (x_hi - x_lo) * rng.random::<f64>();
    let p = ManifoldPoint::new(x, rng.random(), rng.random(), rng.random(), spec);
    let mut w = uniform_s3(&mut rng);
    if cusp_only {
        w[2] = 0.0;
        w[3] = 0.0;
    }
    PhasePoint::from_frame(p, w, spec)
}

fn validation_checks(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let flat = MetricSpec::with_eta(0.0);
    let coupled = MetricSpec::with_eta(0.3);

    let worst = curvature_rows(100)?.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    checks.push(Check::below("geometry: curvature law", worst, 1e-6));
    let grad = gradient_expansion_check(&gradient_samples(50, seed, &flat), &flat)?;
    checks.push(Check::below(
        "geometry: gradient orthogonal part",
        grad.max_orthogonal,
        1e-10,
    ));

    let ends = IntegratorOptions {
        output: Output::Endpoints,
        ..IntegratorOptions::default()
    };
    for (name, spec) in [
        ("flow: energy drift eta = 0", &flat),
        ("flow: energy drift eta = 0.3", &coupled),
    ] {
        let d = par_indexed(100, |i| {
            let v = random_phase_point(seed, "validate/energy", i, 0.1, 0.95, false, spec);
            integrate(&v, 10.0, spec, &ends).map(|t| t.stats.max_energy_drift)
        });
        let worst = d
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        checks.push(Check::below(name, worst, 1e-8));
    }

    let grid = IntegratorOptions {
        output: Output::Uniform(0.25),
        ..IntegratorOptions::default()
    };
    let clairaut = par_indexed(50, |i| {
        let v = random_phase_point(seed, "validate/clairaut", i, 0.1, 0.95, false, &flat);
        let p0 = v.point.x.powi(6) * v.velocity.vtau;
        integrate(&v, 10.0, &flat, &grid).map(|t| {
            t.samples
                .iter()
                .map(|s| (s.state.point.x.powi(6) * s.state.velocity.vtau - p0).abs())
                .fold(0.0, f64::max)
        })
    });
    let worst = clairaut
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check::below("flow: Clairaut drift", worst, 1e-8));

    let oracle = par_indexed(30, |i| -> Result<f64> {
        let v = random_phase_point(seed, "validate/oracle", i, 0.3, 0.9, true, &flat);
        let a = integrate(&v, 5.0, &flat, &grid)?;
        let b = cusp_geodesic_oracle(&v, 5.0, &flat, 0.25)?;
        let on_grid = a
            .samples
            .iter()
            .filter(|s| a.events.iter().all(|e| e.t != s.t) || s.t == a.final_time());
        Ok(on_grid
            .zip(&b.samples)
            .map(|(s, o)| {
                (s.state.point.x - o.state.point.x)
                    .abs()
                    .max(wrapped(s.state.point.tau, o.state.point.tau, flat.tau_period).abs())
            })
            .fold(0.0, f64::max))
    });
    let worst = oracle
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check::below("flow: oracle agreement", worst, 1e-6));

    let drift0 = drift_experiment(
        &DriftConfig {
            n_per_bin: 20,
            ..DriftConfig::default()
        },
        &flat,
        seed,
    )?;
    checks.push(Check::below(
        "boundary: drift vanishes at eta = 0",
        drift0.max_abs_r_prime,
        1e-10,
    ));
    let drift = drift_experiment(
        &DriftConfig {
            n_per_bin: 50,
            ..DriftConfig::default()
        },
        &coupled,
        seed,
    )?;
    let exp = drift.fit.as_ref().map_or(f64::NAN, |f| f.exponent);
    checks.push(Check::within("boundary: drift exponent", exp, 3.0, 0.3));

    let esc = escape_experiment(
        &EscapeConfig {
            eps_list: ESCAPE_EPS.to_vec(),
            n_per_half: 50,
        },
        &coupled,
        seed,
    )?;
    checks.push(Check::within("boundary: escape slope", esc.fit.exponent, -1.0, 0.15));
    checks.push(Check::flag("boundary: escape window holds", esc.total_violations == 0));

    let e = volume_scaling(RegionFamily::ERho, &RHO_SWEEP, 20_000, &flat, seed)?;
    checks.push(Check::within("measure: E_rho exponent", e.fit.exponent, 4.0, 0.1));
    let v = volume_scaling(RegionFamily::VEps, &EPS_SWEEP, 20_000, &flat, seed)?;
    checks.push(Check::within("measure: V_eps exponent", v.fit.exponent, 8.0, 0.2));
    let c = minkowski_codimension(&EPS_SWEEP, 20_000, &flat, seed)?;
    checks.push(Check::within("measure: codimension", c.codimension, 4.0, 0.1));
    checks.push(Check::flag("measure: codimension exceeds 2", c.exceeds_two));

    let ball = BallSpec::default();
    let a = build_a(&ball, 0.1, &flat)?;
    // paired estimate on one sample set: mean(a) / mean(1_U)
    let region = ball.region(&flat);
    let prop = region.proposal(1.0, BaseDensity::Liouville, &flat)?;
    let pairs = crate::seed::par_chunked(20_000, seed, "validate/a", |rng| {
        let v = prop.sample(rng, &flat);
        (a.eval(&v, &flat), region.contains(&v, &flat) as u8 as f64)
    });
    let fill = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.iter().map(|p| p.1).sum::<f64>();
    checks.push(Check {
        name: "correlations: a fills half of U".into(),
        value: fill,
        target: 0.5,
        tolerance: 0.0,
        passed: fill >= 0.5,
    });
    let norms: Vec<FitPoint> = ESCAPE_EPS
        .iter()
        .map(|&e| {
            let b = build_b(e, &ball, &flat)?;
            Ok(FitPoint::new(
                e,
                estimate_ck_norm_with(&b, 1, DEFAULT_NORM_POINTS / 10, &flat, seed)?.value,
                None,
            ))
        })
        .collect::<Result<_>>()?;
    checks.push(Check::within(
        "correlations: C^1 norm slope",
        power_law_fit(&norms)?.exponent,
        -2.0,
        0.2,
    ));
    for (i, &e) in ESCAPE_EPS.iter().enumerate() {
        let b = build_b(e, &ball, &flat)?;
        let rep = certify(
            &a,
            &b,
            1.0 / (esc.c0 * e),
            2_000,
            &flat,
            crate::seed::sub_seed(seed, "validate/cert", i as u64),
            esc.c0,
        )?;
        checks.push(Check::flag(
            format!("correlations: certificate eps = {e}"),
            rep.status == CertificateStatus::Certified,
        ));
    }
    Ok(checks)
}

fn validate(run: &mut Run) -> Result<Vec<Check>> {
    let checks = validation_checks(run.cfg.seed)?;
    run.write_csv("checks", &checks)?;
    let failures: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    run.write_json("failures", &failures)?;
    run.note("checks", checks.len());
    run.note("failures", failures.iter().map(|c| c.name.clone()).collect::<Vec<_>>());
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("wpflow").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn seed_is_required() {
        let c = cli(&["drift"]);
        assert!(matches!(RunConfig::resolve(&c), Err(Error::Config(_))));
        let c = cli(&["drift", "--seed", "3", "--out", "somewhere"]);
        let cfg = RunConfig::resolve(&c).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.experiment, "drift");
    }

    #[test]
    fn config_errors_name_the_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "seed = 1\n[params]\nepsilon = [0.1]\n").unwrap();
        let c = cli(&["escape", "--config", path.to_str().unwrap()]);
        let msg = RunConfig::resolve(&c).unwrap_err().to_string();
        assert!(msg.contains("epsilon") && msg.contains("line 3"), "{msg}");

        fs::write(&path, "seed = 1\n[params]\neps = [0.1, -0.2]\n").unwrap();
        let c = cli(&["escape", "--config", path.to_str().unwrap()]);
        assert!(RunConfig::resolve(&c).unwrap_err().to_string().contains("params.eps"));

        fs::write(&path, "seed = 1\n[metric]\neta = 1.5\n").unwrap();
        let c = cli(&["escape", "--config", path.to_str().unwrap()]);
        assert!(RunConfig::resolve(&c).is_err());
    }

    #[test]
    fn check_kinds() {
        assert!(Check::within("a", 1.05, 1.0, 0.1).passed);
        assert!(!Check::within("a", f64::NAN, 1.0, 0.1).passed);
        assert!(Check::below("b", 0.5, 1.0).passed);
        assert!(!Check::flag("c", false).passed);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code_for(&Error::Precondition("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code_for(&Error::TooManyFailures { failed: 2, total: 3 }),
            EXIT_RUNTIME
        );
    }
}
