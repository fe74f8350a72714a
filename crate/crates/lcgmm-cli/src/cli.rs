//! Command-line front end: single registrations, synthetic scan generation,
//! evaluation and the benchmark sweeps.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical
//! failure (posterior collapse, degenerate geometry).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lcgmm::baselines::{icp, IcpConfig};
use lcgmm::geometry::PointCloud;
use lcgmm::metrics::{cloud_rmse, evaluate, transform_rmse, RmseConvention};
use lcgmm::mixture::RegistrationError;
use lcgmm::synth::{derive_seed, sample_blade, synthesize_scan, CorruptionSpec};
use lcgmm::{register, RegistrationConfig, RegistrationReport};

use crate::io::{
    self, append_result, convention_from_name, read_transform, read_xyz, write_transform,
    write_xyz, Method, ResultRow,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Failure with its exit class.
#[derive(Debug)]
pub enum CmdError {
    Input(String),
    Numerical(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Input(_) => EXIT_INPUT,
            CmdError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
    fn message(&self) -> &str {
        match self {
            CmdError::Input(m) | CmdError::Numerical(m) => m,
        }
    }
}

impl From<io::IoError> for CmdError {
    fn from(e: io::IoError) -> Self {
        CmdError::Input(e.to_string())
    }
}

impl From<RegistrationError> for CmdError {
    fn from(e: RegistrationError) -> Self {
        match e {
            RegistrationError::PosteriorCollapse { .. }
            | RegistrationError::DegenerateRotation { .. }
            | RegistrationError::DegenerateCorrespondences { .. }
            | RegistrationError::Geometry(_) => CmdError::Numerical(e.to_string()),
            _ => CmdError::Input(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "lcgmm",
    version,
    about = "Rigid point-cloud registration with a locally consistent Gaussian mixture model"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a model cloud onto a scanned cloud.
    Register(RegisterArgs),
    /// Generate a corrupted synthetic scan from a model cloud.
    Synth(SynthArgs),
    /// Evaluate an estimated transform against the ground truth.
    Eval(EvalArgs),
    /// Run a benchmark sweep over lambda, outlier ratio or noise level.
    Sweep(SweepArgs),
    /// Write a synthetic blade-like model cloud.
    Model(ModelArgs),
}

#[derive(Args)]
struct RegisterArgs {
    /// Scanned cloud (.xyz or ascii .ply).
    #[arg(long)]
    scanned: PathBuf,
    /// Model cloud (.xyz or ascii .ply).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "lcgmm")]
    method: Method,
    /// Local-consistency weight.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Outlier component weight.
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    /// Neighbors per point in the consistency graph.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long = "max-iters", default_value_t = 100)]
    max_iters: usize,
    /// Convergence tolerance (transform change for lcgmm, rms-residual
    /// change for icp).
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// ICP only: fraction of worst residuals dropped per iteration.
    #[arg(long, default_value_t = 0.0)]
    trim: f64,
    /// Where to write the estimated transform (4x4 homogeneous, row-major).
    #[arg(long = "out-transform")]
    out_transform: Option<PathBuf>,
    /// Where to append a one-row result CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Model cloud to corrupt (.xyz or ascii .ply).
    #[arg(long)]
    model: PathBuf,
    /// Scanned-cloud size before outliers.
    #[arg(long)]
    n: usize,
    /// Gaussian noise standard deviation (mm).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Outlier ratio in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// Per-axis rotation range (degrees).
    #[arg(long = "angle-range", default_value_t = 60.0)]
    angle_range: f64,
    /// Per-axis translation range (mm).
    #[arg(long = "trans-range", default_value_t = 10.0)]
    trans_range: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out-scanned")]
    out_scanned: PathBuf,
    /// Ground-truth transform output (maps model into the scanned frame).
    #[arg(long = "out-gt")]
    out_gt: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model cloud the errors are measured over.
    #[arg(long)]
    model: PathBuf,
    /// Ground-truth transform file.
    #[arg(long)]
    gt: PathBuf,
    /// Estimated transform file.
    #[arg(long)]
    est: PathBuf,
    /// Scanned cloud for the thresholded cloud-to-cloud error.
    #[arg(long)]
    scanned: Option<PathBuf>,
    /// Distance threshold for the cloud-to-cloud error (mm).
    #[arg(long, default_value_t = 10.0)]
    threshold: f64,
    /// Emit one CSV row (rmse_mean_then_sqrt,rmse_paper_literal,rot_error,
    /// trans_error,cloud_rmse) instead of the human-readable lines.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Key=value config file; when given, all other flags except --out are
    /// ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep variable: lambda | outliers | noise.
    #[arg(long)]
    mode: Option<String>,
    /// Comma- or space-separated grid values for the sweep variable.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated scanned-cloud sizes.
    #[arg(long = "n-points")]
    n_points: Option<String>,
    /// Comma-separated subset of {lcgmm, icp}.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    outliers: Option<f64>,
    #[arg(long = "angle-range")]
    angle_range: Option<f64>,
    #[arg(long = "trans-range")]
    trans_range: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model cloud path; a built-in blade surface is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "model-points")]
    model_points: Option<usize>,
    #[arg(long = "model-seed")]
    model_seed: Option<u64>,
    /// mean_then_sqrt | paper_literal.
    #[arg(long = "rmse-convention")]
    rmse_convention: Option<String>,
    /// Output CSV path (overrides the config file's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0.
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Register(args) => cmd_register(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Model(args) => cmd_model(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud, CmdError> {
    let cloud = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        io::read_ply(path)?
    } else {
        read_xyz(path)?
    };
    if cloud.is_empty() {
        return Err(CmdError::Input(format!(
            "{}: cloud is empty",
            path.display()
        )));
    }
    Ok(cloud)
}

fn cmd_register(args: RegisterArgs) -> Result<(), CmdError> {
    let scanned = read_cloud(&args.scanned)?;
    let model = read_cloud(&args.model)?;

    let report = run_method(
        args.method,
        &scanned,
        &model,
        &RegistrationConfig {
            lambda: args.lambda,
            outlier_weight: args.omega,
            knn_k: args.k,
            max_iterations: args.max_iters,
            convergence_tol: args.tol,
            ..Default::default()
        },
        args.trim,
    )?;

    println!(
        "method={} iterations={} converged_by={} objective={:.6e} wall_seconds={:.3}",
        args.method,
        report.iterations_run,
        reason_name(&report),
        report.objective_trace.last().copied().unwrap_or(f64::NAN),
        report.wall_time,
    );

    if let Some(path) = &args.out_transform {
        write_transform(&report.transform, path)?;
    }
    if let Some(path) = &args.report {
        append_result(
            &ResultRow {
                trial_id: 0,
                method: args.method,
                lambda: args.lambda,
                outlier_ratio: -1.0,
                noise_sigma: -1.0,
                n_points: scanned.len(),
                k_neighbors: args.k,
                omega: args.omega,
                rmse: -1.0,
                rot_error: -1.0,
                trans_error: -1.0,
                iterations: report.iterations_run,
                wall_seconds: report.wall_time,
                rmse_convention: RmseConvention::default(),
                status: "ok".into(),
            },
            path,
        )?;
    }
    Ok(())
}

fn reason_name(report: &RegistrationReport) -> &'static str {
    match report.converged_by {
        lcgmm::ConvergenceReason::MaxIterations => "max_iterations",
        lcgmm::ConvergenceReason::TransformTolerance => "transform_tolerance",
    }
}

fn run_method(
    method: Method,
    scanned: &PointCloud,
    model: &PointCloud,
    cfg: &RegistrationConfig,
    trim: f64,
) -> Result<RegistrationReport, CmdError> {
    match method {
        Method::Lcgmm => Ok(register(scanned, model, cfg)?),
        Method::Icp => Ok(icp(
            scanned,
            model,
            &IcpConfig {
                max_iterations: cfg.max_iterations,
                convergence_tol: cfg.convergence_tol,
                trim_fraction: trim,
            },
        )?),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CmdError> {
    let model = read_cloud(&args.model)?;
    let spec = CorruptionSpec {
        n_points: args.n,
        noise_sigma: args.noise,
        outlier_ratio: args.outliers,
        angle_range_deg: args.angle_range,
        trans_range: args.trans_range,
        seed: args.seed,
    };
    let (scanned, ground_truth) =
        synthesize_scan(&model, &spec).map_err(|e| CmdError::Input(e.to_string()))?;
    write_xyz(&scanned, &args.out_scanned)?;
    write_transform(&ground_truth, &args.out_gt)?;
    println!(
        "scanned={} points={} gt={}",
        args.out_scanned.display(),
        scanned.len(),
        args.out_gt.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    let model = read_cloud(&args.model)?;
    let t_gt = read_transform(&args.gt)?;
    let t_est = read_transform(&args.est)?;

    let conventional = evaluate(&model, &t_gt, &t_est, RmseConvention::MeanThenSqrt);
    let literal = transform_rmse(&model, &t_gt, &t_est, RmseConvention::SqrtThenDivide);
    let cloud_err = match &args.scanned {
        Some(path) => {
            if !(args.threshold > 0.0) {
                return Err(CmdError::Input("threshold must be positive".into()));
            }
            let scanned = read_cloud(path)?;
            Some(
                cloud_rmse(&scanned, &model, args.threshold)
                    .map_err(|e| CmdError::Numerical(e.to_string()))?,
            )
        }
        None => None,
    };

    if args.csv {
        let mut line = format!(
            "{},{},{},{}",
            conventional.rmse, literal, conventional.rot_error, conventional.trans_error
        );
        match cloud_err {
            Some(v) => {
                let _ = write!(line, ",{v}");
            }
            None => line.push(','),
        }
        println!("{line}");
    } else {
        println!("rmse_mean_then_sqrt = {:.9}", conventional.rmse);
        println!("rmse_paper_literal  = {literal:.9}");
        println!("rot_error           = {:.9}", conventional.rot_error);
        println!("trans_error         = {:.9}", conventional.trans_error);
        if let Some(v) = cloud_err {
            println!("cloud_rmse({} mm)   = {v:.9}", args.threshold);
        }
    }
    Ok(())
}

fn cmd_model(args: ModelArgs) -> Result<(), CmdError> {
    if args.n == 0 {
        return Err(CmdError::Input("--n must be at least 1".into()));
    }
    let cloud = sample_blade(args.n, args.seed);
    write_xyz(&cloud, &args.out)?;
    println!("model={} points={}", args.out.display(), cloud.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Lambda,
    Outliers,
    Noise,
}

impl SweepMode {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "lambda" => Ok(SweepMode::Lambda),
            "outliers" => Ok(SweepMode::Outliers),
            "noise" => Ok(SweepMode::Noise),
            other => Err(format!(
                "unknown sweep mode `{other}` (expected lambda, outliers or noise)"
            )),
        }
    }
}

/// Fully resolved sweep description. Identical specs produce identical CSV
/// content (wall-clock column aside).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub mode: SweepMode,
    pub grid: Vec<f64>,
    pub trials_per_cell: usize,
    pub n_points: Vec<usize>,
    pub methods: Vec<Method>,
    pub lambda: f64,
    pub omega: f64,
    pub noise_sigma: f64,
    pub outlier_ratio: f64,
    pub angle_range_deg: f64,
    pub trans_range: f64,
    pub knn_k: usize,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub seed: u64,
    pub model_path: Option<PathBuf>,
    pub model_points: usize,
    pub model_seed: u64,
    pub rmse_convention: RmseConvention,
    pub out: PathBuf,
}

impl SweepSpec {
    fn validate(&self) -> Result<(), CmdError> {
        if self.grid.is_empty() {
            return Err(CmdError::Input("sweep grid is empty".into()));
        }
        if self.trials_per_cell == 0 {
            return Err(CmdError::Input("trials_per_cell must be at least 1".into()));
        }
        if self.n_points.is_empty() {
            return Err(CmdError::Input("n_points list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(CmdError::Input("methods list is empty".into()));
        }
        Ok(())
    }
}

fn default_grid(mode: SweepMode) -> Vec<f64> {
    match mode {
        SweepMode::Lambda => vec![0.0, 0.4, 0.8, 1.2, 1.6, 2.0],
        SweepMode::Outliers => (1..=8).map(|i| i as f64 * 0.05).collect(),
        SweepMode::Noise => vec![2.0, 3.0, 4.0, 5.0],
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, CmdError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CmdError::Input(format!("invalid number `{t}` in list")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, CmdError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| CmdError::Input(format!("invalid integer `{t}` in list")))
        })
        .collect()
}

fn parse_methods(s: &str) -> Result<Vec<Method>, CmdError> {
    let mut methods: Vec<Method> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Method>().map_err(CmdError::Input))
        .collect::<Result<_, _>>()?;
    methods.sort();
    methods.dedup();
    Ok(methods)
}

/// Reads a flat `key = value` config file; `#` starts a comment, blank lines
/// are ignored.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CmdError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CmdError::Input(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                idx + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn spec_from_config(map: &BTreeMap<String, String>, out_override: Option<PathBuf>) -> Result<SweepSpec, CmdError> {
    let get = |key: &str| map.get(key).map(String::as_str);
    let bad = |key: &str, v: &str| CmdError::Input(format!("config key `{key}`: invalid value `{v}`"));

    let mode = SweepMode::parse(
        get("mode").ok_or_else(|| CmdError::Input("config needs `mode`".into()))?,
    )
    .map_err(CmdError::Input)?;

    let parse_f = |key: &str, default: f64| -> Result<f64, CmdError> {
        match get(key) {
            Some(v) => v.parse().map_err(|_| bad(key, v)),
            None => Ok(default),
        }
    };
    let parse_u = |key: &str, default: usize| -> Result<usize, CmdError> {
        match get(key) {
            Some(v) => v.parse().map_err(|_| bad(key, v)),
            None => Ok(default),
        }
    };
    let parse_u64 = |key: &str, default: u64| -> Result<u64, CmdError> {
        match get(key) {
            Some(v) => v.parse().map_err(|_| bad(key, v)),
            None => Ok(default),
        }
    };

    let out = out_override
        .or_else(|| get("out").map(PathBuf::from))
        .ok_or_else(|| CmdError::Input("config needs `out` (or pass --out)".into()))?;

    let spec = SweepSpec {
        mode,
        grid: match get("grid") {
            Some(v) => parse_f64_list(v)?,
            None => default_grid(mode),
        },
        trials_per_cell: parse_u("trials", 6)?,
        n_points: match get("n_points") {
            Some(v) => parse_usize_list(v)?,
            None => vec![3000, 4000, 5000],
        },
        methods: match get("methods") {
            Some(v) => parse_methods(v)?,
            None => vec![Method::Lcgmm, Method::Icp],
        },
        lambda: parse_f("lambda", 0.5)?,
        omega: parse_f("omega", 0.1)?,
        noise_sigma: parse_f("noise_sigma", 4.0)?,
        outlier_ratio: parse_f("outlier_ratio", 0.10)?,
        angle_range_deg: parse_f("angle_range_deg", 60.0)?,
        trans_range: parse_f("trans_range", 10.0)?,
        knn_k: parse_u("k", 8)?,
        max_iterations: parse_u("max_iterations", 100)?,
        convergence_tol: parse_f("convergence_tol", 1e-7)?,
        seed: parse_u64("seed", 42)?,
        model_path: get("model").map(PathBuf::from),
        model_points: parse_u("model_points", 5000)?,
        model_seed: parse_u64("model_seed", 1)?,
        rmse_convention: match get("rmse_convention") {
            Some(v) => convention_from_name(v).map_err(CmdError::Input)?,
            None => RmseConvention::MeanThenSqrt,
        },
        out,
    };

    const KNOWN: &[&str] = &[
        "mode", "grid", "trials", "n_points", "methods", "lambda", "omega", "noise_sigma",
        "outlier_ratio", "angle_range_deg", "trans_range", "k", "max_iterations",
        "convergence_tol", "seed", "model", "model_points", "model_seed", "rmse_convention",
        "out",
    ];
    for key in map.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(CmdError::Input(format!("unknown config key `{key}`")));
        }
    }
    Ok(spec)
}

fn spec_from_flags(args: &SweepArgs) -> Result<SweepSpec, CmdError> {
    let mode = SweepMode::parse(
        args.mode
            .as_deref()
            .ok_or_else(|| CmdError::Input("sweep needs --mode (or --config)".into()))?,
    )
    .map_err(CmdError::Input)?;
    Ok(SweepSpec {
        mode,
        grid: match &args.grid {
            Some(v) => parse_f64_list(v)?,
            None => default_grid(mode),
        },
        trials_per_cell: args.trials.unwrap_or(6),
        n_points: match &args.n_points {
            Some(v) => parse_usize_list(v)?,
            None => vec![3000, 4000, 5000],
        },
        methods: match &args.methods {
            Some(v) => parse_methods(v)?,
            None => vec![Method::Lcgmm, Method::Icp],
        },
        lambda: args.lambda.unwrap_or(0.5),
        omega: args.omega.unwrap_or(0.1),
        noise_sigma: args.noise.unwrap_or(4.0),
        outlier_ratio: args.outliers.unwrap_or(0.10),
        angle_range_deg: args.angle_range.unwrap_or(60.0),
        trans_range: args.trans_range.unwrap_or(10.0),
        knn_k: args.k.unwrap_or(8),
        max_iterations: args.max_iters.unwrap_or(100),
        convergence_tol: args.tol.unwrap_or(1e-7),
        seed: args.seed.unwrap_or(42),
        model_path: args.model.clone(),
        model_points: args.model_points.unwrap_or(5000),
        model_seed: args.model_seed.unwrap_or(1),
        rmse_convention: match &args.rmse_convention {
            Some(v) => convention_from_name(v).map_err(CmdError::Input)?,
            None => RmseConvention::MeanThenSqrt,
        },
        out: args
            .out
            .clone()
            .ok_or_else(|| CmdError::Input("sweep needs --out".into()))?,
    })
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CmdError> {
    let spec = match &args.config {
        Some(path) => spec_from_config(&parse_config_file(path)?, args.out.clone())?,
        None => spec_from_flags(&args)?,
    };
    let rows = run_sweep(&spec)?;
    write_rows(&rows, &spec.out)?;
    println!("wrote {} rows to {}", rows.len(), spec.out.display());
    Ok(())
}

fn write_rows(rows: &[ResultRow], path: &Path) -> Result<(), CmdError> {
    let mut payload = String::with_capacity(rows.len() * 128 + 128);
    payload.push_str(io::RESULT_HEADER);
    payload.push('\n');
    for row in rows {
        payload.push_str(&row.to_csv_line());
        payload.push('\n');
    }
    fs::write(path, payload).map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Runs every cell x trial x method combination and returns the rows in
/// canonical order (cell, trial, method).
///
/// Trial seeds mix `(seed, cell_key, trial)` where
/// `cell_key = n_index * 4096 + grid_index`; the stride keeps seeds stable
/// when grid values are appended, and methods share the seed so comparisons
/// are paired.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<ResultRow>, CmdError> {
    spec.validate()?;
    let model = match &spec.model_path {
        Some(path) => read_cloud(path)?,
        None => sample_blade(spec.model_points, spec.model_seed),
    };

    let mut rows = Vec::new();
    for (n_idx, &n) in spec.n_points.iter().enumerate() {
        for (g_idx, &grid_value) in spec.grid.iter().enumerate() {
            let cell_key = (n_idx as u64) * 4096 + g_idx as u64;
            let (lambda, outlier_ratio, noise_sigma) = match spec.mode {
                SweepMode::Lambda => (grid_value, spec.outlier_ratio, spec.noise_sigma),
                SweepMode::Outliers => (spec.lambda, grid_value, spec.noise_sigma),
                SweepMode::Noise => (spec.lambda, spec.outlier_ratio, grid_value),
            };
            for trial in 0..spec.trials_per_cell {
                let trial_seed = derive_seed(spec.seed, cell_key, trial as u64);
                let corruption = CorruptionSpec {
                    n_points: n,
                    noise_sigma,
                    outlier_ratio,
                    angle_range_deg: spec.angle_range_deg,
                    trans_range: spec.trans_range,
                    seed: trial_seed,
                };
                let generated = synthesize_scan(&model, &corruption)
                    .map_err(|e| CmdError::Input(e.to_string()));
                for &method in &spec.methods {
                    let mut row = ResultRow {
                        trial_id: trial_seed,
                        method,
                        lambda,
                        outlier_ratio,
                        noise_sigma,
                        n_points: n,
                        k_neighbors: spec.knn_k,
                        omega: spec.omega,
                        rmse: -1.0,
                        rot_error: -1.0,
                        trans_error: -1.0,
                        iterations: 0,
                        wall_seconds: 0.0,
                        rmse_convention: spec.rmse_convention,
                        status: "ok".into(),
                    };
                    match &generated {
                        Ok((scanned, t_gt)) => {
                            let cfg = RegistrationConfig {
                                lambda,
                                outlier_weight: spec.omega,
                                knn_k: spec.knn_k,
                                max_iterations: spec.max_iterations,
                                convergence_tol: spec.convergence_tol,
                                ..Default::default()
                            };
                            match run_method(method, scanned, &model, &cfg, 0.0) {
                                Ok(report) => {
                                    let errors = evaluate(
                                        &model,
                                        t_gt,
                                        &report.transform,
                                        spec.rmse_convention,
                                    );
                                    row.rmse = errors.rmse;
                                    row.rot_error = errors.rot_error;
                                    row.trans_error = errors.trans_error;
                                    row.iterations = report.iterations_run;
                                    row.wall_seconds = report.wall_time;
                                }
                                Err(e) => row.status = e.message().to_string(),
                            }
                        }
                        Err(e) => row.status = e.message().to_string(),
                    }
                    eprintln!(
                        "cell n={n} {}={grid_value} trial={trial} method={method}: {}",
                        match spec.mode {
                            SweepMode::Lambda => "lambda",
                            SweepMode::Outliers => "outliers",
                            SweepMode::Noise => "noise",
                        },
                        if row.status == "ok" {
                            format!("rmse={:.4}", row.rmse)
                        } else {
                            format!("failed: {}", row.status)
                        }
                    );
                    rows.push(row);
                }
            }
        }
    }
    // The loops already emit in canonical order; sorting pins it down even
    // if the execution strategy changes.
    let method_rank = |m: Method| match m {
        Method::Lcgmm => 0,
        Method::Icp => 1,
    };
    let key = |r: &ResultRow| {
        (
            spec.n_points.iter().position(|&n| n == r.n_points).unwrap_or(usize::MAX),
            r.trial_id,
            method_rank(r.method),
        )
    };
    rows.sort_by(|a, b| key(a).cmp(&key(b)));
    Ok(rows)
}
