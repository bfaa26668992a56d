//! Command-line front end. Single evaluations and reports go to stdout as JSON;
//! samples and study tables are written as CSV under the output directory.

use crate::ensembles::{
    default_max_rejects, sample_avoiding_ensemble, sample_bessel_bridge, sample_gse_spectrum, sample_many,
    sample_pinned_ensemble, sample_reverse_bm, EnsembleError, EnsembleSample, Floor, Region, TimeGrid,
};
use crate::kernels::{BoundaryParam, KernelError, Kernels};
use crate::pfaffian::{gse_factorial_moment, origin_factorial_moment, IntervalSpec, MomentRequest, PfaffianError};
use crate::quad::{QuadSettings, DEFAULT_NODES_PER_RAY, DEFAULT_TOL};
use crate::verify::{
    finite_n_edge_shift, study_gse_edge, study_kernel_match, study_origin_moments, study_pinning_convergence,
    study_t_limit, study_varpi_limit, GseEdgeConfig, PinningConfig, PointPair, StudyReport, VerifyError, MATCH_POINTS,
    T_LIMIT_POINTS, VARPI_LIMIT_POINTS,
};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HSAIRY_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_STUDY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const SAMPLE_CSV_HELP: &str = "\
CSV output (<out>/sample-<kind>.csv):
  bm, bessel, pinned, avoiding: sample,curve,rejections,<one column per grid time>
    curves are numbered from the top; the header cells of the time columns are the times.
  gse: sample,rank,raw,scaled
    rank 0 is the largest eigenvalue.
Numbers are written as shortest round-trip decimals.";

const STUDY_CSV_HELP: &str = "\
Writes <out>/<study>.json (full report) and <out>/<study>.csv with columns
  param,metric,value,target,error
where error = |value - target| and target is empty when there is none.
Exit status: 0 pass, 1 fail, 2 bad input, 3 numerical or budget failure.";

#[derive(Parser, Debug)]
#[command(
    name = "hsairy",
    version,
    about = "Kernels, Pfaffians, samplers and convergence studies for the half-space Airy line ensemble",
    after_help = "Flags may also come from --config FILE with one key=value per line (keys are flag names \
                  without dashes, '#' starts a comment). Flags on the command line win."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalOpts {
    /// Master RNG seed; generated and recorded when omitted
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    pub out: PathBuf,
    /// Worker thread cap; results do not depend on it
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key=value file with default flag values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Contour quadrature tolerance
    #[arg(long, global = true, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Gauss-Legendre nodes per contour ray
    #[arg(long, global = true, default_value_t = DEFAULT_NODES_PER_RAY)]
    pub nodes_per_ray: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Correlation kernel evaluations and contour cross-checks
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Brownian, Bessel, line ensemble and GSE samplers
    #[command(subcommand, after_help = SAMPLE_CSV_HELP)]
    Sample(SampleCmd),
    /// Factorial moments of counts from block-kernel Pfaffians
    #[command(subcommand)]
    Moments(MomentsCmd),
    /// Named convergence studies with a pass/fail verdict
    #[command(subcommand, after_help = STUDY_CSV_HELP)]
    Study(StudyCmd),
}

#[derive(Subcommand, Debug)]
pub enum KernelCmd {
    /// One 2x2 kernel block as JSON
    Eval(EvalArgs),
    /// The boundary-parameter kernel in its two contour layouts (same as `study kernel-match`)
    Match(MatchArgs),
    /// Boundary parameter to infinity against the pinned kernel (same as `study varpi-limit`)
    LimitVarpi(VarpiLimitArgs),
    /// Large times against the extended Airy kernel (same as `study T-limit`)
    #[command(name = "limit-T")]
    LimitT(TLimitArgs),
}

#[derive(Subcommand, Debug)]
pub enum SampleCmd {
    /// Reverse Brownian motion with drift, pinned at time b
    Bm(BmArgs),
    /// 3D Bessel bridge from 0 at time 0 to z at time b
    Bessel(BesselArgs),
    /// Pinned line ensemble built from Bessel bridges
    Pinned(PinnedArgs),
    /// Non-intersecting reverse Brownian motions with drifts
    Avoiding(AvoidingArgs),
    /// GSE spectra by the tridiagonal model, with edge-scaled atoms
    Gse(GseArgs),
}

#[derive(Subcommand, Debug)]
pub enum MomentsCmd {
    /// Factorial moment under the GSE edge kernel
    Gse(MomentArgs),
    /// Factorial moment under the small-time kernel including its singular part
    Origin(OriginMomentArgs),
}

#[derive(Subcommand, Debug)]
pub enum StudyCmd {
    /// The boundary-parameter kernel in its two contour layouts
    KernelMatch(MatchArgs),
    /// Boundary parameter to infinity against the pinned kernel
    VarpiLimit(VarpiLimitArgs),
    /// Large times against the extended Airy kernel
    #[command(name = "T-limit")]
    TLimit(TLimitArgs),
    /// Avoiding pair with drifts (-varpi, varpi) against the pinned pair
    Pinning(PinningArgs),
    /// Scaled GSE counts against integrals of the edge kernel
    GseEdge(GseEdgeArgs),
    /// Small-time factorial moments against doubled GSE moments
    OriginMoments(OriginMomentsArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// GSE edge kernel (times ignored)
    Gse,
    /// Extended Airy kernel, a scalar
    Airy,
    /// Pinned half-space kernel; with --shift evaluated at (T+s, T+t)
    HsInf,
    /// Boundary-parameter kernel, straight-contour layout
    Varpi,
    /// Boundary-parameter kernel, original wedge layout
    HsVarpi,
    /// Small-time kernel at --tn (times ignored)
    Origin,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub family: Family,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub s: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub x: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub t: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub y: f64,
    /// Boundary parameter (> 1) for varpi and hs-varpi
    #[arg(long)]
    pub varpi: Option<f64>,
    /// Small time t_N in (0, 1/2] for origin
    #[arg(long)]
    pub tn: Option<f64>,
    /// Time shift T for hs-inf
    #[arg(long)]
    pub shift: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MatchArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,5")]
    pub varpi: Vec<f64>,
    /// `default` or a flat list s,x,t,y,s,x,t,y,...
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "default")]
    pub points: Vec<String>,
    /// Largest entrywise difference allowed
    #[arg(long, default_value_t = 1e-6)]
    pub match_tol: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct VarpiLimitArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub varpi: Vec<f64>,
    /// `default` or a flat list s,x,t,y,s,x,t,y,...
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "default")]
    pub points: Vec<String>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TLimitArgs {
    /// Ascending time shifts
    #[arg(long = "T", value_delimiter = ',', default_value = "5,10,20,40")]
    pub shifts: Vec<f64>,
    /// `default` or a flat list s,x,t,y,s,x,t,y,...
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "default")]
    pub points: Vec<String>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GridArgs {
    /// Terminal time b
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    /// Number of uniform grid steps on [0, b]
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BmArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Level at time b
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub y: f64,
    /// Drift
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub mu: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BesselArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Level at time b
    #[arg(long, default_value_t = 1.0)]
    pub z: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PinnedArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Strictly descending levels at time b, one per pinned pair
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub y: Vec<f64>,
    /// Constant floor below the bottom curve
    #[arg(long, allow_hyphen_values = true)]
    pub floor: Option<f64>,
    /// Proposal budget per sample
    #[arg(long)]
    pub max_rejects: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AvoidingArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Strictly descending levels at time b
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub y: Vec<f64>,
    /// One drift per curve
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "varpi")]
    pub mu: Option<Vec<f64>>,
    /// Alternating drifts -varpi, varpi, -varpi, ... from the top
    #[arg(long)]
    pub varpi: Option<f64>,
    /// Constant floor below the bottom curve
    #[arg(long, allow_hyphen_values = true)]
    pub floor: Option<f64>,
    /// Proposal budget per sample
    #[arg(long)]
    pub max_rejects: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GseArgs {
    /// Matrix size N
    #[arg(long, default_value_t = 100)]
    pub size: usize,
    /// Number of spectra
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Keep only the largest eigenvalues
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MomentArgs {
    /// Disjoint intervals as a flat list lo,hi,lo,hi,...
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,1")]
    pub intervals: Vec<f64>,
    /// Factorial order per interval
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub orders: Vec<usize>,
    /// Gauss-Legendre nodes per axis
    #[arg(long, default_value_t = crate::verify::MOMENT_NODES)]
    pub nodes: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OriginMomentArgs {
    #[command(flatten)]
    pub moment: MomentArgs,
    /// Small time t_N in (0, 1/2]
    #[arg(long)]
    pub tn: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PinningArgs {
    /// Ascending boundary parameters
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub varpi: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    /// Strictly descending pair of levels at time b
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,0")]
    pub y: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GseEdgeArgs {
    /// Matrix size N
    #[arg(long, default_value_t = 100)]
    pub size: usize,
    /// Number of spectra
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Disjoint regions lo,hi,lo,hi,...; hi = inf gives a half line
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "0,inf,-2,0,-4,-2"
    )]
    pub regions: Vec<f64>,
    /// Finite-N allowance as an edge shift in scaled units [default: N^{-1/3}/2]
    #[arg(long)]
    pub edge_shift: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OriginMomentsArgs {
    /// Descending small times in (0, 1/2]
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05")]
    pub tn: Vec<f64>,
    /// Interval lo,hi
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,1")]
    pub interval: Vec<f64>,
    /// Factorial order, 1 or 2
    #[arg(long, default_value_t = 1)]
    pub order: usize,
}

/// The effective configuration of a run, echoed into every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub params: Value,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub tol: f64,
    pub nodes_per_ray: usize,
    pub grid: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{op} failed: {source}\nparameters: {params}")]
    Run {
        op: String,
        params: String,
        source: VerifyError,
    },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run { source, .. } if bad_input(source) => EXIT_USAGE,
            CliError::Run { .. } => EXIT_NUMERIC,
        }
    }
}

fn bad_input(e: &VerifyError) -> bool {
    match e {
        VerifyError::InvalidInput(_) | VerifyError::Io { .. } => true,
        VerifyError::Kernel(k) | VerifyError::Pfaffian(PfaffianError::Kernel(k)) => bad_kernel_input(k),
        VerifyError::Pfaffian(p) => matches!(
            p,
            PfaffianError::OverlappingIntervals(..)
                | PfaffianError::InvalidInterval { .. }
                | PfaffianError::InvalidRequest(_)
                | PfaffianError::DimensionCap { .. }
        ),
        VerifyError::Ensemble(e) => !matches!(e, EnsembleError::RejectionBudgetExceeded { .. }),
    }
}

fn bad_kernel_input(k: &KernelError) -> bool {
    matches!(
        k,
        KernelError::InvalidBoundaryParam(_) | KernelError::InvalidTime { .. } | KernelError::InvalidShift { .. }
    )
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse(argv) {
        Ok(cli) => cli,
        Err(ParseError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
        Err(ParseError::Config(m)) => {
            eprintln!("error: {m}\n{}", Cli::command().render_usage());
            return EXIT_USAGE;
        }
    };
    let outcome = match cli.global.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(CliError::Usage(format!("cannot build a pool of {n} threads: {e}"))),
        },
        None => run(&cli),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}

enum ParseError {
    Clap(clap::Error),
    Config(String),
}

/// Flags from the config file are appended unless already on the command line.
fn parse(mut argv: Vec<OsString>) -> Result<Cli, ParseError> {
    let first = Cli::try_parse_from(&argv).map_err(ParseError::Clap)?;
    let Some(path) = first.global.config.as_ref() else {
        return Ok(first);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| ParseError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let given: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ParseError::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let flag = format!("--{}", key.trim());
        let present = given.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if !present && flag != "--config" {
            argv.push(format!("{flag}={}", value.trim()).into());
        }
    }
    Cli::try_parse_from(&argv).map_err(ParseError::Clap)
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    let g = &cli.global;
    let kernels = Kernels::new(QuadSettings {
        tol: g.tol,
        nodes_per_ray: g.nodes_per_ray,
        ..QuadSettings::default()
    });
    match &cli.command {
        Command::Kernel(KernelCmd::Eval(a)) => kernel_eval(g, &kernels, a),
        Command::Kernel(KernelCmd::Match(a)) | Command::Study(StudyCmd::KernelMatch(a)) => {
            let points = parse_points(&a.points, &MATCH_POINTS)?;
            let rc = run_config(g, "study kernel-match", a, None, None);
            report(
                g,
                rc,
                |k| study_kernel_match(k, &a.varpi, &points, a.match_tol),
                &kernels,
            )
        }
        Command::Kernel(KernelCmd::LimitVarpi(a)) | Command::Study(StudyCmd::VarpiLimit(a)) => {
            let points = parse_points(&a.points, &VARPI_LIMIT_POINTS)?;
            let rc = run_config(g, "study varpi-limit", a, None, None);
            report(g, rc, |k| study_varpi_limit(k, &a.varpi, &points), &kernels)
        }
        Command::Kernel(KernelCmd::LimitT(a)) | Command::Study(StudyCmd::TLimit(a)) => {
            let points = parse_points(&a.points, &T_LIMIT_POINTS)?;
            let rc = run_config(g, "study T-limit", a, None, None);
            report(g, rc, |k| study_t_limit(k, &a.shifts, &points), &kernels)
        }
        Command::Study(StudyCmd::Pinning(a)) => {
            let seed = seed_or_generate(g);
            let [y0, y1] = a.y[..] else {
                return Err(CliError::Usage(format!("--y needs two levels, got {}", a.y.len())));
            };
            let cfg = PinningConfig {
                varpis: a.varpi.clone(),
                b: a.b,
                y: (y0, y1),
                n_samples: a.n,
                grid_steps: a.grid,
                seed,
            };
            let rc = run_config(g, "study pinning", a, Some(seed), Some(a.grid));
            report(g, rc, |_| study_pinning_convergence(&cfg), &kernels)
        }
        Command::Study(StudyCmd::GseEdge(a)) => {
            let seed = seed_or_generate(g);
            let cfg = GseEdgeConfig {
                n_matrix: a.size,
                n_samples: a.n,
                regions: parse_regions(&a.regions)?,
                edge_shift: a.edge_shift.unwrap_or_else(|| finite_n_edge_shift(a.size)),
                seed,
            };
            let rc = run_config(g, "study gse-edge", a, Some(seed), None);
            report(g, rc, |k| study_gse_edge(k, &cfg), &kernels)
        }
        Command::Study(StudyCmd::OriginMoments(a)) => {
            let [lo, hi] = a.interval[..] else {
                return Err(CliError::Usage("--interval needs lo,hi".into()));
            };
            let rc = run_config(g, "study origin-moments", a, None, None);
            report(
                g,
                rc,
                |k| study_origin_moments(k, &a.tn, IntervalSpec::new(lo, hi)?, a.order),
                &kernels,
            )
        }
        Command::Moments(MomentsCmd::Gse(a)) => {
            let req = moment_request(a)?;
            let rc = run_config(g, "moments gse", a, None, None);
            moment(rc, || gse_factorial_moment(&kernels, &req))
        }
        Command::Moments(MomentsCmd::Origin(a)) => {
            let req = moment_request(&a.moment)?;
            let rc = run_config(g, "moments origin", a, None, None);
            moment(rc, || origin_factorial_moment(&kernels, a.tn, &req))
        }
        Command::Sample(cmd) => sample(g, cmd),
    }
}

fn run_config<A: Serialize>(
    g: &GlobalOpts,
    command: &str,
    args: &A,
    seed: Option<u64>,
    grid: Option<usize>,
) -> RunConfig {
    RunConfig {
        command: command.into(),
        params: serde_json::to_value(args).expect("arguments serialize"),
        seed,
        out: g.out.clone(),
        tol: g.tol,
        nodes_per_ray: g.nodes_per_ray,
        grid,
    }
}

fn seed_or_generate(g: &GlobalOpts) -> u64 {
    g.seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("no --seed given; using generated seed {s}");
        s
    })
}

fn fail(op: &str, rc: &RunConfig, source: impl Into<VerifyError>) -> CliError {
    CliError::Run {
        op: op.into(),
        params: serde_json::to_string(&rc.params).unwrap_or_default(),
        source: source.into(),
    }
}

fn parse_points(raw: &[String], defaults: &[PointPair]) -> Result<Vec<PointPair>, CliError> {
    if raw.is_empty() || (raw.len() == 1 && raw[0] == "default") {
        return Ok(defaults.to_vec());
    }
    let v: Vec<f64> = raw
        .iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad number {s:?} in --points")))
        })
        .collect::<Result<_, _>>()?;
    if v.len() % 4 != 0 {
        return Err(CliError::Usage(format!(
            "--points needs groups of four, got {} numbers",
            v.len()
        )));
    }
    Ok(v.chunks(4).map(|c| (c[0], c[1], c[2], c[3])).collect())
}

fn parse_regions(v: &[f64]) -> Result<Vec<Region>, CliError> {
    if v.len() % 2 != 0 || v.is_empty() {
        return Err(CliError::Usage("--regions needs lo,hi pairs".into()));
    }
    v.chunks(2)
        .map(|c| match (c[0], c[1]) {
            (lo, hi) if lo.is_finite() && hi == f64::INFINITY => Ok(Region::HalfLine { lo }),
            (lo, hi) if lo.is_finite() && hi.is_finite() && lo < hi => Ok(Region::Interval { lo, hi }),
            (lo, hi) => Err(CliError::Usage(format!("bad region [{lo}, {hi})"))),
        })
        .collect()
}

fn moment_request(a: &MomentArgs) -> Result<MomentRequest, CliError> {
    if a.intervals.len() % 2 != 0 || a.intervals.len() / 2 != a.orders.len() {
        return Err(CliError::Usage(format!(
            "{} interval bounds for {} orders",
            a.intervals.len(),
            a.orders.len()
        )));
    }
    let intervals = a
        .intervals
        .chunks(2)
        .map(|c| IntervalSpec::new(c[0], c[1]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(MomentRequest {
        intervals,
        orders: a.orders.clone(),
        nodes_per_axis: a.nodes,
    })
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json(v: &Value) {
    emit(&serde_json::to_string_pretty(v).expect("JSON serializes"));
}

fn kernel_eval(g: &GlobalOpts, k: &Kernels, a: &EvalArgs) -> Result<i32, CliError> {
    let rc = run_config(g, "kernel eval", a, None, None);
    let need =
        |v: Option<f64>, flag: &str| v.ok_or_else(|| CliError::Usage(format!("--family {:?} needs {flag}", a.family)));
    let op = format!("{:?} kernel", a.family);
    let block = match a.family {
        Family::Airy => {
            let v = k.airy(a.s, a.x, a.t, a.y).map_err(|e| fail(&op, &rc, e))?;
            print_json(&json!({ "family": a.family, "value": v, "config": rc }));
            return Ok(EXIT_OK);
        }
        Family::Gse => k.gse(a.x, a.y),
        Family::HsInf => match a.shift {
            Some(shift) => k.hs_inf_shifted(shift, a.s, a.x, a.t, a.y),
            None => k.hs_inf(a.s, a.x, a.t, a.y),
        },
        Family::Varpi => k.varpi(BoundaryParam::new(need(a.varpi, "--varpi")?), a.s, a.x, a.t, a.y),
        Family::HsVarpi => k.hs_varpi(BoundaryParam::new(need(a.varpi, "--varpi")?), a.s, a.x, a.t, a.y),
        Family::Origin => {
            let o = k
                .origin_split(need(a.tn, "--tn")?, a.x, a.y)
                .map_err(|e| fail(&op, &rc, e))?;
            let r = o.regular;
            print_json(&json!({
                "family": a.family,
                "block": [[r.k11, r.k12], [r.k21, r.k22 + o.singular]],
                "regular": [[r.k11, r.k12], [r.k21, r.k22]],
                "singular_k22": o.singular,
                "config": rc,
            }));
            return Ok(EXIT_OK);
        }
    }
    .map_err(|e| fail(&op, &rc, e))?;
    print_json(&json!({
        "family": a.family,
        "block": [[block.k11, block.k12], [block.k21, block.k22]],
        "config": rc,
    }));
    Ok(EXIT_OK)
}

fn moment(rc: RunConfig, f: impl FnOnce() -> Result<f64, PfaffianError>) -> Result<i32, CliError> {
    let start = Instant::now();
    let value = f().map_err(|e| fail(&rc.command, &rc, e))?;
    print_json(&json!({
        "value": value,
        "runtime_ms": start.elapsed().as_millis() as u64,
        "config": rc,
    }));
    Ok(EXIT_OK)
}

fn report(
    g: &GlobalOpts,
    rc: RunConfig,
    f: impl FnOnce(&Kernels) -> crate::verify::Result<StudyReport>,
    kernels: &Kernels,
) -> Result<i32, CliError> {
    let mut r = f(kernels).map_err(|e| fail(&rc.command, &rc, e))?;
    r.config = json!({ "run": rc, "study": r.config });
    std::fs::create_dir_all(&g.out).map_err(|e| fail(&rc.command, &rc, io(&g.out, e)))?;
    r.write_json(&g.out.join(format!("{}.json", r.study)))
        .and_then(|_| r.write_csv(&g.out.join(format!("{}.csv", r.study))))
        .map_err(|e| fail(&rc.command, &rc, e))?;
    emit(&r.to_json());
    for reason in &r.reasons {
        eprintln!("FAIL: {reason}");
    }
    Ok(if r.verdict { EXIT_OK } else { EXIT_STUDY_FAILED })
}

fn io(path: &Path, e: std::io::Error) -> VerifyError {
    VerifyError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn floor_on(level: Option<f64>, grid: &TimeGrid) -> Floor {
    match level {
        Some(c) => Floor::Path(vec![c; grid.len()]),
        None => Floor::NegInfinity,
    }
}

fn sample(g: &GlobalOpts, cmd: &SampleCmd) -> Result<i32, CliError> {
    let seed = seed_or_generate(g);
    let (kind, rc) = match cmd {
        SampleCmd::Bm(a) => ("bm", run_config(g, "sample bm", a, Some(seed), Some(a.grid.grid))),
        SampleCmd::Bessel(a) => (
            "bessel",
            run_config(g, "sample bessel", a, Some(seed), Some(a.grid.grid)),
        ),
        SampleCmd::Pinned(a) => (
            "pinned",
            run_config(g, "sample pinned", a, Some(seed), Some(a.grid.grid)),
        ),
        SampleCmd::Avoiding(a) => (
            "avoiding",
            run_config(g, "sample avoiding", a, Some(seed), Some(a.grid.grid)),
        ),
        SampleCmd::Gse(a) => ("gse", run_config(g, "sample gse", a, Some(seed), None)),
    };
    let err = |e: EnsembleError| fail(&rc.command, &rc, e);
    let grid_of = |a: &GridArgs| TimeGrid::uniform(a.b, a.grid).map_err(err);
    let start = Instant::now();
    let (header, rows, rejections): (Vec<String>, Vec<Vec<String>>, u64) = match cmd {
        SampleCmd::Bm(a) => {
            let grid = grid_of(&a.grid)?;
            let paths = sample_many(seed, a.grid.n, |s| sample_reverse_bm(a.y, a.mu, &grid, &mut s.rng()));
            path_rows(&grid, paths.into_iter().map(|p| (vec![p], 0)))
        }
        SampleCmd::Bessel(a) => {
            let grid = grid_of(&a.grid)?;
            let paths = sample_many(seed, a.grid.n, |s| sample_bessel_bridge(a.z, &grid, &mut s.rng()))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            path_rows(&grid, paths.into_iter().map(|p| (vec![p], 0)))
        }
        SampleCmd::Pinned(a) => {
            let grid = grid_of(&a.grid)?;
            let floor = floor_on(a.floor, &grid);
            let budget = a.max_rejects.unwrap_or_else(|| default_max_rejects(2 * a.y.len()));
            let samples = sample_many(seed, a.grid.n, |s| {
                sample_pinned_ensemble(&a.y, &floor, &grid, s, budget)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
            ensemble_rows(&grid, samples)
        }
        SampleCmd::Avoiding(a) => {
            let grid = grid_of(&a.grid)?;
            let mu = match (&a.mu, a.varpi) {
                (Some(mu), _) => mu.clone(),
                (None, Some(v)) => (0..a.y.len()).map(|i| if i % 2 == 0 { -v } else { v }).collect(),
                (None, None) => vec![0.0; a.y.len()],
            };
            let floor = floor_on(a.floor, &grid);
            let budget = a.max_rejects.unwrap_or_else(|| default_max_rejects(a.y.len()));
            let samples = sample_many(seed, a.grid.n, |s| {
                sample_avoiding_ensemble(&a.y, &mu, &floor, &grid, s, budget)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
            ensemble_rows(&grid, samples)
        }
        SampleCmd::Gse(a) => {
            let spectra = sample_many(seed, a.n, |s| sample_gse_spectrum(a.size, s))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            let keep = a.top.unwrap_or(a.size);
            let rows = spectra
                .iter()
                .flat_map(|sp| {
                    let i = sp.seed.index;
                    sp.raw
                        .iter()
                        .zip(&sp.scaled)
                        .take(keep)
                        .enumerate()
                        .map(move |(r, (raw, sc))| vec![i.to_string(), r.to_string(), num(*raw), num(*sc)])
                })
                .collect();
            (["sample", "rank", "raw", "scaled"].map(String::from).to_vec(), rows, 0)
        }
    };
    std::fs::create_dir_all(&g.out).map_err(|e| fail(&rc.command, &rc, io(&g.out, e)))?;
    let path = g.out.join(format!("sample-{kind}.csv"));
    write_csv(&path, &header, &rows).map_err(|e| fail(&rc.command, &rc, io(&path, e)))?;
    let n = match cmd {
        SampleCmd::Gse(a) => a.n,
        SampleCmd::Bm(a) => a.grid.n,
        SampleCmd::Bessel(a) => a.grid.n,
        SampleCmd::Pinned(a) => a.grid.n,
        SampleCmd::Avoiding(a) => a.grid.n,
    };
    let acceptance = n as f64 / (n as f64 + rejections as f64);
    print_json(&json!({
        "csv": path,
        "samples": n,
        "rejections": rejections,
        "acceptance": acceptance,
        "runtime_ms": start.elapsed().as_millis() as u64,
        "config": rc,
    }));
    Ok(EXIT_OK)
}

type Table = (Vec<String>, Vec<Vec<String>>, u64);

fn path_rows(grid: &TimeGrid, samples: impl Iterator<Item = (Vec<Vec<f64>>, u64)>) -> Table {
    let mut header: Vec<String> = ["sample", "curve", "rejections"].map(String::from).to_vec();
    header.extend(grid.times().iter().map(|t| num(*t)));
    let mut rows = Vec::new();
    let mut total = 0;
    for (i, (paths, rej)) in samples.enumerate() {
        total += rej;
        for (c, p) in paths.iter().enumerate() {
            let mut row = vec![i.to_string(), c.to_string(), rej.to_string()];
            row.extend(p.iter().map(|v| num(*v)));
            rows.push(row);
        }
    }
    (header, rows, total)
}

fn ensemble_rows(grid: &TimeGrid, samples: Vec<EnsembleSample>) -> Table {
    path_rows(grid, samples.into_iter().map(|s| (s.paths, s.rejections)))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("hsairy".to_string())
            .chain(s.split_whitespace().map(String::from))
            .collect()
    }

    #[test]
    fn grammar_parses_every_command() {
        for cmd in [
            "kernel eval --family gse --x 0 --y 0",
            "kernel match --varpi 2,5 --points default",
            "kernel limit-varpi --varpi 2,4,8,16",
            "kernel limit-T --T 5,10",
            "sample bm --y 0 --mu -1",
            "sample bessel --z 1",
            "sample pinned --b 1 --y 1,0 --grid 256 --n 1000 --seed 7",
            "sample avoiding --y 1,0 --varpi 4",
            "sample gse --size 50",
            "moments gse --intervals -1,1 --orders 2",
            "moments origin --tn 0.1",
            "study pinning --varpi 2,4,8",
            "study gse-edge --regions 0,inf,-2,0",
            "study origin-moments --tn 0.2,0.1",
            "study T-limit",
        ] {
            assert!(Cli::try_parse_from(argv(cmd)).is_ok(), "{cmd}");
        }
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        assert_eq!(dispatch(argv("kernel frobnicate")), EXIT_USAGE);
        assert_eq!(dispatch(argv("study nope")), EXIT_USAGE);
    }

    #[test]
    fn points_come_in_fours() {
        let p = parse_points(&["1", "2", "3", "4"].map(String::from), &[]).unwrap();
        assert_eq!(p, vec![(1.0, 2.0, 3.0, 4.0)]);
        assert!(parse_points(&["1", "2", "3"].map(String::from), &[]).is_err());
        assert_eq!(parse_points(&["default".to_string()], &MATCH_POINTS).unwrap().len(), 5);
    }

    #[test]
    fn regions_parse_half_lines() {
        let r = parse_regions(&[0.0, f64::INFINITY, -2.0, 0.0]).unwrap();
        assert_eq!(
            r,
            vec![Region::HalfLine { lo: 0.0 }, Region::Interval { lo: -2.0, hi: 0.0 }]
        );
        assert!(parse_regions(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn config_file_fills_missing_flags_only() {
        let dir = std::env::temp_dir().join(format!("hsairy-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# defaults\nseed = 5\nn=12\ngrid=8\n").unwrap();
        let cli = parse(
            argv(&format!("sample bm --n 3 --config {}", path.display()))
                .into_iter()
                .map(OsString::from)
                .collect(),
        )
        .ok()
        .unwrap();
        assert_eq!(cli.global.seed, Some(5));
        let Command::Sample(SampleCmd::Bm(a)) = cli.command else {
            panic!()
        };
        assert_eq!(a.grid.n, 3);
        assert_eq!(a.grid.grid, 8);
    }

    #[test]
    fn invalid_time_maps_to_usage() {
        let e = VerifyError::Kernel(KernelError::InvalidTime {
            value: 0.6,
            range: "(0, 1/2]",
        });
        assert!(bad_input(&e));
        let e = VerifyError::Ensemble(EnsembleError::RejectionBudgetExceeded {
            attempts: 1,
            acceptance: 0.0,
        });
        assert!(!bad_input(&e));
    }
}
