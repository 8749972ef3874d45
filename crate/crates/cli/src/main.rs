use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nestfit::asymptotics::{confidence_intervals, estimate_moments, ConfidenceInterval, MomentEstimates};
use nestfit::estimation::{fit, FitOptions, FitResult, Method};
use nestfit::io::read_dataset_file;
use nestfit::model::{ClusteredDataset, ParameterVector};
use nestfit::simulation::{
    simulate, write_replicates_csv, ClusterSizes, CovariateModel, Distribution, Execution, MonteCarloSummary,
    SimConfig,
};
use nestfit::verify::{run_checks, CheckOutcome};
use nestfit::Error;

const EXIT_FLAGGED: u8 = 2;
const EXIT_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "nestfit", version, about = "Fit nested error regression models by ML and REML")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a CSV dataset.
    Fit(FitArgs),
    /// Fit and report asymptotic confidence intervals.
    Ci(CiArgs),
    /// Run a seeded Monte Carlo study.
    Simulate(SimArgs),
    /// Run the built-in numerical self-checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Ml,
    Reml,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Ml => vec![Method::Ml],
            MethodArg::Reml => vec![Method::Reml],
            MethodArg::Both => vec![Method::Ml, Method::Reml],
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// CSV with columns cluster, y, b_1.., w_1..
    #[arg(long)]
    input: PathBuf,
    /// JSON report path (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ml")]
    method: MethodArg,
    /// Center within covariates at their cluster means.
    #[arg(long)]
    center: bool,
    /// Add the cluster means of within covariates as between covariates (implies --center).
    #[arg(long)]
    contextual: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Intervals have level 1 - gamma.
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
}

#[derive(Args)]
struct SimArgs {
    /// Base configuration as JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Summary JSON path (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-replicate CSV path.
    #[arg(long)]
    replicates_csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// normal, t:<df>, gamma:<shape> or lognormal:<sigma>
    #[arg(long)]
    alpha_dist: Option<String>,
    #[arg(long)]
    e_dist: Option<String>,
    /// Run replicates one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 20240521)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct FitEntry {
    estimates: Vec<NamedValue>,
    #[serde(flatten)]
    result: FitResult,
}

#[derive(Serialize)]
struct DataInfo {
    input: String,
    g: usize,
    n: usize,
    p_b: usize,
    p_w: usize,
    centered: bool,
    contextual: bool,
}

#[derive(Serialize)]
struct FitReport {
    command: &'static str,
    data: DataInfo,
    fits: Vec<FitEntry>,
}

#[derive(Serialize)]
struct CiEntry {
    method: Method,
    gamma: f64,
    moments: MomentEstimates,
    intervals: Vec<ConfidenceInterval>,
}

#[derive(Serialize)]
struct CiReport {
    command: &'static str,
    data: DataInfo,
    fits: Vec<FitEntry>,
    confidence_intervals: Vec<CiEntry>,
}

#[derive(Serialize)]
struct SimReport<'a> {
    command: &'static str,
    config: &'a SimConfig,
    summary: &'a MonteCarloSummary,
}

#[derive(Serialize)]
struct VerifyReport {
    command: &'static str,
    seed: u64,
    passed: bool,
    checks: Vec<CheckOutcome>,
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    let io_err = |e: io::Error| Error::Io(e.to_string());
    match path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?);
            writeln!(f, "{text}").map_err(io_err)?;
            f.flush().map_err(io_err)
        }
        None => writeln!(io::stdout().lock(), "{text}").map_err(io_err),
    }
}

fn load(args: &DataArgs) -> Result<(ClusteredDataset, DataInfo), Error> {
    let mut ds = read_dataset_file(&args.input)?;
    let centered = args.center || args.contextual;
    if centered {
        ds = ds.center_within_covariates(args.contextual)?;
    }
    let info = DataInfo {
        input: args.input.display().to_string(),
        g: ds.g(),
        n: ds.n(),
        p_b: ds.p_b(),
        p_w: ds.p_w(),
        centered,
        contextual: args.contextual,
    };
    Ok((ds, info))
}

fn entry(result: FitResult) -> FitEntry {
    let layout = nestfit::model::Layout::new(result.omega_hat.p_b(), result.omega_hat.p_w());
    let estimates = layout
        .parameter_names()
        .into_iter()
        .zip(result.omega_hat.to_flat().iter())
        .map(|(name, &value)| NamedValue { name, value })
        .collect();
    FitEntry { estimates, result }
}

fn fit_flagged(f: &FitResult) -> bool {
    f.boundary_flag || !f.converged
}

fn cmd_fit(args: &FitArgs) -> Result<u8, Error> {
    let (ds, info) = load(&args.data)?;
    let stats = ds.sufficient_stats();
    let fits = args
        .data
        .method
        .methods()
        .into_iter()
        .map(|m| fit(&stats, m, &FitOptions::default()))
        .collect::<Result<Vec<_>, _>>()?;
    let flagged = fits.iter().any(fit_flagged);
    let report = FitReport {
        command: "fit",
        data: info,
        fits: fits.into_iter().map(entry).collect(),
    };
    write_json(&report, args.data.output.as_deref())?;
    Ok(if flagged { EXIT_FLAGGED } else { 0 })
}

fn cmd_ci(args: &CiArgs) -> Result<u8, Error> {
    if !(args.gamma > 0.0 && args.gamma < 1.0) {
        return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {}", args.gamma)));
    }
    let (ds, info) = load(&args.data)?;
    let stats = ds.sufficient_stats();
    let mut flagged = false;
    let mut fits = Vec::new();
    let mut cis = Vec::new();
    for method in args.data.method.methods() {
        let result = fit(&stats, method, &FitOptions::default())?;
        let moments = estimate_moments(&ds, &stats, &result);
        let intervals = confidence_intervals(&stats, &result, &moments, args.gamma)?;
        flagged |= fit_flagged(&result) || intervals.iter().any(|c| c.degenerate);
        cis.push(CiEntry {
            method,
            gamma: args.gamma,
            moments,
            intervals,
        });
        fits.push(entry(result));
    }
    let report = CiReport {
        command: "ci",
        data: info,
        fits,
        confidence_intervals: cis,
    };
    write_json(&report, args.data.output.as_deref())?;
    Ok(if flagged { EXIT_FLAGGED } else { 0 })
}

/// One between and one within covariate with random design.
fn default_sim_config() -> SimConfig {
    SimConfig {
        covariates: CovariateModel::Random {
            mu_b: vec![1.0],
            sigma_b: vec![vec![1.0]],
            mu_w: vec![0.0],
            upsilon_w: vec![vec![0.5]],
            sigma_w: vec![vec![1.0]],
        },
        replications: 100,
        seed: 1,
        ..SimConfig::balanced(50, 20, ParameterVector::new(1.0, vec![0.5], 0.25, vec![2.0], 0.25))
    }
}

fn cmd_simulate(args: &SimArgs) -> Result<u8, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            serde_json::from_reader(io::BufReader::new(file)).map_err(|e| Error::Parse(e.to_string()))?
        }
        None => default_sim_config(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.replications = reps;
    }
    if let Some(gamma) = args.gamma {
        cfg.gamma = gamma;
    }
    if let Some(d) = &args.alpha_dist {
        cfg.alpha_dist = d.parse::<Distribution>()?;
    }
    if let Some(d) = &args.e_dist {
        cfg.e_dist = d.parse::<Distribution>()?;
    }
    if args.g.is_some() || args.m.is_some() {
        if matches!(cfg.covariates, CovariateModel::Fixed { .. }) {
            return Err(Error::InvalidConfig("--g/--m cannot resize fixed covariates".into()));
        }
        if let Some(g) = args.g {
            cfg.g = g;
        }
        let m = match (args.m, &cfg.cluster_sizes) {
            (Some(m), _) => m,
            (None, ClusterSizes::Balanced(m)) => *m,
            (None, ClusterSizes::PerCluster(_)) => {
                return Err(Error::InvalidConfig("--g with per-cluster sizes needs --m".into()));
            }
        };
        cfg.cluster_sizes = ClusterSizes::Balanced(m);
    }
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let run = simulate(&cfg, exec)?;
    if let Some(path) = &args.replicates_csv {
        let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        write_replicates_csv(&run.replicates, cfg.layout(), BufWriter::new(file))?;
    }
    let report = SimReport {
        command: "simulate",
        config: &cfg,
        summary: &run.summary,
    };
    write_json(&report, args.output.as_deref())?;
    let clean = run.summary.flagged == 0 && run.summary.failed == 0;
    Ok(if clean { 0 } else { EXIT_FLAGGED })
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8, Error> {
    let checks = run_checks(args.seed);
    for c in &checks {
        eprintln!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let passed = checks.iter().all(|c| c.passed);
    let report = VerifyReport {
        command: "verify",
        seed: args.seed,
        passed,
        checks,
    };
    write_json(&report, args.output.as_deref())?;
    Ok(if passed { 0 } else { EXIT_ERROR })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Ci(a) => cmd_ci(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
