//! Command-line front end: `fit`, `monitor` and `simulate`.

pub mod data;
pub mod document;

use std::collections::hash_map::RandomState;
use std::fmt::Write as _;
use std::hash::{BuildHasher, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use wemix::diagnose::{detect_outliers, DetectionRule};
use wemix::downweight::{KernelFamily, KernelSpec, RafSpec};
use wemix::fit::{fit, fit_trimmed};
use wemix::select::{geomspace, monitor, suggest_h, weighted_ic, MonitorSpec, Penalty, SuggestOptions};
use wemix::sim::{run_study, EpsBase, Scheme, SimScenario, StudyConfig, StudyReport};
use wemix::{DataMatrix, Error, FitConfig, FitResult};

use data::{parse_delimiter, read_csv, ColumnSelection, CsvOptions, InputError};
use document::{ConfigEcho, Diagnostics, InputEcho, ResultDocument, RowResult, RuleSummary, SCHEMA_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wemix", version, about = "Robust Gaussian mixture clustering by weighted likelihood")]
pub struct Cli {
    /// Worker threads for multi-start fits and simulation trials.
    #[arg(long, global = true, env = "WEMIX_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a mixture and write a JSON result document.
    Fit(FitArgs),
    /// Sweep bandwidths and cluster counts, writing CSV traces.
    Monitor(MonitorArgs),
    /// Run a Monte Carlo study on simulated data.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Numeric CSV file, one observation per row.
    #[arg(long)]
    pub data: PathBuf,
    /// Field delimiter: ',' or ';'.
    #[arg(long, default_value = ",")]
    pub delimiter: String,
    /// First line holds column names.
    #[arg(long)]
    pub header: bool,
    /// Columns to use: 1-based positions or header names, comma separated.
    #[arg(long)]
    pub columns: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// wem, wcem, em or cem.
    #[arg(long, default_value = "wem")]
    pub algorithm: String,
    /// Residual adjustment function, e.g. gkl:0.9, pdm:2, pdm:inf.
    #[arg(long, default_value = "gkl:0.9")]
    pub raf: String,
    /// folded-normal, gamma or log-transform.
    #[arg(long, default_value = "folded-normal")]
    pub kernel: String,
    /// Kernel bandwidth.
    #[arg(long, default_value_t = 0.5)]
    pub h: f64,
    /// Bound on the ratio of largest to smallest covariance eigenvalue.
    #[arg(long, default_value_t = 50.0)]
    pub eigen_ratio: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
    /// Random starting values.
    #[arg(long, default_value_t = 20)]
    pub starts: usize,
    /// Seed; drawn from entropy and echoed in the output when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Effective-sample-size correction of the weighted covariances.
    #[arg(long)]
    pub unbias_cov: bool,
    /// Monte Carlo draws for the root score.
    #[arg(long, default_value_t = 10_000)]
    pub root_draws: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub k: usize,
    /// Start from a trimmed solution discarding this fraction of rows
    /// instead of random starts.
    #[arg(long)]
    pub start_trim: Option<f64>,
    /// Outlier rule, repeatable: chi2:<alpha>, weight:<threshold>, weight:adaptive.
    #[arg(long = "detect")]
    pub detect: Vec<String>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MonitorArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Bandwidth grid start:stop:count.
    #[arg(long)]
    pub h_grid: String,
    /// Space the bandwidth grid logarithmically.
    #[arg(long)]
    pub log_grid: bool,
    /// Cluster counts, comma separated.
    #[arg(long, default_value = "1,2,3,4")]
    pub k_grid: String,
    #[arg(long)]
    pub start_trim: Option<f64>,
    /// Trace CSV (k, h, downweighting, weighted_bic, weighted_aic, wclass_loglik, converged).
    #[arg(long)]
    pub trace: PathBuf,
    /// Per-point conditional distances CSV (k, h, row, dist2).
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// Minimum drop in downweighting level counted as a changepoint.
    #[arg(long, default_value_t = 0.10)]
    pub jump: f64,
    /// Downweighting level targeted when no changepoint exists.
    #[arg(long, default_value_t = 0.10)]
    pub target: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// m5 or example4.
    #[arg(long, default_value = "m5")]
    pub scheme: String,
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Whether n counts the contaminated total or the clean points: total or clean.
    #[arg(long, default_value = "total")]
    pub eps_base: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.99)]
    pub outlier_quantile: f64,
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Fit each trial once from a trimmed start discarding this fraction of
    /// rows instead of from random starts.
    #[arg(long)]
    pub start_trim: Option<f64>,
    /// JSON scenario file, either a list or `{"scenarios": [...]}`; replaces the scenario flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "detect")]
    pub detect: Vec<String>,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-trial CSV.
    #[arg(long)]
    pub trials_csv: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INPUT, message: message.into() }
    }
}

impl From<InputError> for Failure {
    fn from(e: InputError) -> Self {
        Failure::input(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::AllRootsDegenerate | Error::DegenerateComponent { .. } => EXIT_DEGENERATE,
            _ => EXIT_INPUT,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::input(format!("{}: {e}", path.display()))
}

fn entropy_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    h.write_u128(std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos()));
    h.finish()
}

impl EngineArgs {
    pub fn to_config(&self) -> Result<FitConfig, Failure> {
        let family: KernelFamily = self.kernel.parse()?;
        let config = FitConfig {
            algorithm: self.algorithm.parse()?,
            kernel: KernelSpec::new(family, self.h)?,
            raf: self.raf.parse::<RafSpec>()?,
            eigen_ratio: self.eigen_ratio,
            max_iter: self.max_iter,
            rel_tol: self.rel_tol,
            n_starts: self.starts,
            seed: self.seed.unwrap_or_else(entropy_seed),
            unbias_cov: self.unbias_cov,
            root_mc_draws: self.root_draws,
        };
        config.validate()?;
        if config.n_starts == 0 {
            return Err(Failure::input("--starts must be at least 1"));
        }
        Ok(config)
    }
}

impl InputArgs {
    fn options(&self) -> Result<CsvOptions, Failure> {
        Ok(CsvOptions {
            delimiter: parse_delimiter(&self.delimiter)?,
            header: self.header,
            columns: match &self.columns {
                Some(c) => ColumnSelection::parse(c)?,
                None => ColumnSelection::All,
            },
        })
    }

    fn load(&self) -> Result<(DataMatrix, InputEcho), Failure> {
        let data = read_csv(&self.data, &self.options()?)?;
        let echo = InputEcho {
            path: self.data.display().to_string(),
            delimiter: self.delimiter.clone(),
            header: self.header,
            columns: self.columns.clone(),
            rows: data.n(),
            dims: data.p(),
        };
        Ok((data, echo))
    }
}

fn parse_rules(specs: &[String]) -> Result<Vec<DetectionRule>, Failure> {
    specs.iter().map(|s| s.parse::<DetectionRule>().map_err(Failure::from)).collect()
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| io_failure(p, e)),
        None => std::io::stdout().write_all(bytes).map_err(|e| Failure::input(e.to_string())),
    }
}

/// Single fit from a trimmed start, or a multi-start fit with root selection.
pub fn fit_with_start(data: &DataMatrix, k: usize, config: &FitConfig, start_trim: Option<f64>) -> Result<FitResult, Error> {
    match start_trim {
        Some(trim) => fit_trimmed(data, k, trim, config),
        None => fit(data, k, config, &[]),
    }
}

pub fn build_document(
    data: &DataMatrix,
    result: &FitResult,
    config: ConfigEcho,
) -> Result<ResultDocument, Error> {
    let p = data.p();
    let flags: Vec<Vec<bool>> =
        config.rules.iter().map(|r| detect_outliers(result, r, p)).collect::<Result<_, _>>()?;
    let rows = (0..data.n())
        .map(|i| RowResult {
            row: i + 1,
            assignment: result.assignments[i] + 1,
            weight: result.cond_weights[i],
            dist2: result.cond_dist2[i],
            outlier: flags.iter().map(|f| f[i]).collect(),
        })
        .collect();
    let rules = config
        .rules
        .iter()
        .zip(&flags)
        .map(|(rule, f)| {
            let flagged = f.iter().filter(|&&x| x).count();
            RuleSummary { rule: *rule, label: rule.to_string(), flagged, eps_hat: flagged as f64 / data.n() as f64 }
        })
        .collect();
    let diagnostics = Diagnostics {
        weighted_loglik: result.weighted_loglik,
        weighted_bic: weighted_ic(result, data, Penalty::Bic)?,
        weighted_aic: weighted_ic(result, data, Penalty::Aic)?,
        downweighting: result.downweighting(),
        root_score: result.root_score,
        root_score_empirical: result.root_score_empirical,
        iterations: result.iterations,
        converged: result.converged,
    };
    Ok(ResultDocument { schema_version: SCHEMA_VERSION, config, model: result.model.clone(), rows, rules, diagnostics })
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32, Failure> {
    if args.k == 0 {
        return Err(Failure::input("--k must be at least 1"));
    }
    let config = args.engine.to_config()?;
    let rules = parse_rules(&args.detect)?;
    let (data, input) = args.input.load()?;
    let result = fit_with_start(&data, args.k, &config, args.start_trim)?;
    let echo = ConfigEcho { k: args.k, fit: config, start_trim: args.start_trim, rules, input };
    let doc = build_document(&data, &result, echo)?;
    let mut json = serde_json::to_vec_pretty(&doc).map_err(|e| Failure::input(e.to_string()))?;
    json.push(b'\n');
    write_output(args.out.as_deref(), &json)?;
    Ok(if result.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

/// `start:stop:count`, linear unless `log` is set.
pub fn parse_h_grid(spec: &str, log: bool) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::input(format!("bad --h-grid '{spec}', expected start:stop:count"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(start > 0.0 && start <= stop) || (count == 1 && start != stop) {
        return Err(Failure::input(format!("--h-grid '{spec}' needs 0 < start <= stop, and start = stop for a single value")));
    }
    let grid = if log { geomspace(start, stop, count)? } else { MonitorSpec::linspace(start, stop, count)? };
    Ok(grid)
}

pub fn parse_k_grid(spec: &str) -> Result<Vec<usize>, Failure> {
    spec.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::input(format!("bad --k-grid entry '{s}'"))))
        .collect()
}

pub fn cmd_monitor(args: &MonitorArgs) -> Result<i32, Failure> {
    let config = args.engine.to_config()?;
    let mut spec = MonitorSpec::new(parse_h_grid(&args.h_grid, args.log_grid)?, parse_k_grid(&args.k_grid)?)?;
    spec.start_trim = args.start_trim;
    let (data, _) = args.input.load()?;
    let grid = monitor(&data, &config, &spec)?;

    let mut trace = String::from("k,h,downweighting,weighted_bic,weighted_aic,wclass_loglik,converged\n");
    for c in &grid.cells {
        let _ = writeln!(
            trace,
            "{},{},{},{},{},{},{}",
            c.k, c.h, c.downweighting, c.weighted_bic, c.weighted_aic, c.wclass_loglik, c.converged
        );
    }
    std::fs::write(&args.trace, trace).map_err(|e| io_failure(&args.trace, e))?;
    if let Some(path) = &args.distances {
        let mut out = String::from("k,h,row,dist2\n");
        for c in &grid.cells {
            for (i, d) in c.cond_dist2.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", c.k, c.h, i + 1, d);
            }
        }
        std::fs::write(path, out).map_err(|e| io_failure(path, e))?;
    }
    for f in &grid.failures {
        eprintln!("cell k={} h={} failed: {}", f.k, f.h, f.error);
    }
    let options = SuggestOptions { jump_threshold: args.jump, target: args.target };
    for &k in &grid.k_values {
        match suggest_h(&grid, k, options) {
            Ok(s) => println!(
                "k={k}: suggested h={} ({}, score {:.4}, downweighting {:.4})",
                s.h, s.rationale, s.score, s.downweighting
            ),
            Err(e) => println!("k={k}: no suggestion ({e})"),
        }
    }
    let all_converged = grid.cells.iter().all(|c| c.converged);
    Ok(if all_converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn scenarios_from(args: &SimulateArgs, seed: u64) -> Result<Vec<SimScenario>, Failure> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum ScenarioFile {
            Wrapped { scenarios: Vec<SimScenario> },
            List(Vec<SimScenario>),
        }
        let parsed: ScenarioFile =
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let scenarios = match parsed {
            ScenarioFile::Wrapped { scenarios } | ScenarioFile::List(scenarios) => scenarios,
        };
        if scenarios.is_empty() {
            return Err(Failure::input("scenario file lists no scenarios"));
        }
        return Ok(scenarios);
    }
    let eps_base = match args.eps_base.as_str() {
        "total" => EpsBase::Total,
        "clean" => EpsBase::Clean,
        other => return Err(Failure::input(format!("unknown --eps-base '{other}', expected total or clean"))),
    };
    let mut scenario = match args.scheme.as_str() {
        "m5" => SimScenario::m5(args.p, args.beta, args.n, args.eps, seed),
        "example4" => SimScenario::example4(args.n, args.eps, seed),
        other => return Err(Failure::input(format!("unknown scheme '{other}', expected m5 or example4"))),
    };
    scenario.eps_base = eps_base;
    scenario.outlier_quantile = args.outlier_quantile;
    Ok(vec![scenario])
}

pub fn trials_csv(report: &StudyReport) -> String {
    let mut out = String::from("scenario,trial,seed,mu_err,sigma_err,pi_err,downweighting,rand,mce,converged");
    for rule in &report.config.rules {
        for m in ["eps_hat", "swamping", "masking", "rand", "mce"] {
            let _ = write!(out, ",{rule}_{m}");
        }
    }
    out.push('\n');
    for r in &report.records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scenario + 1,
            r.trial + 1,
            r.seed,
            r.accuracy.mu_err,
            r.accuracy.sigma_err,
            r.accuracy.pi_err,
            r.downweighting,
            r.rand,
            r.mce,
            r.converged
        );
        for m in &r.rules {
            let _ = write!(out, ",{},{},{},{},{}", m.eps_hat, m.swamping, m.masking, m.rand, m.mce);
        }
        out.push('\n');
    }
    out
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32, Failure> {
    if args.trials == 0 {
        return Err(Failure::input("--trials must be at least 1"));
    }
    let fit_config = args.engine.to_config()?;
    let seed = fit_config.seed;
    let scenarios = scenarios_from(args, seed)?;
    if scenarios.iter().any(|s| s.scheme == Scheme::M5 && s.p < 2) {
        return Err(Failure::input("the m5 scheme needs --p >= 2"));
    }
    let mut rules = parse_rules(&args.detect)?;
    if rules.is_empty() {
        rules = vec![DetectionRule::chi2(0.01)?, DetectionRule::weight(0.2)?];
    }
    let config = StudyConfig { fit: fit_config, k: args.k, rules, start_trim: args.start_trim };
    let report = run_study(&scenarios, &config, args.trials)?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| Failure::input(e.to_string()))?;
    json.push(b'\n');
    write_output(args.out.as_deref(), &json)?;
    if let Some(path) = &args.trials_csv {
        std::fs::write(path, trials_csv(&report)).map_err(|e| io_failure(path, e))?;
    }
    for f in &report.failures {
        eprintln!("scenario {} trial {} failed: {}", f.scenario + 1, f.trial + 1, f.error);
    }
    Ok(if report.records.iter().all(|r| r.converged) { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::input("--threads must be at least 1"));
        }
        // a pool may already exist when several commands run in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run_cli(cli: &Cli) -> i32 {
    let outcome = configure_threads(cli.threads).and_then(|()| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Monitor(a) => cmd_monitor(a),
        Command::Simulate(a) => cmd_simulate(a),
    });
    match outcome {
        Ok(code) => {
            if code == EXIT_NOT_CONVERGED {
                eprintln!("warning: iteration limit reached before convergence");
            }
            code
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_cli(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}
