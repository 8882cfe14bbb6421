//! `mkv` command-line front end.
//!
//! Settings resolve as flags > `--config` file > built-in defaults. Every
//! run writes its data CSVs, an SVG rendered from them, the fully resolved
//! config (`config.toml`, usable as `--config` to reproduce the run) and a
//! `manifest.json` listing every file written.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 validation failure,
//! 3 numerical blowup.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{
    chaos_decay, continuity_study, equivalence_study, limit_study, moment_study, piecewise_study, solve_lq_oracle, Estimator, LQSpec, LimitMode,
    LimitOptions, LinearFeedbackFamily, Perturbation,
};
use crate::config::{named_problem, PolicyConfig, Problem, RunConfig, StudyConfig};
use crate::model::{validate_spec, ValidationConfig};
use crate::output::{num, svg_plot, Table};
use crate::timebase::TimeGrid;
use crate::value::{estimate_value, optimize_value, simulate_batch};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mkv", version, about = "Particle simulation and control of McKean-Vlasov diffusions with common noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Sample-check the growth, Lipschitz and coercivity conditions.
    Validate,
    /// Simulate one batch and export the particle paths.
    Simulate,
    /// Monte-Carlo value of a policy.
    Estimate,
    /// Cross-entropy search over the linear-feedback family.
    Optimize,
    /// Value gap to the oracle as the population grows.
    StudyLimit,
    /// Relaxed control against its chattered realizations.
    StudyEquivalence,
    /// Value response to perturbations of the initial law.
    StudyContinuity,
    /// Distance of small populations to a large reference population.
    StudyChaos,
    /// Sup-moment constant across population sizes.
    StudyMoment,
    /// Piecewise-constant approximation of an open-loop control.
    StudyPiecewise,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Optimize => "optimize",
            Command::StudyLimit => "study-limit",
            Command::StudyEquivalence => "study-equivalence",
            Command::StudyContinuity => "study-continuity",
            Command::StudyChaos => "study-chaos",
            Command::StudyMoment => "study-moment",
            Command::StudyPiecewise => "study-piecewise",
        }
    }

    fn default_batches(self) -> usize {
        match self {
            Command::Validate | Command::Simulate => 1,
            Command::Estimate | Command::StudyPiecewise => 64,
            Command::Optimize | Command::StudyMoment => 32,
            Command::StudyLimit => 512,
            Command::StudyEquivalence => 256,
            Command::StudyContinuity => 400,
            Command::StudyChaos => 16,
        }
    }

    fn default_particles(self) -> Vec<usize> {
        match self {
            Command::Simulate => vec![64],
            Command::StudyLimit => vec![64, 128, 256, 512],
            Command::StudyChaos => vec![16, 32, 64, 128],
            Command::StudyMoment => vec![64, 256, 1024],
            _ => vec![256],
        }
    }

    fn default_estimator(self) -> (Estimator, bool) {
        match self {
            Command::StudyLimit => (Estimator::Richardson, true),
            Command::StudyContinuity => (Estimator::Richardson, false),
            _ => (Estimator::Euler, false),
        }
    }

    /// block counts of the piecewise study must divide the grid
    fn default_steps(self) -> usize {
        match self {
            Command::StudyPiecewise => 64,
            _ => 50,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Euler,
    Richardson,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PerturbationArg {
    Mean,
    Variance,
}

#[derive(Debug, Args)]
struct Flags {
    /// named problem: lq1d, zero, drift-only
    #[arg(long, global = true)]
    problem: Option<String>,
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// time steps of the simulation grid
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// particle counts, comma separated
    #[arg(long = "N", global = true, value_delimiter = ',')]
    particles: Option<Vec<usize>>,
    #[arg(long, global = true)]
    batches: Option<usize>,
    /// worker threads (default: all cores)
    #[arg(long, global = true, env = "MKV_THREADS")]
    threads: Option<usize>,
    /// output directory (default: out/<subcommand>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// terminal constant of the `zero` problem
    #[arg(long = "g-const", global = true, allow_negative_numbers = true)]
    g_const: Option<f64>,
    #[arg(long, global = true, value_enum)]
    estimator: Option<EstimatorArg>,
    /// add the oracle control variate in the limit study
    #[arg(long = "control-variate", global = true)]
    control_variate: Option<bool>,
    /// optimizer evaluation budget
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// perturbation sizes, comma separated
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    eps: Option<Vec<f64>>,
    #[arg(long, global = true, value_enum)]
    perturbation: Option<PerturbationArg>,
}

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config_path: Option<String>,
    /// sha256 of the resolved `config.toml`
    pub config_hash: String,
    pub problem: String,
    pub seed: u64,
    pub horizon: f64,
    pub steps: usize,
    pub particles: Vec<usize>,
    pub batches: usize,
    pub threads: Option<usize>,
    pub git_describe: String,
    pub version: String,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<OutputEntry>,
}

/// Files written by one run, in order.
struct Outputs {
    dir: PathBuf,
    files: Vec<OutputEntry>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        self.files.push(OutputEntry { path: name.to_string(), sha256: sha256_hex(contents.as_bytes()) });
        Ok(())
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        self.write(name, &t.to_csv())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Resolved settings of one run.
struct Settings {
    command: Command,
    config: RunConfig,
    problem: Problem,
    problem_name: String,
    seed: u64,
    steps: usize,
    particles: Vec<usize>,
    batches: usize,
    study: StudyConfig,
    estimator: Estimator,
    control_variate: bool,
}

impl Settings {
    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.problem.spec.horizon, self.steps)
    }

    fn lq(&self) -> Result<LQSpec> {
        self.problem.lq.ok_or_else(|| Error::Config(format!("{} needs the lq1d problem", self.command.name())))
    }

    fn policy(&self) -> Result<PolicyConfig> {
        Ok(match (&self.config.policy, &self.problem.lq) {
            (Some(p), _) => p.clone(),
            (None, Some(_)) => PolicyConfig::Oracle,
            (None, None) => PolicyConfig::Constant { action: self.problem.spec.action_space.a0.clone() },
        })
    }

    fn first_particles(&self) -> usize {
        self.particles[0]
    }
}

fn resolve(command: Command, flags: &Flags) -> Result<Settings> {
    let file = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let top = RunConfig {
        problem: flags.problem.clone(),
        seed: flags.seed,
        steps: flags.steps,
        particles: flags.particles.clone(),
        batches: flags.batches,
        threads: flags.threads,
        g_const: flags.g_const,
        ..RunConfig::default()
    };
    let mut cfg = file.overlay(top);
    let mut study = cfg.study.clone().unwrap_or_default();
    if let Some(e) = flags.estimator {
        study.estimator = Some(match e {
            EstimatorArg::Euler => Estimator::Euler,
            EstimatorArg::Richardson => Estimator::Richardson,
        });
    }
    if let Some(cv) = flags.control_variate {
        study.control_variate = Some(cv);
    }
    if let Some(b) = flags.budget {
        study.budget = b;
    }
    if let Some(e) = &flags.eps {
        study.epsilons = e.clone();
    }
    if let Some(p) = flags.perturbation {
        study.perturbation = match p {
            PerturbationArg::Mean => Perturbation::MeanShift,
            PerturbationArg::Variance => Perturbation::VarianceShift,
        };
    }
    let (est, cv) = command.default_estimator();
    study.estimator.get_or_insert(est);
    study.control_variate.get_or_insert(cv);

    let problem_name = cfg.problem.get_or_insert_with(|| "lq1d".into()).clone();
    let seed = *cfg.seed.get_or_insert(0);
    let steps = *cfg.steps.get_or_insert(command.default_steps());
    let particles = cfg.particles.get_or_insert_with(|| command.default_particles()).clone();
    let batches = *cfg.batches.get_or_insert(command.default_batches());
    let g_const = *cfg.g_const.get_or_insert(0.0);
    if particles.is_empty() || particles.contains(&0) || batches == 0 || steps == 0 {
        return Err(Error::Config("N, batches and steps must be positive".into()));
    }
    let problem = named_problem(&problem_name, cfg.lq, g_const)?;
    if let Some(lq) = problem.lq {
        cfg.lq = Some(lq);
    }
    cfg.validation.get_or_insert_with(ValidationConfig::default);
    cfg.study = Some(study.clone());
    Ok(Settings {
        command,
        config: cfg,
        problem,
        problem_name,
        seed,
        steps,
        particles,
        batches,
        estimator: study.estimator.unwrap_or_default(),
        control_variate: study.control_variate.unwrap_or(false),
        study,
    })
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalBlowup { .. } => 3,
        Error::InvalidSpec(_)
        | Error::OutOfRange { .. }
        | Error::ShapeMismatch(_)
        | Error::EmptyTruncation(_)
        | Error::InvalidWeights(_)
        | Error::OracleBlowup { .. } => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let res = match cli.flags.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| execute(&cli, &argv)),
            Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
        },
        None => execute(&cli, &argv),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mkv: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, argv: &[String]) -> Result<i32> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let s = resolve(cli.command, &cli.flags)?;
    let dir = cli.flags.out.clone().unwrap_or_else(|| Path::new("out").join(s.command.name()));
    let mut out = Outputs::new(dir)?;
    let config_text = s.config.to_toml()?;
    out.write("config.toml", &config_text)?;

    let code = dispatch(&s, &mut out)?;

    let manifest = RunManifest {
        subcommand: s.command.name().into(),
        argv: argv.to_vec(),
        config_path: cli.flags.config.as_ref().map(|p| p.display().to_string()),
        config_hash: sha256_hex(config_text.as_bytes()),
        problem: s.problem_name.clone(),
        seed: s.seed,
        horizon: s.problem.spec.horizon,
        steps: s.steps,
        particles: s.particles.clone(),
        batches: s.batches,
        threads: s.config.threads,
        git_describe: env!("MKV_GIT_DESCRIBE").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix,
        wall_seconds: started.elapsed().as_secs_f64(),
        outputs: out.files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.dir.join("manifest.json"), json + "\n")?;
    Ok(code)
}

fn dispatch(s: &Settings, out: &mut Outputs) -> Result<i32> {
    match s.command {
        Command::Validate => validate(s, out),
        Command::Simulate => simulate(s, out),
        Command::Estimate => estimate(s, out),
        Command::Optimize => optimize(s, out),
        Command::StudyLimit => study_limit(s, out),
        Command::StudyEquivalence => study_equivalence(s, out),
        Command::StudyContinuity => study_continuity(s, out),
        Command::StudyChaos => study_chaos(s, out),
        Command::StudyMoment => study_moment(s, out),
        Command::StudyPiecewise => study_piecewise(s, out),
    }
}

fn summary(rows: &[(&str, String)]) -> Table {
    let mut t = Table::new(["key", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), v.clone()]);
    }
    t
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "NaN".into())
}

fn series(t: &Table, x: &str, y: &str, abs: bool) -> Vec<(f64, f64)> {
    let xs = t.column(x).unwrap_or_default();
    let ys = t.column(y).unwrap_or_default();
    xs.into_iter().zip(ys).map(|(a, b)| (a, if abs { b.abs() } else { b })).collect()
}

fn validate(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let cfg = s.config.validation.unwrap_or_default();
    let report = validate_spec(&s.problem.spec, &cfg, s.seed)?;
    let mut t = Table::new(["check", "passed", "worst", "witness"]);
    for c in &report.checks {
        t.push(vec![c.name.clone(), c.passed.to_string(), num(c.worst), format!("\"{}\"", c.witness.replace('"', "'"))]);
    }
    out.table("validation.csv", &t)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    out.write("report.json", &(json + "\n"))?;
    println!("{}: {}", report.problem, if report.passed() { "all checks passed" } else { "validation FAILED" });
    Ok(if report.passed() { 0 } else { 2 })
}

fn simulate(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let grid = s.grid()?;
    let policy = s.policy()?.build(&s.problem, &grid)?;
    let n = s.first_particles();
    let ens = simulate_batch(&s.problem.spec, &policy, n, &grid, s.seed, 0)?;
    let mut buf = Vec::new();
    ens.empirical_at(grid.steps()).write_csv(&mut buf)?;
    out.write("paths.csv", &String::from_utf8_lossy(&buf))?;
    let mut t = Table::new(["t", "mean", "std"]);
    for k in 0..=grid.steps() {
        let xs: Vec<f64> = ens.x.slice_at(k).into_iter().step_by(s.problem.spec.n).collect();
        let (m, _) = crate::value::mean_and_se(&xs);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        t.push(vec![num(grid.t(k)), num(m), num(var.sqrt())]);
    }
    out.table("moments.csv", &t)?;
    out.write("moments.svg", &svg_plot("first coordinate", &[("mean", series(&t, "t", "mean", false)), ("std", series(&t, "t", "std", false))], false))?;
    Ok(0)
}

fn estimate(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let grid = s.grid()?;
    let policy = s.policy()?.build(&s.problem, &grid)?;
    let mut t = Table::new(["N", "batches", "value", "std_error"]);
    let mut b = Table::new(["N", "batch", "value"]);
    for &n in &s.particles {
        let est = estimate_value(&s.problem.spec, &policy, n, s.batches, &grid, s.seed)?;
        println!("N = {n}: value {} ± {}", est.mean, est.std_error);
        t.push(vec![n.to_string(), s.batches.to_string(), num(est.mean), num(est.std_error)]);
        for (i, v) in est.batch_values.iter().enumerate() {
            b.push(vec![n.to_string(), i.to_string(), num(*v)]);
        }
    }
    out.table("value.csv", &t)?;
    out.table("batches.csv", &b)?;
    Ok(0)
}

fn optimize(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let spec = &s.problem.spec;
    if spec.n != 1 || spec.action_space.dim() != 1 {
        return Err(Error::Config("the linear-feedback family needs scalar states and actions".into()));
    }
    let grid = s.grid()?;
    let fam = LinearFeedbackFamily::new(spec.horizon, s.study.knots);
    let n = s.first_particles();
    let res = optimize_value(spec, &fam, s.study.budget, n, s.batches, &grid, s.seed)?;
    let trace = res.trace_table();
    out.table("trace.csv", &trace)?;
    let oracle = match s.problem.lq {
        Some(lq) => Some(solve_lq_oracle(&lq, lq.mu0, lq.v0, &grid)?.1),
        None => None,
    };
    out.table(
        "result.csv",
        &summary(&[
            ("value", num(res.best.mean)),
            ("std_error", num(res.best.std_error)),
            ("oracle", opt_num(oracle)),
            ("evaluations", res.evaluations.to_string()),
            ("converged", res.converged.to_string()),
        ]),
    )?;
    let policy = RunConfig { policy: Some(PolicyConfig::LinearFeedback { knots: fam.knots, theta: res.theta.clone() }), ..RunConfig::default() };
    out.write("policy.toml", &policy.to_toml()?)?;
    out.write("trace.svg", &svg_plot("best value per generation", &[("best", series(&trace, "generation", "best", false))], false))?;
    println!("best value {} ± {} (oracle {})", res.best.mean, res.best.std_error, opt_num(oracle));
    Ok(0)
}

fn study_limit(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let lq = s.lq()?;
    let opts = LimitOptions { batches: s.batches, mode: LimitMode::Oracle, estimator: s.estimator, control_variate: s.control_variate };
    let st = limit_study(&lq, &s.particles, &s.grid()?, s.seed, &opts)?;
    let t = st.table();
    out.table("limit.csv", &t)?;
    out.table(
        "summary.csv",
        &summary(&[("oracle", num(st.oracle)), ("slope", opt_num(st.slope)), ("se_slope", opt_num(st.se_slope)), ("decreasing", st.decreasing.to_string())]),
    )?;
    out.write("limit.svg", &svg_plot("|V_N - V| vs N", &[("gap", series(&t, "N", "gap", false)), ("std_error", series(&t, "N", "std_error", false))], true))?;
    println!("slope {} decreasing {}", opt_num(st.slope), st.decreasing);
    Ok(0)
}

fn study_equivalence(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let lq = s.lq()?;
    let st = equivalence_study(&lq, &s.study.atoms, &s.study.weights, &s.study.grids, s.first_particles(), s.batches, s.seed)?;
    let t = st.table();
    out.table("equivalence.csv", &t)?;
    out.table("summary.csv", &summary(&[("decreasing", st.decreasing.to_string())]))?;
    out.write("equivalence.svg", &svg_plot("|J_chattered - J_relaxed| vs m", &[("gap", series(&t, "m", "gap", true))], true))?;
    println!("decreasing {}", st.decreasing);
    Ok(0)
}

fn study_continuity(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let lq = s.lq()?;
    let st = continuity_study(&lq, s.study.perturbation, &s.study.epsilons, s.first_particles(), s.batches, &s.grid()?, s.seed, s.estimator)?;
    let t = st.table();
    out.table("continuity.csv", &t)?;
    let max_z = st.rows.iter().map(|r| r.z().abs()).fold(0.0, f64::max);
    out.table("summary.csv", &summary(&[("slope", opt_num(st.slope)), ("max_abs_z", num(max_z))]))?;
    out.write(
        "continuity.svg",
        &svg_plot("|value gap| vs eps", &[("estimate", series(&t, "epsilon", "gap", true)), ("oracle", series(&t, "epsilon", "oracle_gap", true))], true),
    )?;
    println!("max |z| {max_z}");
    Ok(0)
}

fn study_chaos(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let grid = s.grid()?;
    let policy = s.policy()?.build(&s.problem, &grid)?;
    let st = chaos_decay(&s.problem.spec, &policy, &s.particles, s.study.reference, s.batches, &grid, s.study.order, s.seed)?;
    let t = st.table();
    out.table("chaos.csv", &t)?;
    out.table("summary.csv", &summary(&[("slope", opt_num(st.slope))]))?;
    out.write("chaos.svg", &svg_plot("integrated W_p to reference vs N", &[("distance", series(&t, "N", "distance", false))], true))?;
    println!("slope {}", opt_num(st.slope));
    Ok(0)
}

fn study_moment(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let grid = s.grid()?;
    let policy = s.policy()?.build(&s.problem, &grid)?;
    let st = moment_study(&s.problem.spec, &policy, &s.particles, s.batches, &grid, s.study.order, s.seed)?;
    let t = st.table();
    out.table("moment.csv", &t)?;
    out.table("summary.csv", &summary(&[("spread", num(st.spread))]))?;
    out.write("moment.svg", &svg_plot("fitted constant vs N", &[("constant", series(&t, "N", "constant", false))], false))?;
    println!("spread {}", st.spread);
    Ok(0)
}

fn study_piecewise(s: &Settings, out: &mut Outputs) -> Result<i32> {
    let grid = s.grid()?;
    let policy = match &s.config.policy {
        Some(p) => p.build(&s.problem, &grid)?,
        None => PolicyConfig::SmoothOpenLoop.build(&s.problem, &grid)?,
    };
    let st = piecewise_study(&s.problem.spec, &policy, &s.study.blocks, s.first_particles(), s.batches, &grid, s.seed)?;
    let t = st.table();
    out.table("piecewise.csv", &t)?;
    out.table("summary.csv", &summary(&[("increases", st.increases.to_string())]))?;
    out.write("piecewise.svg", &svg_plot("|J(a) - J(a_m)| vs blocks", &[("gap", series(&t, "blocks", "gap", false))], true))?;
    println!("increases {}", st.increases);
    Ok(0)
}
