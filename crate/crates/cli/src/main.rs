//! `vectorquad`: runs the simulated scenarios and the allocation verification
//! suite, writing `log.csv`, `summary.json` and per-plot CSVs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use vectorquad::allocation::verify::{random_cases, run_case, VerifyReport};
use vectorquad::allocation::AllocationSettings;
use vectorquad::control::ControlGains;
use vectorquad::sim::scenario::failure_summary;
use vectorquad::sim::{run_scenario, RunSummary, Scenario, ScenarioConfig};
use vectorquad::RobotDescription;

/// Environment variable naming the directory searched for `robot.toml`,
/// `gains.toml` and `scenario.toml` when the matching flag is absent.
const CONFIG_DIR_ENV: &str = "VECTORQUAD_CONFIG_DIR";

/// Residual bound of `verify-allocation`.
const VERIFY_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "vectorquad", version, about = "Quadruped with vectorable rotors: scenario runner and allocation checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hold a hover setpoint in flight.
    Hover(RunArgs),
    /// Sweep the legs from the stand pose to straight and back while hovering.
    Transform(RunArgs),
    /// Stand on four feet, lift one leg with rotor assistance, lower it again.
    LegLift(RunArgs),
    /// Creeping gait on the ground.
    Walk(WalkArgs),
    /// Creeping gait followed by takeoff from the standing pose.
    Hybrid(WalkArgs),
    /// Random pose and wrench allocation roundtrips.
    VerifyAllocation(VerifyArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Robot description (TOML).
    #[arg(long, value_name = "FILE")]
    robot: Option<PathBuf>,
    /// Controller gains (TOML), replacing the `[gains]` table of the scenario config.
    #[arg(long, value_name = "FILE")]
    gains: Option<PathBuf>,
    /// Scenario configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory holding default `robot.toml`, `gains.toml` and `scenario.toml`.
    #[arg(long, value_name = "DIR", env = CONFIG_DIR_ENV)]
    config_dir: Option<PathBuf>,
    /// Random seed; with `--runs N` the seeds are `seed..seed+N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Simulated duration (s); walking runs stop earlier once the gait ends.
    #[arg(long, value_name = "S")]
    duration: Option<f64>,
    /// Number of independent seeds to run; each gets `<out>/seed-<n>`.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    runs: u32,
}

#[derive(Args, Debug)]
struct WalkArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Plan footholds from the measured pose instead of feed-forward.
    #[arg(long)]
    feedback: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of random cases.
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    /// Joint angles are drawn uniformly within this bound (deg).
    #[arg(long, value_name = "DEG", default_value_t = 60.0)]
    max_joint_deg: f64,
}

/// Failure that ends the process.
#[derive(Debug)]
enum Failure {
    /// Bad flags or configuration files: exit 2.
    Config(String),
    /// Verification failures or unwritable outputs: exit 1.
    Runtime(String),
    /// Scenario runs that ended early; their summaries are already on stdout: exit 1.
    RunsFailed(Vec<String>),
}

#[derive(Serialize)]
struct FailureLine<'a> {
    status: &'a str,
    failure: &'a str,
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (status, msg, code) = match self {
            Failure::Config(m) => ("config", m, 2),
            Failure::Runtime(m) => ("failed", m, 1),
            Failure::RunsFailed(runs) => {
                for r in runs {
                    eprintln!("run failed: {r}");
                }
                return ExitCode::from(1);
            }
        };
        eprintln!("error: {msg}");
        println!("{}", serde_json::to_string(&FailureLine { status, failure: msg }).expect("plain strings serialize"));
        ExitCode::from(code)
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: anyhow::Error) -> Failure {
    Failure::Runtime(format!("{e:#}"))
}

/// Explicit path if given (it must exist), else `<dir>/<name>` if that exists.
fn resolve(explicit: &Option<PathBuf>, dir: Option<&Path>, name: &str) -> Result<Option<PathBuf>, Failure> {
    if let Some(p) = explicit {
        if !p.is_file() {
            return Err(Failure::Config(format!("{} does not exist", p.display())));
        }
        return Ok(Some(p.clone()));
    }
    Ok(dir.map(|d| d.join(name)).filter(|p| p.is_file()))
}

struct Inputs {
    desc: RobotDescription,
    cfg: ScenarioConfig,
}

fn load_inputs(common: &CommonArgs) -> Result<Inputs, Failure> {
    let dir = common.config_dir.as_deref();
    if let Some(d) = dir {
        if !d.is_dir() {
            return Err(Failure::Config(format!("config directory {} does not exist", d.display())));
        }
    }
    let robot = resolve(&common.robot, dir, "robot.toml")?;
    let gains = resolve(&common.gains, dir, "gains.toml")?;
    let config = resolve(&common.config, dir, "scenario.toml")?;

    let desc = match &robot {
        Some(p) => RobotDescription::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => RobotDescription::default(),
    };
    let mut cfg = match &config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => {
            let mut cfg = ScenarioConfig::default();
            cfg.aerial = AllocationSettings::aerial(&desc);
            cfg.terrestrial = AllocationSettings::terrestrial(&desc);
            cfg
        }
    };
    if let Some(p) = &gains {
        cfg.gains = ControlGains::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(Inputs { desc, cfg })
}

/// Run one scenario and write its outputs into `dir`.
fn run_one(desc: &RobotDescription, scenario: Scenario, cfg: &ScenarioConfig, dir: &Path) -> anyhow::Result<RunSummary> {
    fs::create_dir_all(dir.join("plots")).with_context(|| format!("creating {}", dir.display()))?;
    let (log, summary) = match run_scenario(desc, scenario, cfg) {
        Ok(log) => {
            let summary = log.summary(cfg.steady_window);
            (Some(log), summary)
        }
        Err(e) => (e.log().cloned(), failure_summary(scenario, &e, cfg.steady_window)),
    };
    if let Some(log) = &log {
        let file = fs::File::create(dir.join("log.csv")).context("creating log.csv")?;
        log.write_csv(std::io::BufWriter::new(file)).context("writing log.csv")?;
        log.write_plot_csvs(&dir.join("plots")).context("writing plot CSVs")?;
    }
    let text = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    fs::write(dir.join("summary.json"), text + "\n").context("writing summary.json")?;
    Ok(summary)
}

fn pool(jobs: u16) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn run_command(scenario: Scenario, args: &RunArgs, feedback: bool) -> Result<(), Failure> {
    let Inputs { desc, mut cfg } = load_inputs(&args.common)?;
    if let Some(d) = args.duration {
        cfg.duration = Some(d);
    }
    if feedback {
        cfg.gait.feedback = true;
    }
    cfg.validate().map_err(config_err)?;

    let first = cfg.seed;
    let runs: Vec<(u64, PathBuf)> = (0..args.runs as u64)
        .map(|k| {
            let seed = first + k;
            let dir = if args.runs == 1 { args.common.out.clone() } else { args.common.out.join(format!("seed-{seed}")) };
            (seed, dir)
        })
        .collect();
    let results: Vec<anyhow::Result<RunSummary>> = pool(args.common.jobs)?.install(|| {
        runs.par_iter()
            .map(|(seed, dir)| {
                let cfg = ScenarioConfig { seed: *seed, ..cfg.clone() };
                run_one(&desc, scenario, &cfg, dir)
            })
            .collect()
    });

    let mut failed = Vec::new();
    for ((seed, dir), result) in runs.iter().zip(results) {
        let summary = result.map_err(runtime_err)?;
        println!("{}", serde_json::to_string(&summary).map_err(|e| Failure::Runtime(e.to_string()))?);
        if summary.status != "ok" {
            failed.push(format!(
                "seed {seed} ({}): {}",
                dir.display(),
                summary.failure.as_deref().unwrap_or(&summary.status)
            ));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::RunsFailed(failed))
    }
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    tolerance: f64,
    max_joint_deg: f64,
    passed: bool,
    report: &'a VerifyReport,
}

fn verify_command(args: &VerifyArgs) -> Result<(), Failure> {
    if !(args.max_joint_deg > 0.0) {
        return Err(Failure::Config("--max-joint-deg must be positive".into()));
    }
    let Inputs { desc, cfg } = load_inputs(&args.common)?;
    let seed = cfg.seed;
    let cases = random_cases(&desc, args.cases, seed, args.max_joint_deg.to_radians());
    let results: Vec<_> = pool(args.common.jobs)?.install(|| cases.par_iter().map(|c| run_case(&desc, c)).collect());
    let report = VerifyReport::from_results(seed, &results);
    let passed = report.failures == 0
        && report.max_wrench_residual < VERIFY_TOLERANCE
        && report.max_joint_residual < VERIFY_TOLERANCE
        && report.max_roundtrip_residual < VERIFY_TOLERANCE;

    println!("verify-allocation: {} cases, seed {seed}, joints within +-{} deg", report.cases, args.max_joint_deg);
    println!("  failed solves          {}", report.failures);
    println!("  max wrench residual    {:.3e}", report.max_wrench_residual);
    println!("  max joint residual     {:.3e}", report.max_joint_residual);
    println!("  max bound violation    {:.3e}", report.max_bound_violation);
    println!("  max roundtrip residual {:.3e}", report.max_roundtrip_residual);
    println!("  solve time             mean {:.3} ms, max {:.3} ms", report.mean_solve_time * 1e3, report.max_solve_time * 1e3);
    println!("  result                 {}", if passed { "PASS" } else { "FAIL" });

    fs::create_dir_all(&args.common.out)
        .with_context(|| format!("creating {}", args.common.out.display()))
        .map_err(runtime_err)?;
    let out = VerifyOutput { tolerance: VERIFY_TOLERANCE, max_joint_deg: args.max_joint_deg, passed, report: &report };
    let text = serde_json::to_string_pretty(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(args.common.out.join("verify_allocation.json"), text + "\n")
        .context("writing verify_allocation.json")
        .map_err(runtime_err)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} of {} cases failed or exceeded the residual bound", report.failures, report.cases)))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Hover(a) => run_command(Scenario::Hover, a, false),
        Command::Transform(a) => run_command(Scenario::Transform, a, false),
        Command::LegLift(a) => run_command(Scenario::LegLift, a, false),
        Command::Walk(a) => run_command(Scenario::Walk, &a.run, a.feedback),
        Command::Hybrid(a) => run_command(Scenario::Hybrid, &a.run, a.feedback),
        Command::VerifyAllocation(a) => verify_command(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
