//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for unusable input (bad flags, unreadable or
//! invalid files, infeasible embedded allocations), 2 when a solver fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::admm::ScheduleSolution;
use crate::error::{InputError, SolveError};
use crate::mechanism::run_vcg;
use crate::model::{self, Allocation, EvType, StationScenario};
use crate::sim::{run_experiment, ExperimentConfig};
use crate::solver::Solver;
use crate::AdmmConfig;

/// Tolerance used when checking emitted and embedded allocations.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EVFLEX_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "evflex", version, about = "Charge scheduling and VCG pricing for flexible EVs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute a schedule; writes `<stem>.schedule.json` and `<stem>.soc.csv`.
    Schedule {
        /// Scenario file (TOML, or JSON with a .json extension).
        scenario: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the VCG mechanism on reported types; writes `<stem>.vcg.json`.
    Vcg {
        scenario: PathBuf,
        /// File with a `reports` array of EV types, one per EV.
        reports: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run an experiment sweep; writes `<name>.json` and `<name>.csv`.
    Experiment {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check a scenario and any embedded allocations.
    Validate { scenario: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverKind {
    Exact,
    Admm,
}

#[derive(Debug, Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value_t = SolverKind::Exact)]
    solver: SolverKind,
    /// ADMM penalty ν ($·h/kW²).
    #[arg(long)]
    nu: Option<f64>,
    /// ADMM sweep limit.
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// ADMM bus-overload tolerance (kW).
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    out: PathBuf,
}

impl SolverArgs {
    fn build(&self) -> Result<Solver, InputError> {
        match self.solver {
            SolverKind::Exact => {
                if self.nu.is_some() || self.max_sweeps.is_some() || self.tol.is_some() {
                    return Err(InputError::invalid(
                        "solver",
                        "--nu, --max-sweeps and --tol only apply to --solver admm",
                    ));
                }
                Ok(Solver::exact())
            }
            SolverKind::Admm => {
                let mut cfg = AdmmConfig::default();
                if let Some(nu) = self.nu {
                    cfg.penalty = nu;
                }
                if let Some(k) = self.max_sweeps {
                    cfg.max_sweeps = k;
                }
                if let Some(tol) = self.tol {
                    cfg.primal_tolerance = tol;
                }
                cfg.validate()?;
                Ok(Solver::Admm(cfg))
            }
        }
    }
}

/// A scenario file: the station plus, optionally, a schedule to check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(flatten)]
    pub scenario: StationScenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocations: Option<Vec<Allocation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportsFile {
    pub reports: Vec<EvType>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Input(_) => 1,
            Failure::Solver(_) => 2,
        }
    }
}

impl From<InputError> for Failure {
    fn from(e: InputError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        if e.is_input() {
            Failure::Input(e.to_string())
        } else {
            Failure::Solver(e.to_string())
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> InputError {
    InputError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Reads TOML, or JSON when the extension is `.json`.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, InputError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|reason| InputError::Data {
        file: path.display().to_string(),
        line: None,
        reason,
    })
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), InputError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_error(dir, e))?;
    write(tmp.as_file_mut()).map_err(|e| io_error(path, e))?;
    tmp.as_file_mut().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), InputError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

#[derive(Serialize)]
struct SocRow {
    ev: usize,
    interval_index: usize,
    soc_kwh: f64,
    /// Empty on the final row, which has no outgoing interval.
    power_kw: Option<f64>,
}

/// SoC trajectory of every EV, one row per EV and step `0..=T`.
pub fn write_soc_csv<W: Write>(
    scenario: &StationScenario,
    allocations: &[Allocation],
    out: W,
) -> Result<(), SolveError> {
    let mut w = csv::Writer::from_writer(out);
    for (n, (ev, a)) in scenario.fleet.iter().zip(allocations).enumerate() {
        let soc = model::soc_trajectory(&ev.params, &a.power_profile, scenario.interval_hours)?;
        for (t, s) in soc.into_iter().enumerate() {
            w.serialize(SocRow {
                ev: n,
                interval_index: t,
                soc_kwh: s,
                power_kw: a.power_profile.get(t).copied(),
            })
            .map_err(|e| SolveError::Numerical(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| SolveError::Numerical(e.to_string()))?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn load_scenario(path: &Path) -> Result<ScenarioFile, InputError> {
    let file: ScenarioFile = read_document(path)?;
    file.scenario.validate()?;
    Ok(file)
}

fn ensure_feasible(scenario: &StationScenario, sol: &ScheduleSolution) -> Result<(), Failure> {
    let report = model::check_feasible(scenario, &sol.allocations, FEASIBILITY_TOL)?;
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(Failure::Solver(format!(
            "solver returned an infeasible schedule: {} violated at t={} by {:.3e}",
            v.constraint, v.time, v.magnitude
        ))),
    }
}

fn cmd_schedule(scenario: &Path, solver: &SolverArgs, out: &OutArgs) -> Result<(), Failure> {
    let solver = solver.build()?;
    let file = load_scenario(scenario)?;
    let sc = &file.scenario;
    let sol = solver.schedule(sc)?;
    ensure_feasible(sc, &sol)?;
    let base = stem(scenario);
    let json_path = out.out.join(format!("{base}.schedule.json"));
    let csv_path = out.out.join(format!("{base}.soc.csv"));
    write_json(&json_path, &sol)?;
    let mut buf = Vec::new();
    write_soc_csv(sc, &sol.allocations, &mut buf)?;
    write_atomic(&csv_path, |w| w.write_all(&buf))?;
    println!(
        "{} solver: social cost {:.6} $, bus residual {:.3e} kW, {} sweeps, converged {}",
        solver.name(),
        sol.social_cost,
        sol.primal_residual,
        sol.sweeps_used,
        sol.converged
    );
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn cmd_vcg(scenario: &Path, reports: &Path, solver: &SolverArgs, out: &OutArgs) -> Result<(), Failure> {
    let solver = solver.build()?;
    let file = load_scenario(scenario)?;
    let reports: ReportsFile = read_document(reports)?;
    let outcome = run_vcg(&file.scenario, &reports.reports, &solver)?;
    let path = out.out.join(format!("{}.vcg.json", stem(scenario)));
    write_json(&path, &outcome)?;
    for (n, (m, u)) in outcome.payments.iter().zip(&outcome.utilities).enumerate() {
        let ir = if outcome.ir_satisfied[n] { "" } else { " (IR violated)" };
        println!("EV {n}: payment {m:.6} $, utility {u:.6} ${ir}");
    }
    println!("station budget {:.6} $", outcome.station_budget);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_experiment(config: &Path, seed: Option<u64>, runs: Option<usize>, out_dir: &Path) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = read_document(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    let base = config.parent().unwrap_or(Path::new("."));
    let bundle = cfg.load_bundle(base)?;
    let result = run_experiment(&bundle, &cfg)?;
    let json_path = out_dir.join(format!("{}.json", cfg.name));
    let csv_path = out_dir.join(format!("{}.csv", cfg.name));
    write_json(&json_path, &result)?;
    let mut buf = Vec::new();
    result
        .write_csv(&mut buf)
        .map_err(|e| Failure::Input(format!("{}: {e}", csv_path.display())))?;
    write_atomic(&csv_path, |w| w.write_all(&buf))?;
    for a in &result.aggregates {
        println!(
            "bus {} kW, wear {} $/kWh: cost {:.4} ± {:.4} $, delay {:.2} min, v2g {:.3} kWh",
            a.point.bus_capacity,
            a.point.wear_cost,
            a.social_cost.mean,
            a.social_cost.std,
            a.avg_delay_min.mean,
            a.v2g_energy_kwh.mean
        );
    }
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn cmd_validate(scenario: &Path) -> Result<(), Failure> {
    let file = load_scenario(scenario)?;
    let sc = &file.scenario;
    println!(
        "scenario ok: {} EVs, {} intervals of {} h, bus {} kW",
        sc.fleet.len(),
        sc.horizon,
        sc.interval_hours,
        sc.bus_capacity
    );
    let Some(allocations) = &file.allocations else {
        return Ok(());
    };
    let report = model::check_feasible(sc, allocations, FEASIBILITY_TOL)?;
    if report.is_feasible() {
        println!("allocations feasible, social cost {:.6} $", model::social_cost(sc, allocations)?);
        return Ok(());
    }
    for v in &report.violations {
        let who = v.ev.map_or(String::new(), |n| format!("EV {n}, "));
        println!("violation: {} at {who}t={}: exceeded by {:.6}", v.constraint, v.time, v.magnitude);
    }
    Err(Failure::Input(format!(
        "{}: {} constraint violation(s) in allocations",
        scenario.display(),
        report.violations.len()
    )))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Schedule { scenario, solver, out } => cmd_schedule(scenario, solver, out),
        Command::Vcg {
            scenario,
            reports,
            solver,
            out,
        } => cmd_vcg(scenario, reports, solver, out),
        Command::Experiment {
            config,
            seed,
            runs,
            out_dir,
        } => cmd_experiment(config, *seed, *runs, out_dir),
        Command::Validate { scenario } => cmd_validate(scenario),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Input(msg) | Failure::Solver(msg)) = &f;
            eprintln!("error: {msg}");
            f.code()
        }
    }
}
