use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use ks_core::optimize::Status;
use ks_core::workflow::{self, CONTROLS_FILE};
use ks_core::{Error, Scenario};

/// Optimize dipole controls for a target Kelvin force and transport particle
/// concentrations with the result.
#[derive(Debug, Parser)]
#[command(name = "ks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize the controls and write controls.csv, iterations.csv,
    /// summary.csv and force_field.csv.
    Optimize(Common),
    /// Transport the initial concentration with a controls file.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Controls CSV; defaults to <out>/controls.csv.
        #[arg(long)]
        controls: Option<PathBuf>,
    },
    /// Optimize, then simulate with the written controls.
    Pipeline(Common),
    /// Parse and check a scenario without computing anything.
    Validate {
        /// Scenario file or bundled scenario name.
        #[arg(long)]
        scenario: String,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file or bundled scenario name.
    #[arg(long)]
    scenario: String,
    /// Output directory; defaults to the scenario's output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel kernels.
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for randomized tie-breaks. The current algorithms are
    /// deterministic, so it only appears in the log.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_STALL: u8 = 3;
const EXIT_SOLVER: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Scenario(_) | Error::Coverage(_) | Error::InvalidConfig(_) | Error::MeshFormat { .. } => {
                    EXIT_VALIDATION
                }
                Error::SolverDiverged { .. } | Error::Unstable { .. } => EXIT_SOLVER,
                Error::HorizonStep { .. } | Error::NonFiniteObjective { .. } => EXIT_STALL,
                _ => 1,
            };
        }
    }
    1
}

fn load(common: &Common) -> anyhow::Result<(Scenario, PathBuf)> {
    let s = Scenario::load(&common.scenario)?;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    info!("scenario `{}`, seed {}", s.name, common.seed);
    let out = common.out.clone().unwrap_or_else(|| s.output.dir.clone());
    Ok((s, out))
}

fn report_status(status: Status) -> u8 {
    match status {
        Status::Converged => 0,
        Status::MaxIterations => {
            warn!("optimizer reached the iteration limit");
            0
        }
        Status::Stalled => {
            warn!("optimizer stalled in the line search");
            EXIT_STALL
        }
    }
}

fn simulate(s: &Scenario, controls: &Path, out: &Path) -> anyhow::Result<()> {
    let traj = workflow::load_controls(s, controls)?;
    let sim = workflow::run_simulate(s, &traj, Some(out))?;
    if let Some(d) = sim.run.diagnostics.last() {
        println!(
            "final t = {:.4}: mass {:.6e}, min {:.3e}, max {:.3e}, center of mass ({:.4}, {:.4})",
            d.time, d.mass, d.min, d.max, d.center_of_mass.x, d.center_of_mass.y
        );
    }
    println!("wrote {} snapshots to {}", sim.snapshot_files.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            println!(
                "scenario `{}` is valid: {} dipoles, {:?} mode, N = {}, T = {}{}",
                s.name,
                s.dipoles.len(),
                s.dipoles.mode(),
                s.steps,
                s.final_time,
                if s.pde.is_some() { ", with transport" } else { "" }
            );
            Ok(0)
        }
        Command::Optimize(common) => {
            let (s, out) = load(&common)?;
            let o = workflow::run_optimize(&s, &out)?;
            println!(
                "J: constant {:.6e}, warm start {:.6e}, optimum {:.6e} ({:?}, {} iterations)",
                o.constant.total(),
                o.warm_start.total(),
                o.optimum.total(),
                o.result.status,
                o.result.iterations
            );
            Ok(report_status(o.result.status))
        }
        Command::Simulate { common, controls } => {
            let (s, out) = load(&common)?;
            let controls = controls.unwrap_or_else(|| out.join(CONTROLS_FILE));
            simulate(&s, &controls, &out)?;
            Ok(0)
        }
        Command::Pipeline(common) => {
            let (s, out) = load(&common)?;
            if s.pde.is_none() {
                return Err(Error::Scenario(format!("scenario `{}` has no [pde] block", s.name)).into());
            }
            let o = workflow::run_optimize(&s, &out)?;
            let code = report_status(o.result.status);
            if code != 0 {
                return Ok(code);
            }
            simulate(&s, &out.join(CONTROLS_FILE), &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
