//! End-to-end runs driven by a [`Scenario`]: optimize the controls, transport
//! a concentration with them, and write the artifacts.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::domain::disk_quadrature;
use crate::error::{Error, Result};
use crate::fem::{assemble_drift_diffusion, assemble_mass, generate_mesh, lumped_mass, TriMesh};
use crate::io::{self, ForceSample};
use crate::magnetics::Point;
use crate::objective::{Breakdown, ControlTrajectory, TrackingProblem};
use crate::optimize::{init_horizon, optimize_trajectory, IterationRecord, OptimizeResult};
use crate::scenario::{InitStrategy, PdeConfig, Scenario, TimeStep};
use crate::transport::{self, gaussian_bump, stability_limit, DriftField, TransportRun, TransportSettings};

pub const CONTROLS_FILE: &str = "controls.csv";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const FORCE_FILE: &str = "force_field.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

/// Discretized tracking problem for the scenario.
pub fn build_problem(s: &Scenario) -> Result<TrackingProblem> {
    let (t, reach) = s
        .domain
        .max_reach(&disk_quadrature(s.domain.radius(), 1), Point::zeros(), 64);
    if reach > s.region_radius {
        warn!(
            "the moving domain reaches |x| = {reach:.3} at t = {t:.3}, outside the control region of radius {}",
            s.region_radius
        );
    }
    let rule = disk_quadrature(s.domain.radius(), s.quadrature_refinement);
    TrackingProblem::new(s.dipoles.clone(), &s.domain, &rule, &s.target, s.objective, s.steps)
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub trajectory: ControlTrajectory,
    pub result: OptimizeResult,
    /// Functional at the constant initial-control trajectory.
    pub constant: Breakdown,
    /// Functional at the warm start.
    pub warm_start: Breakdown,
    pub optimum: Breakdown,
}

/// Warm start followed by the full box-constrained solve.
pub fn optimize(
    s: &Scenario,
    problem: &TrackingProblem,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<OptimizeOutcome> {
    let constant_traj = problem.constant_trajectory();
    let constant = problem.evaluate(&constant_traj)?;
    let start = match s.init {
        InitStrategy::Horizon { stride, tol } => init_horizon(problem, &s.optimizer, stride, tol)?,
        InitStrategy::Constant => constant_traj,
    };
    let warm_start = problem.evaluate(&start)?;
    info!(
        "constant controls J = {:.6e}, warm start J = {:.6e}",
        constant.total(),
        warm_start.total()
    );
    let (trajectory, result) = optimize_trajectory(problem, &start, &s.optimizer, observer)?;
    let optimum = problem.evaluate(&trajectory)?;
    info!(
        "optimizer finished with {:?} after {} iterations: J = {:.6e}, projected gradient {:.3e}",
        result.status,
        result.iterations,
        optimum.total(),
        result.projected_gradient_norm
    );
    Ok(OptimizeOutcome {
        trajectory,
        result,
        constant,
        warm_start,
        optimum,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Optimize and write `controls.csv`, `iterations.csv`, `summary.csv` and
/// `force_field.csv` into `dir`.
pub fn run_optimize(s: &Scenario, dir: &Path) -> Result<OptimizeOutcome> {
    fs::create_dir_all(dir)?;
    let problem = build_problem(s)?;
    let mut log = create(dir, ITERATIONS_FILE)?;
    io::write_iteration_header(&mut log)?;
    let mut log_err = None;
    let outcome = optimize(s, &problem, &mut |rec| {
        if log_err.is_none() {
            if let Err(e) = io::write_iteration(&mut log, rec) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;

    let mut w = create(dir, CONTROLS_FILE)?;
    io::write_controls_csv(&mut w, &outcome.trajectory, s.dipoles.mode())?;
    w.flush()?;

    let mut w = create(dir, SUMMARY_FILE)?;
    writeln!(w, "trajectory,J,J1,J2,J3")?;
    for (label, b) in [
        ("constant", &outcome.constant),
        ("warm_start", &outcome.warm_start),
        ("optimum", &outcome.optimum),
    ] {
        let c = b.components();
        writeln!(
            w,
            "{label},{},{},{},{}",
            io::fmt_f64(b.total()),
            io::fmt_f64(c[0]),
            io::fmt_f64(c[1]),
            io::fmt_f64(c[2])
        )?;
    }
    w.flush()?;

    let samples = force_samples(s, &outcome.trajectory)?;
    let mut w = create(dir, FORCE_FILE)?;
    io::write_force_csv(&mut w, &samples)?;
    w.flush()?;
    Ok(outcome)
}

/// Field and Kelvin force on a square grid over the control region, at the
/// configured output times. Points outside the region are skipped.
pub fn force_samples(s: &Scenario, traj: &ControlTrajectory) -> Result<Vec<ForceSample>> {
    let n = s.output.force_grid.max(2);
    let r = s.region_radius;
    let mut out = Vec::new();
    for &t in &s.output.force_times {
        let controls = traj.interpolate(t)?;
        for j in 0..n {
            for i in 0..n {
                let x = Point::new(
                    -r + 2.0 * r * i as f64 / (n - 1) as f64,
                    -r + 2.0 * r * j as f64 / (n - 1) as f64,
                );
                if x.norm() > r {
                    continue;
                }
                let f = s.dipoles.eval_field(&controls, x)?;
                out.push(ForceSample {
                    time: t,
                    x,
                    h: f.h,
                    kelvin: f.kelvin,
                });
            }
        }
    }
    Ok(out)
}

/// Read a controls file and check it matches the scenario.
pub fn load_controls(s: &Scenario, path: &Path) -> Result<ControlTrajectory> {
    let file = File::open(path).map_err(|e| Error::Coverage(format!("cannot open {}: {e}", path.display())))?;
    let traj = io::read_controls_csv(BufReader::new(file), s.dipoles.mode())?;
    check_controls(s, &traj)?;
    Ok(traj)
}

fn check_controls(s: &Scenario, traj: &ControlTrajectory) -> Result<()> {
    if traj.num_dipoles() != s.dipoles.len() {
        return Err(Error::Coverage(format!(
            "controls describe {} dipoles, the scenario has {}",
            traj.num_dipoles(),
            s.dipoles.len()
        )));
    }
    let end = traj.final_time();
    if (end - s.final_time).abs() > 1e-9 * s.final_time {
        return Err(Error::Coverage(format!(
            "controls end at t = {end}, the scenario runs to {}",
            s.final_time
        )));
    }
    Ok(())
}

/// Mesh from the PDE block: read from file when given, generated otherwise.
pub fn build_mesh(pde: &PdeConfig) -> Result<TriMesh> {
    match &pde.mesh_file {
        Some(path) => {
            let f =
                File::open(path).map_err(|e| Error::Scenario(format!("cannot open mesh {}: {e}", path.display())))?;
            TriMesh::read_text(BufReader::new(f))
        }
        None => generate_mesh(&pde.domain, pde.mesh_size),
    }
}

fn pde_block(s: &Scenario) -> Result<&PdeConfig> {
    s.pde
        .as_ref()
        .ok_or_else(|| Error::Scenario(format!("scenario `{}` has no [pde] block", s.name)))
}

/// Largest stable explicit step over the control nodes, times the safety factor.
pub fn auto_time_step(s: &Scenario, pde: &PdeConfig, mesh: &TriMesh, traj: &ControlTrajectory) -> Result<f64> {
    let lumped = lumped_mass(&assemble_mass(mesh)?);
    let dirichlet = match pde.bc {
        transport::BoundaryCondition::Dirichlet => Some(mesh.boundary_markers()),
        transport::BoundaryCondition::Neumann => None,
    };
    let mut limit = f64::INFINITY;
    for n in 0..=traj.steps() {
        let drift = DriftField::from_controls(&s.dipoles, &traj.controls(n), mesh)?;
        let op = assemble_drift_diffusion(mesh, pde.epsilon, &drift.kelvin)?;
        limit = limit.min(stability_limit(&lumped, &op, dirichlet));
    }
    Ok(pde.safety * limit)
}

#[derive(Clone, Debug)]
pub struct SimulateOutcome {
    pub run: TransportRun,
    pub mesh: TriMesh,
    pub snapshot_files: Vec<PathBuf>,
}

/// Transport the initial bump with the given controls. Snapshots are written
/// to `dir` as they are produced, followed by the diagnostics table.
pub fn run_simulate(s: &Scenario, traj: &ControlTrajectory, dir: Option<&Path>) -> Result<SimulateOutcome> {
    let pde = pde_block(s)?;
    check_controls(s, traj)?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let mesh = build_mesh(pde)?;
    let dt = match pde.dt {
        TimeStep::Fixed(v) => v,
        TimeStep::Auto => {
            let v = auto_time_step(s, pde, &mesh, traj)?;
            info!("explicit time step from the stability bound: {v:.4e}");
            v
        }
    };
    let settings: TransportSettings = pde.transport_settings(s.final_time, dt);
    info!(
        "transport on {} vertices, {} triangles, {} steps",
        mesh.num_vertices(),
        mesh.num_triangles(),
        settings.step_count().0
    );
    let c0 = gaussian_bump(&mesh, pde.initial_center, pde.sigma2);
    let mut files = Vec::new();
    let mut on_snapshot = |f: &crate::fem::ScalarField| -> Result<()> {
        if let Some(d) = dir {
            let path = d.join(format!("snapshot_{:03}.vtk", files.len()));
            let mut w = BufWriter::new(File::create(&path)?);
            io::write_vtk(&mut w, &mesh, f)?;
            w.flush()?;
            files.push(path);
        }
        Ok(())
    };
    let run = transport::run(
        &mesh,
        &settings,
        c0,
        |t| DriftField::from_controls(&s.dipoles, &traj.interpolate(t)?, &mesh),
        &pde.snapshots,
        &mut on_snapshot,
    )?;
    if let Some(d) = dir {
        let mut w = create(d, DIAGNOSTICS_FILE)?;
        io::write_diagnostics_csv(&mut w, &run.diagnostics)?;
        w.flush()?;
    }
    Ok(SimulateOutcome {
        run,
        mesh,
        snapshot_files: files,
    })
}

/// Optimize, write the controls, read them back and simulate, so the result
/// matches running the two stages separately.
pub fn run_pipeline(s: &Scenario, dir: &Path) -> Result<(OptimizeOutcome, SimulateOutcome)> {
    pde_block(s)?;
    let opt = run_optimize(s, dir)?;
    let traj = load_controls(s, &dir.join(CONTROLS_FILE))?;
    let sim = run_simulate(s, &traj, Some(dir))?;
    Ok((opt, sim))
}
