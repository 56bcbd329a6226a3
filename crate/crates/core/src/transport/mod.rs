//! Drift-diffusion transport of a concentration driven by the Kelvin force.

pub mod eafe;
pub mod solver;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_drift_diffusion, assemble_mass, lumped_mass, ScalarField, SparseOperator, TriMesh};
use crate::magnetics::{Controls, DipoleConfig, Point};

pub use eafe::{assemble_eafe, bernoulli, eafe_edge_coefficient, edge_weights};
pub use solver::{bicgstab, SolveStats, SolverSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    /// Zero total flux.
    Neumann,
    /// Zero concentration.
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    EafeImplicit,
    ExplicitLumped,
}

/// Mass matrix used on both sides of the implicit step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassKind {
    /// Row-sum lumped; keeps the step matrix an M-matrix.
    Lumped,
    Consistent,
}

/// What to do when an explicit step exceeds the stability bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityPolicy {
    Warn,
    Abort,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportSettings {
    pub epsilon: f64,
    pub dt: f64,
    pub final_time: f64,
    pub bc: BoundaryCondition,
    pub scheme: Scheme,
    pub solver: SolverSettings,
    pub implicit_mass: MassKind,
    pub stability: StabilityPolicy,
    pub safety: f64,
}

impl TransportSettings {
    pub fn new(epsilon: f64, dt: f64, final_time: f64, bc: BoundaryCondition, scheme: Scheme) -> Self {
        Self {
            epsilon,
            dt,
            final_time,
            bc,
            scheme,
            solver: SolverSettings::default(),
            implicit_mass: MassKind::Lumped,
            stability: StabilityPolicy::Warn,
            safety: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.scheme == Scheme::EafeImplicit && !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("the EAFE scheme needs epsilon > 0".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "time step must be positive, got {}",
                self.dt
            )));
        }
        if !(self.final_time > 0.0) {
            return Err(Error::InvalidConfig("final time must be positive".into()));
        }
        if !(self.safety > 0.0) {
            return Err(Error::InvalidConfig("stability safety factor must be positive".into()));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iters == 0 {
            return Err(Error::InvalidConfig("invalid linear solver settings".into()));
        }
        Ok(())
    }

    /// Number of steps and the (possibly shortened) step that lands on `final_time`.
    pub fn step_count(&self) -> (usize, f64) {
        let n = ((self.final_time / self.dt) - 1e-9).ceil().max(1.0) as usize;
        (n, self.final_time / n as f64)
    }
}

/// Nodal magnetic potential `|h|²` and Kelvin force `∇|h|²`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftField {
    pub potential: Vec<f64>,
    pub kelvin: Vec<Point>,
}

impl DriftField {
    pub fn zero(n: usize) -> Self {
        Self {
            potential: vec![0.0; n],
            kelvin: vec![Point::zeros(); n],
        }
    }

    /// Evaluate the dipole field at every mesh vertex.
    pub fn from_controls(dipoles: &DipoleConfig, controls: &Controls, mesh: &TriMesh) -> Result<Self> {
        let sources = dipoles.sources(controls)?;
        let samples: Vec<Result<(f64, Point)>> = mesh
            .vertices()
            .par_iter()
            .map(|x| {
                let s = crate::magnetics::field_from_sources(&sources, *x)?;
                Ok((s.magnitude_squared(), s.kelvin))
            })
            .collect();
        let mut potential = Vec::with_capacity(samples.len());
        let mut kelvin = Vec::with_capacity(samples.len());
        for s in samples {
            let (p, k) = s?;
            potential.push(p);
            kelvin.push(k);
        }
        Ok(Self { potential, kelvin })
    }
}

/// Apply `(I + B_r) M̄⁻¹` with `B_r = M̄⁻¹(M̄ − M)` to `b`: a correction of the
/// lumped inverse toward `M⁻¹` that needs no linear solve.
pub fn corrected_lumped_inverse(mass: &SparseOperator, lumped: &[f64], b: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = b.iter().zip(lumped).map(|(v, m)| v / m).collect();
    let mw = mass.mul_vec(&w);
    w.iter()
        .zip(mw.iter().zip(lumped))
        .map(|(wi, (mwi, m))| 2.0 * wi - mwi / m)
        .collect()
}

/// One backward-Euler step `(M + Δt A) cⁿ = M cⁿ⁻¹`.
///
/// `mass` may be the consistent or a diagonal lumped matrix. Rows of
/// vertices flagged in `dirichlet` are replaced by the identity with zero
/// right-hand side.
pub fn implicit_step(
    mass: &SparseOperator,
    op: &SparseOperator,
    prev: &[f64],
    dt: f64,
    dirichlet: Option<&[bool]>,
    solver: &SolverSettings,
) -> Result<(Vec<f64>, SolveStats)> {
    let mut sys = op.clone();
    sys.scale(dt);
    let mut sys = sys.add_scaled(1.0, mass);
    let mut rhs = mass.mul_vec(prev);
    let mut x = prev.to_vec();
    if let Some(bnd) = dirichlet {
        for (i, &b) in bnd.iter().enumerate() {
            if b {
                sys.set_identity_row(i);
                rhs[i] = 0.0;
                x[i] = 0.0;
            }
        }
    }
    let stats = bicgstab(&sys, &rhs, &mut x, solver)?;
    Ok((x, stats))
}

/// Largest stable explicit step, `min_i m̄_ii / Σ_j |A_ij|` over the active rows.
pub fn stability_limit(lumped: &[f64], op: &SparseOperator, dirichlet: Option<&[bool]>) -> f64 {
    let mut limit = f64::INFINITY;
    for (i, m) in lumped.iter().enumerate() {
        if dirichlet.is_some_and(|b| b[i]) {
            continue;
        }
        let s: f64 = op.row(i).1.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            limit = limit.min(m / s);
        }
    }
    limit
}

/// One forward-Euler step `cⁿ = cⁿ⁻¹ − Δt (I + B_r) M̄⁻¹ A cⁿ⁻¹`, with
/// Dirichlet vertices held at zero.
pub fn explicit_step(
    mass: &SparseOperator,
    lumped: &[f64],
    op: &SparseOperator,
    prev: &[f64],
    dt: f64,
    dirichlet: Option<&[bool]>,
) -> Vec<f64> {
    let mut ac = op.mul_vec(prev);
    if let Some(bnd) = dirichlet {
        ac.iter_mut().zip(bnd).filter(|(_, b)| **b).for_each(|(v, _)| *v = 0.0);
    }
    let z = corrected_lumped_inverse(mass, lumped, &ac);
    let mut next: Vec<f64> = prev.iter().zip(&z).map(|(c, zi)| c - dt * zi).collect();
    if let Some(bnd) = dirichlet {
        next.iter_mut()
            .zip(bnd)
            .filter(|(_, b)| **b)
            .for_each(|(v, _)| *v = 0.0);
    }
    next
}

/// Mass, extrema and center of mass of a nodal field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub time: f64,
    pub mass: f64,
    pub min: f64,
    pub max: f64,
    pub center_of_mass: Point,
}

/// Precomputed moments for [`Diagnostics`].
#[derive(Clone, Debug)]
pub struct Moments {
    lumped: Vec<f64>,
    mx: Vec<f64>,
    my: Vec<f64>,
}

impl Moments {
    pub fn new(mesh: &TriMesh, mass: &SparseOperator) -> Self {
        let xs: Vec<f64> = mesh.vertices().iter().map(|p| p.x).collect();
        let ys: Vec<f64> = mesh.vertices().iter().map(|p| p.y).collect();
        Self {
            lumped: lumped_mass(mass),
            mx: mass.mul_vec(&xs),
            my: mass.mul_vec(&ys),
        }
    }

    pub fn diagnostics(&self, time: f64, c: &[f64]) -> Diagnostics {
        let mass: f64 = c.iter().zip(&self.lumped).map(|(a, b)| a * b).sum();
        let cx: f64 = c.iter().zip(&self.mx).map(|(a, b)| a * b).sum();
        let cy: f64 = c.iter().zip(&self.my).map(|(a, b)| a * b).sum();
        Diagnostics {
            time,
            mass,
            min: c.iter().copied().fold(f64::INFINITY, f64::min),
            max: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            center_of_mass: Point::new(cx / mass, cy / mass),
        }
    }
}

/// `exp(-|x - center|² / sigma2)` at every vertex.
pub fn gaussian_bump(mesh: &TriMesh, center: Point, sigma2: f64) -> Vec<f64> {
    mesh.vertices()
        .iter()
        .map(|x| (-(x - center).norm_squared() / sigma2).exp())
        .collect()
}

#[derive(Clone, Debug)]
pub struct TransportRun {
    pub snapshots: Vec<ScalarField>,
    pub diagnostics: Vec<Diagnostics>,
    pub final_field: ScalarField,
    pub steps: usize,
    pub dt: f64,
}

/// Integrate from `c0` to the final time.
///
/// `drift_at(t)` supplies the magnetic drift; it is evaluated at the new time
/// level for the implicit scheme and at the old one for the explicit scheme.
/// Snapshots are taken at the steps closest to `snapshot_times` and handed to
/// `on_snapshot` as soon as they exist.
pub fn run(
    mesh: &TriMesh,
    settings: &TransportSettings,
    c0: Vec<f64>,
    mut drift_at: impl FnMut(f64) -> Result<DriftField>,
    snapshot_times: &[f64],
    on_snapshot: &mut dyn FnMut(&ScalarField) -> Result<()>,
) -> Result<TransportRun> {
    settings.validate()?;
    if c0.len() != mesh.num_vertices() {
        return Err(Error::DimensionMismatch {
            what: "initial concentration",
            expected: mesh.num_vertices(),
            found: c0.len(),
        });
    }
    let (steps, dt) = settings.step_count();
    let mass = assemble_mass(mesh)?;
    let lumped = lumped_mass(&mass);
    let moments = Moments::new(mesh, &mass);
    let dirichlet = match settings.bc {
        BoundaryCondition::Dirichlet => Some(mesh.boundary_markers()),
        BoundaryCondition::Neumann => None,
    };
    let weights = match settings.scheme {
        Scheme::EafeImplicit => {
            if !mesh.is_nonobtuse() {
                warn!("mesh has obtuse angles; the EAFE operator may lose monotonicity");
            }
            edge_weights(mesh)?
        }
        Scheme::ExplicitLumped => Vec::new(),
    };
    let implicit_mass = match settings.implicit_mass {
        MassKind::Lumped => SparseOperator::from_diagonal(&lumped),
        MassKind::Consistent => mass.clone(),
    };

    let snap_steps: Vec<usize> = snapshot_times
        .iter()
        .map(|&s| ((s / dt).round().max(0.0) as usize).min(steps))
        .collect();
    let mut snapshots = Vec::new();
    let mut take = |n: usize, c: &[f64], snapshots: &mut Vec<ScalarField>| -> Result<()> {
        for _ in snap_steps.iter().filter(|&&k| k == n) {
            let f = ScalarField {
                time: n as f64 * dt,
                values: c.to_vec(),
            };
            on_snapshot(&f)?;
            snapshots.push(f);
        }
        Ok(())
    };

    let mut c = c0;
    if let Some(bnd) = dirichlet {
        c.iter_mut().zip(bnd).filter(|(_, b)| **b).for_each(|(v, _)| *v = 0.0);
    }
    let mut diagnostics = vec![moments.diagnostics(0.0, &c)];
    take(0, &c, &mut snapshots)?;
    let mut warned = false;

    for n in 1..=steps {
        let t = n as f64 * dt;
        c = match settings.scheme {
            Scheme::EafeImplicit => {
                let drift = drift_at(t)?;
                let op = eafe::assemble_with_weights(mesh, &weights, &drift.potential, settings.epsilon);
                let (next, stats) = implicit_step(&implicit_mass, &op, &c, dt, dirichlet, &settings.solver)?;
                debug!("step {n}: {} solver iterations", stats.iterations);
                next
            }
            Scheme::ExplicitLumped => {
                let drift = drift_at(t - dt)?;
                let op = assemble_drift_diffusion(mesh, settings.epsilon, &drift.kelvin)?;
                let limit = settings.safety * stability_limit(&lumped, &op, dirichlet);
                if dt > limit {
                    match settings.stability {
                        StabilityPolicy::Abort => return Err(Error::Unstable { dt, limit }),
                        StabilityPolicy::Warn if !warned => {
                            warn!("step {n}: dt {dt:.3e} exceeds the stability limit {limit:.3e}");
                            warned = true;
                        }
                        StabilityPolicy::Warn => {}
                    }
                }
                let next = explicit_step(&mass, &lumped, &op, &c, dt, dirichlet);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Unstable { dt, limit });
                }
                next
            }
        };
        diagnostics.push(moments.diagnostics(t, &c));
        take(n, &c, &mut snapshots)?;
    }
    Ok(TransportRun {
        snapshots,
        diagnostics,
        final_field: ScalarField {
            time: steps as f64 * dt,
            values: c,
        },
        steps,
        dt,
    })
}
