//! Kelvin-force tracking with magnetic dipoles and monotone transport of
//! particle concentrations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod fem;
pub mod io;
pub mod magnetics;
pub mod objective;
pub mod optimize;
pub mod scenario;
pub mod transport;
pub mod workflow;

pub use domain::{disk_quadrature, MovingDomain, QuadratureRule, TargetField};
pub use error::{Error, Result};
pub use fem::{generate_mesh, DomainSpec, ScalarField, SparseOperator, TriMesh};
pub use magnetics::{ControlBounds, ControlMode, Controls, Curve, Dipole, DipoleConfig, FieldSample, Point};
pub use objective::{Breakdown, ControlTrajectory, ObjectiveConfig, TrackingProblem};
pub use optimize::{minimize, BfgsMemory, BoxBounds, IterationRecord, OptimizeResult, OptimizerSettings, Status};
pub use scenario::Scenario;
pub use transport::{BoundaryCondition, Diagnostics, DriftField, Scheme, TransportSettings};
