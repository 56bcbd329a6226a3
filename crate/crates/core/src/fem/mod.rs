//! P1 finite elements on structured triangulations.

pub mod assembly;
pub mod mesh;
pub mod sparse;

pub use assembly::{assemble_drift_diffusion, assemble_mass, assemble_stiffness, basis_gradients, lumped_mass};
pub use mesh::{disk_triangulation, generate_mesh, DomainSpec, Edge, TriMesh};
pub use sparse::SparseOperator;

/// Nodal P1 field with a time stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub time: f64,
    pub values: Vec<f64>,
}
