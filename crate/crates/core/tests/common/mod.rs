#![allow(dead_code)]

use std::f64::consts::PI;

use ks_core::fem::assemble_mass;
use ks_core::transport::{self, DriftField, StabilityPolicy};
use ks_core::{
    generate_mesh, BoundaryCondition, ControlBounds, ControlMode, Controls, Dipole, DipoleConfig, DomainSpec, Point,
    Scheme, TransportSettings, TriMesh,
};

pub fn unit_square(h: f64) -> TriMesh {
    generate_mesh(
        &DomainSpec::Rectangle {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        },
        h,
    )
    .unwrap()
}

/// Four direction-controlled dipoles at angles 0, π/2, π, 3π/2 on the
/// radius-1.2 circle.
pub fn four_dipoles() -> DipoleConfig {
    let positions = [(1.2, 0.0), (0.0, 1.2), (-1.2, 0.0), (0.0, -1.2)];
    DipoleConfig::new(
        positions
            .iter()
            .map(|&(x, y)| Dipole::fixed(Point::new(x, y), 0.0))
            .collect(),
        ControlMode::Direction,
        ControlBounds {
            lower: Controls::new(vec![-2.0; 4], vec![0.0; 4]),
            upper: Controls::new(vec![2.0; 4], vec![2.0 * PI; 4]),
        },
        Controls::new(vec![2.0, 0.0, 0.0, 2.0], vec![0.0, PI / 2.0, 1.5 * PI, 1.5 * PI]),
    )
    .unwrap()
}

/// `sqrt(eᵀ M e)`.
pub fn l2_norm(mesh: &TriMesh, e: &[f64]) -> f64 {
    assemble_mass(mesh).unwrap().bilinear(e, e).sqrt()
}

/// L² error at `t = 0.25` for the heat equation `c_t = ε Δc` on the unit
/// square with the manufactured solution `cos(πx)cos(πy)` (Neumann) or
/// `sin(πx)sin(πy)` (Dirichlet) times `exp(-2π²εt)`.
pub fn heat_error(scheme: Scheme, bc: BoundaryCondition, h: f64) -> f64 {
    let mesh = unit_square(h);
    let eps = 0.1;
    let final_time = 0.25;
    let shape = |p: &Point| match bc {
        BoundaryCondition::Neumann => (PI * p.x).cos() * (PI * p.y).cos(),
        BoundaryCondition::Dirichlet => (PI * p.x).sin() * (PI * p.y).sin(),
    };
    let dt = match scheme {
        Scheme::EafeImplicit => 2.0 * h * h,
        Scheme::ExplicitLumped => 0.05 * h * h / eps,
    };
    let mut settings = TransportSettings::new(eps, dt, final_time, bc, scheme);
    settings.stability = StabilityPolicy::Abort;
    let c0: Vec<f64> = mesh.vertices().iter().map(shape).collect();
    let n = mesh.num_vertices();
    let run = transport::run(&mesh, &settings, c0, |_| Ok(DriftField::zero(n)), &[], &mut |_| Ok(())).unwrap();
    let decay = (-2.0 * PI * PI * eps * run.final_field.time).exp();
    let err: Vec<f64> = mesh
        .vertices()
        .iter()
        .zip(&run.final_field.values)
        .map(|(p, c)| c - decay * shape(p))
        .collect();
    l2_norm(&mesh, &err)
}
