mod common;

use common::{four_dipoles, heat_error, unit_square};
use ks_core::fem::{assemble_mass, lumped_mass};
use ks_core::transport::{self, assemble_eafe, gaussian_bump, implicit_step, DriftField, MassKind, SolverSettings};
use ks_core::{
    generate_mesh, BoundaryCondition, Controls, DomainSpec, Point, Scheme, SparseOperator, TransportSettings,
};
use proptest::prelude::*;

fn ratios(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| w[0] / w[1]).collect()
}

#[test]
fn implicit_heat_converges_neumann() {
    let e: Vec<f64> = [0.125, 0.0625, 0.03125]
        .iter()
        .map(|&h| heat_error(Scheme::EafeImplicit, BoundaryCondition::Neumann, h))
        .collect();
    assert!(ratios(&e).iter().all(|&r| r >= 1.8), "{e:?}");
}

#[test]
fn implicit_heat_converges_dirichlet() {
    let e: Vec<f64> = [0.125, 0.0625, 0.03125]
        .iter()
        .map(|&h| heat_error(Scheme::EafeImplicit, BoundaryCondition::Dirichlet, h))
        .collect();
    assert!(ratios(&e).iter().all(|&r| r >= 1.8), "{e:?}");
}

#[test]
fn explicit_heat_converges_dirichlet() {
    let e: Vec<f64> = [0.125, 0.0625, 0.03125]
        .iter()
        .map(|&h| heat_error(Scheme::ExplicitLumped, BoundaryCondition::Dirichlet, h))
        .collect();
    assert!(ratios(&e).iter().all(|&r| r >= 1.8), "{e:?}");
}

fn channel() -> ks_core::TriMesh {
    generate_mesh(
        &DomainSpec::RotatedRect {
            center: [0.0, 0.0],
            width: 1.8,
            height: 0.6,
            angle: -std::f64::consts::FRAC_PI_4,
        },
        0.04,
    )
    .unwrap()
}

fn strong_drift(mesh: &ks_core::TriMesh) -> DriftField {
    let cfg = four_dipoles();
    let c = Controls::new(vec![2.0, -1.0, 0.5, 2.0], vec![0.2, 1.7, 4.0, 4.9]);
    DriftField::from_controls(&cfg, &c, mesh).unwrap()
}

#[test]
fn implicit_run_conserves_mass_with_drift() {
    let mesh = channel();
    let drift = strong_drift(&mesh);
    let settings = TransportSettings::new(1e-4, 7.5e-3, 0.75, BoundaryCondition::Neumann, Scheme::EafeImplicit);
    let c0 = gaussian_bump(&mesh, Point::new(-0.3, 0.3), 1e-2);
    let run = transport::run(&mesh, &settings, c0, |_| Ok(drift.clone()), &[], &mut |_| Ok(())).unwrap();
    assert_eq!(run.steps, 100);
    let m0 = run.diagnostics[0].mass;
    for d in &run.diagnostics {
        assert!((d.mass - m0).abs() <= 1e-8 * m0, "{} vs {m0}", d.mass);
    }
}

#[test]
fn lumped_implicit_step_keeps_the_minimum() {
    // with a diagonal mass the system matrix is an M-matrix
    let mesh = channel();
    let drift = strong_drift(&mesh);
    let eps = 1e-5;
    let op = assemble_eafe(&mesh, &drift.potential, eps).unwrap();
    let mass = SparseOperator::from_diagonal(&lumped_mass(&assemble_mass(&mesh).unwrap()));
    let solver = SolverSettings::default();
    let mut c = gaussian_bump(&mesh, Point::new(-0.3, 0.3), 1e-2);
    for _ in 0..20 {
        let prev_min = c.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = c.iter().copied().fold(0.0, f64::max);
        c = implicit_step(&mass, &op, &c, 7.5e-3, None, &solver).unwrap().0;
        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= prev_min.min(0.0) - 1e-12 * scale, "{min}");
        assert!(min >= -1e-12);
    }
}

#[test]
fn pure_diffusion_flattens_toward_the_mean() {
    let mesh = unit_square(0.05);
    let n = mesh.num_vertices();
    let settings = TransportSettings::new(0.05, 0.01, 2.0, BoundaryCondition::Neumann, Scheme::EafeImplicit);
    let c0 = gaussian_bump(&mesh, Point::new(0.3, 0.6), 0.01);
    let run = transport::run(&mesh, &settings, c0, |_| Ok(DriftField::zero(n)), &[], &mut |_| Ok(())).unwrap();
    let m0 = run.diagnostics[0].mass;
    let spread: Vec<f64> = run.diagnostics.iter().map(|d| d.max - d.min).collect();
    assert!(spread.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(run.diagnostics.iter().all(|d| (d.mass - m0).abs() <= 1e-9 * m0));
    let mean = m0; // unit area
    assert!(run
        .final_field
        .values
        .iter()
        .all(|v| (v - mean).abs() < 0.05 * spread[0]));
}

#[test]
fn consistent_mass_is_available() {
    let mesh = unit_square(0.1);
    let n = mesh.num_vertices();
    let mut settings = TransportSettings::new(0.1, 0.01, 0.1, BoundaryCondition::Neumann, Scheme::EafeImplicit);
    settings.implicit_mass = MassKind::Consistent;
    let run = transport::run(
        &mesh,
        &settings,
        vec![1.0; n],
        |_| Ok(DriftField::zero(n)),
        &[],
        &mut |_| Ok(()),
    )
    .unwrap();
    assert!(run.final_field.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
}

#[test]
fn snapshots_land_on_requested_times() {
    let mesh = unit_square(0.25);
    let n = mesh.num_vertices();
    let settings = TransportSettings::new(0.1, 0.6 / 7.0, 0.6, BoundaryCondition::Dirichlet, Scheme::EafeImplicit);
    let mut seen = Vec::new();
    let run = transport::run(
        &mesh,
        &settings,
        vec![1.0; n],
        |_| Ok(DriftField::zero(n)),
        &[0.0, 0.2, 0.4, 0.6],
        &mut |f| {
            seen.push(f.time);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(run.snapshots.len(), 4);
    assert_eq!(seen.len(), 4);
    assert_eq!(seen[0], 0.0);
    assert!((seen[3] - 0.6).abs() < 1e-12);
    for (s, want) in seen.iter().zip([0.0, 0.2, 0.4, 0.6]) {
        assert!((s - want).abs() <= 0.5 * run.dt + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eafe_conserves_mass_for_any_state(
        seed_pot in prop::collection::vec(-1.0f64..1.0, 4),
        c in prop::collection::vec(-10.0f64..10.0, 36),
        eps in 1e-6f64..1.0,
    ) {
        let mesh = unit_square(0.2);
        let pot: Vec<f64> = mesh.vertices().iter()
            .map(|p| seed_pot[0] * p.x + seed_pot[1] * p.y + seed_pot[2] * p.x * p.y + seed_pot[3] * (3.0 * p.x).sin())
            .collect();
        let a = assemble_eafe(&mesh, &pot, eps).unwrap();
        let ac = a.mul_vec(&c);
        let total: f64 = ac.iter().sum();
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = a.to_dense().amax();
        prop_assert!(total.abs() <= 1e-12 * cn * scale.max(1.0));
    }
}
