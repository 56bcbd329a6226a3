//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{four_dipoles, heat_error, unit_square};
use ks_core::fem::{assemble_mass, assemble_stiffness, lumped_mass};
use ks_core::magnetics::{field_from_sources, Source};
use ks_core::optimize::{minimize, Evaluation};
use ks_core::transport::{self, assemble_eafe, corrected_lumped_inverse, gaussian_bump, implicit_step, SolverSettings};
use ks_core::workflow::{build_problem, optimize, run_simulate};
use ks_core::{
    disk_quadrature, generate_mesh, BoundaryCondition, BoxBounds, ControlTrajectory, Controls, DomainSpec, DriftField,
    MovingDomain, ObjectiveConfig, OptimizerSettings, Point, Scenario, Scheme, SparseOperator, Status, TargetField,
    TrackingProblem, TransportSettings,
};
use nalgebra::DVector;
use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;
type Criterion = (&'static str, Option<u64>, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Sources of the four-dipole configuration under random controls.
fn random_sources(rng: &mut StdRng) -> Vec<Source> {
    let cfg = four_dipoles();
    let c = Controls::new(
        (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..4).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
    );
    cfg.sources(&c).unwrap()
}

/// Uniform point in `[-1.5, 1.5]²` at least `gap` from every source.
fn random_point(rng: &mut StdRng, sources: &[Source], gap: f64) -> Point {
    loop {
        let p = Point::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        if sources.iter().all(|s| (p - s.position).norm() >= gap) {
            return p;
        }
    }
}

fn maxwell() -> Check {
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let sources = random_sources(&mut rng);
        let x = random_point(&mut rng, &sources, 0.05);
        let d = 1e-5;
        let h = |p: Point| field_from_sources(&sources, p).unwrap().h;
        let dx = (h(x + Point::new(d, 0.0)) - h(x - Point::new(d, 0.0))) / (2.0 * d);
        let dy = (h(x + Point::new(0.0, d)) - h(x - Point::new(0.0, d))) / (2.0 * d);
        let grad = (dx.norm_squared() + dy.norm_squared()).sqrt();
        if grad == 0.0 {
            continue;
        }
        let curl = (dx.y - dy.x).abs();
        let div = (dx.x + dy.y).abs();
        worst = worst.max(curl.max(div) / grad);
    }
    ensure(worst <= 1e-6, format!("max relative |curl h|, |div h| = {worst:.2e}"))
}

fn kelvin_consistency() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let cfg = four_dipoles();
    let mut worst = 0.0f64;
    let mut min_div = f64::INFINITY;
    for _ in 0..1000 {
        let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let theta: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let controls = Controls::new(alpha.clone(), theta.clone());
        let sources = cfg.sources(&controls).unwrap();
        let x = random_point(&mut rng, &sources, 0.05);
        // complex form: conj(h) = Σ α d / (z - z_i)², ∇|h|² = conj(2 conj(g) g')
        let z = Complex64::new(x.x, x.y);
        let (mut g, mut dg) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for s in &sources {
            let w = z - Complex64::new(s.position.x, s.position.y);
            let m = Complex64::new(s.direction.x, s.direction.y) * s.intensity;
            g += m / (w * w);
            dg += -2.0 * m / (w * w * w);
        }
        let k = (2.0 * g.conj() * dg).conj();
        let analytic = Point::new(k.re, k.im);
        let sample = field_from_sources(&sources, x).unwrap();
        let chain = sample.jacobian.transpose() * sample.h * 2.0;
        let b = cfg.b_matrices(&theta, x).unwrap();
        let a = DVector::from_vec(alpha);
        let quad = Point::new(a.dot(&(&b[0] * &a)), a.dot(&(&b[1] * &a)));
        let scale = analytic.norm().max(chain.norm()).max(quad.norm());
        if scale > 0.0 {
            for (u, v) in [(analytic, chain), (analytic, quad), (chain, quad)] {
                worst = worst.max((u - v).norm() / scale);
            }
        }
        let d = 1e-5;
        let kf = |p: Point| field_from_sources(&sources, p).unwrap().kelvin;
        let div = (kf(x + Point::new(d, 0.0)).x - kf(x - Point::new(d, 0.0)).x + kf(x + Point::new(0.0, d)).y
            - kf(x - Point::new(0.0, d)).y)
            / (2.0 * d);
        min_div = min_div.min(div);
    }
    ensure(
        worst <= 1e-6 && min_div >= -1e-8,
        format!("max pairwise relative difference {worst:.2e}, min div(grad |h|^2) = {min_div:.2e}"),
    )
}

fn gradient_problem(steps: usize) -> TrackingProblem {
    let dom = MovingDomain::new(0.2, 0.75, vec![(0.0, Point::new(-0.6, 0.6)), (0.75, Point::zeros())]).unwrap();
    TrackingProblem::new(
        four_dipoles(),
        &dom,
        &disk_quadrature(0.2, 3),
        &TargetField::Constant(Point::new(1.0, -1.0) / 2f64.sqrt()),
        ObjectiveConfig::new(1e-2, 2e-2, 0.0).unwrap(),
        steps,
    )
    .unwrap()
}

fn random_row(p: &TrackingProblem, rng: &mut StdRng) -> Vec<f64> {
    let b = p.dipoles().bounds();
    b.lower
        .to_flat()
        .iter()
        .zip(b.upper.to_flat())
        .map(|(l, h)| l + (h - l) * rng.random::<f64>())
        .collect()
}

fn fd_relative(x: &[f64], g: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / scale);
    }
    worst
}

fn objective_gradient() -> Check {
    let p = gradient_problem(5);
    let mut rng = StdRng::seed_from_u64(3);
    let (mut worst_j, mut worst_f) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let free: Vec<f64> = (0..p.steps()).flat_map(|_| random_row(&p, &mut rng)).collect();
        let traj = ControlTrajectory::from_free(p.dipoles().initial(), p.tau(), &free).unwrap();
        let (_, g) = p.gradient(&traj).unwrap();
        worst_j = worst_j.max(fd_relative(&free, &g, |x| p.gradient_free(x).unwrap().0.total()));

        let n = rng.random_range(1..=p.steps());
        let anchor = random_row(&p, &mut rng);
        let row = random_row(&p, &mut rng);
        let (_, g) = p.step_functional(n, &anchor, p.tau(), &row).unwrap();
        worst_f = worst_f.max(fd_relative(&row, &g, |x| {
            p.step_functional(n, &anchor, p.tau(), x).unwrap().0.total()
        }));
    }
    ensure(
        worst_j <= 1e-5 && worst_f <= 1e-5,
        format!("max relative error: grad J {worst_j:.2e}, grad F {worst_f:.2e}"),
    )
}

fn optimizer() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    let memories = [ks_core::BfgsMemory::Dense, ks_core::BfgsMemory::Limited(5)];
    for memory in memories {
        let settings = OptimizerSettings {
            memory,
            ..OptimizerSettings::default()
        };
        let c = vec![3.0, -0.5, -4.0, 1.5, 0.25, -2.5];
        let bounds = BoxBounds::new(vec![-2.0; 6], vec![2.0; 6]).unwrap();
        let mut values = Vec::new();
        let r = minimize(
            |x: &[f64]| {
                let v = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(Evaluation::new(
                    v,
                    x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect(),
                ))
            },
            &[0.0; 6],
            &bounds,
            &settings,
            &mut |rec| values.push(rec.value),
        )
        .unwrap();
        let target = bounds.project(&c);
        let err =
            r.x.iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
        let monotone = values.windows(2).all(|w| w[1] <= w[0]);
        ok &= err <= 1e-8 && monotone && r.status == Status::Converged && r.projected_gradient_norm <= 1e-6;
        notes.push(format!("quadratic {memory:?} err {err:.1e}"));

        let bounds = BoxBounds::new(vec![-5.0; 2], vec![5.0; 2]).unwrap();
        let mut values = Vec::new();
        let r = minimize(
            |x: &[f64]| {
                let (a, b) = (x[0], x[1]);
                let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                Ok(Evaluation::new(v, g))
            },
            &[-1.2, 1.0],
            &bounds,
            &settings,
            &mut |rec| values.push(rec.value),
        )
        .unwrap();
        let err = ((r.x[0] - 1.0).powi(2) + (r.x[1] - 1.0).powi(2)).sqrt();
        let monotone = values.windows(2).all(|w| w[1] <= w[0]);
        ok &= err <= 1e-6 && monotone && r.status == Status::Converged && r.projected_gradient_norm <= 1e-6;
        notes.push(format!(
            "rosenbrock {memory:?} err {err:.1e} in {} iterations",
            r.iterations
        ));
    }
    ensure(ok, notes.join("; "))
}

fn example1_reduction() -> Check {
    let mut s = Scenario::load("example1-direction").map_err(|e| e.to_string())?;
    s.steps = 25;
    s.quadrature_refinement = 3;
    let p = build_problem(&s).map_err(|e| e.to_string())?;
    let o = optimize(&s, &p, &mut |_| {}).map_err(|e| e.to_string())?;
    let factor = o.constant.tracking / o.optimum.tracking;
    ensure(
        factor >= 10.0,
        format!(
            "J1 {:.4e} -> {:.4e} (factor {factor:.1}), {:?} after {} iterations",
            o.constant.tracking, o.optimum.tracking, o.result.status, o.result.iterations
        ),
    )
}

fn eafe_structure() -> Check {
    let channel = generate_mesh(
        &DomainSpec::RotatedRect {
            center: [0.0, 0.0],
            width: 1.8,
            height: 0.6,
            angle: -PI / 4.0,
        },
        0.04,
    )
    .unwrap();
    let eps = 1e-5;
    let n = channel.num_vertices();

    let zero = assemble_eafe(&channel, &vec![0.3; n], eps).unwrap().to_dense();
    let stiff = assemble_stiffness(&channel, eps).unwrap().to_dense();
    let diff = (&zero - &stiff).amax() / eps;

    let cfg = four_dipoles();
    let drift = DriftField::from_controls(
        &cfg,
        &Controls::new(vec![2.0, -1.0, 0.5, 2.0], vec![0.2, 1.7, 4.0, 4.9]),
        &channel,
    )
    .unwrap();
    let a = assemble_eafe(&channel, &drift.potential, eps).unwrap();
    let mut rng = StdRng::seed_from_u64(6);
    let mut col = 0.0f64;
    for _ in 0..10 {
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        col = col.max(a.mul_vec(&c).iter().sum::<f64>().abs() / cn);
    }

    let settings = TransportSettings::new(eps, 7.5e-3, 0.75, BoundaryCondition::Neumann, Scheme::EafeImplicit);
    let c0 = gaussian_bump(&channel, Point::new(-0.3, 0.3), 1e-2);
    let run = transport::run(&channel, &settings, c0.clone(), |_| Ok(drift.clone()), &[], &mut |_| {
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let m0 = run.diagnostics[0].mass;
    let drift_mass = run
        .diagnostics
        .iter()
        .map(|d| (d.mass - m0).abs() / m0)
        .fold(0.0, f64::max);

    let mass = SparseOperator::from_diagonal(&lumped_mass(&assemble_mass(&channel).unwrap()));
    let mut c = c0;
    let mut min = f64::INFINITY;
    for _ in 0..100 {
        c = implicit_step(&mass, &a, &c, 7.5e-3, None, &SolverSettings::default())
            .map_err(|e| e.to_string())?
            .0;
        min = min.min(c.iter().copied().fold(f64::INFINITY, f64::min));
    }
    ensure(
        diff <= 1e-12 && col <= 1e-12 && drift_mass <= 1e-8 && min >= -1e-12 && run.steps == 100,
        format!(
            "zero drift vs stiffness {diff:.1e}, |1^T A c|/|c| {col:.1e}, mass drift {drift_mass:.1e} over {} steps, min {min:.1e}",
            run.steps
        ),
    )
}

fn manufactured() -> Check {
    let e: Vec<f64> = [0.125, 0.0625, 0.03125]
        .iter()
        .map(|&h| heat_error(Scheme::EafeImplicit, BoundaryCondition::Neumann, h))
        .collect();
    let r: Vec<f64> = e.windows(2).map(|w| w[0] / w[1]).collect();
    ensure(
        r.iter().all(|&x| x >= 1.8),
        format!(
            "L2 errors {:.3e} {:.3e} {:.3e}, ratios {:.2} {:.2}",
            e[0], e[1], e[2], r[0], r[1]
        ),
    )
}

fn lumped_correction() -> Check {
    let mesh = unit_square(0.125);
    let mass = assemble_mass(&mesh).unwrap();
    let lumped = lumped_mass(&mass);
    let lu = mass.to_dense().lu();
    let mut worst_ratio = 0.0f64;
    let mut ok = true;
    for k in 0..20 {
        let (a, b) = (1.0 + (k % 4) as f64, 1.0 + (k / 4) as f64 * 0.5);
        let v: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|p| (a * PI * p.x).cos() * (b * PI * p.y).sin() + 0.3 * p.x * p.y + 1.0)
            .collect();
        let mv = mass.mul_vec(&v);
        let exact = lu.solve(&DVector::from_column_slice(&mv)).unwrap();
        let plain: Vec<f64> = mv.iter().zip(&lumped).map(|(x, m)| x / m).collect();
        let corrected = corrected_lumped_inverse(&mass, &lumped, &mv);
        let err = |u: &[f64]| {
            u.iter()
                .zip(exact.iter())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (ec, ep) = (err(&corrected), err(&plain));
        ok &= ec < ep;
        worst_ratio = worst_ratio.max(ec / ep);
    }
    ensure(ok, format!("worst corrected/plain error ratio {worst_ratio:.3}"))
}

fn obstacle() -> Check {
    let s = Scenario::load("obstacle").map_err(|e| e.to_string())?;
    let p = build_problem(&s).map_err(|e| e.to_string())?;
    let o = optimize(&s, &p, &mut |_| {}).map_err(|e| e.to_string())?;
    let sim = run_simulate(&s, &o.trajectory, None).map_err(|e| e.to_string())?;
    let d = &sim.run.diagnostics;
    let (m0, c0max) = (d[0].mass, d[0].max.max(-d[0].min));
    let min_mass = d.iter().map(|x| x.mass / m0).fold(f64::INFINITY, f64::min);
    let peak = d.iter().map(|x| x.max.max(-x.min)).fold(0.0, f64::max) / c0max;
    let com = d.last().unwrap().center_of_mass;
    let dist = (com - Point::new(-0.1, -0.1)).norm();
    ensure(
        dist <= 0.05 && min_mass >= 0.9 && peak <= 2.0,
        format!(
            "final center of mass ({:.4}, {:.4}) at distance {dist:.4}, min mass ratio {min_mass:.3}, max |c|/|c0| {peak:.3}, {} steps of {:.1e}",
            com.x, com.y, sim.run.steps, sim.run.dt
        ),
    )
}

fn injection() -> Check {
    let s = Scenario::load("example1-direction").map_err(|e| e.to_string())?;
    let p = build_problem(&s).map_err(|e| e.to_string())?;
    let o = optimize(&s, &p, &mut |_| {}).map_err(|e| e.to_string())?;
    let sim = run_simulate(&s, &o.trajectory, None).map_err(|e| e.to_string())?;
    let com = sim.run.diagnostics.last().unwrap().center_of_mass;
    let dist = com.norm();
    ensure(
        dist <= 0.1,
        format!(
            "final center of mass ({:.4}, {:.4}) at distance {dist:.4} from the origin",
            com.x, com.y
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("field is curl- and divergence-free", Some(1), maxwell),
        ("Kelvin force representations agree", Some(1), kelvin_consistency),
        (
            "objective gradients match finite differences",
            Some(30),
            objective_gradient,
        ),
        ("projected BFGS solves the reference problems", None, optimizer),
        (
            "example 1 at N = 25 reduces the tracking term tenfold",
            Some(300),
            example1_reduction,
        ),
        (
            "EAFE structure, mass conservation and positivity",
            Some(60),
            eafe_structure,
        ),
        (
            "implicit scheme converges on a manufactured solution",
            Some(120),
            manufactured,
        ),
        ("corrected lumping beats plain lumping", Some(10), lumped_correction),
        ("obstacle steering reaches (-0.1, -0.1)", Some(600), obstacle),
        ("injection reaches the origin", Some(300), injection),
    ];
    let mut failures = 0;
    for (k, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|s| elapsed <= Duration::from_secs(s));
        let (ok, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let budget = limit.map_or(String::new(), |s| format!(" / {s} s"));
        println!(
            "{} criterion {:>2}: {name}: {detail} [{:.1} s{budget}]",
            if ok { "PASS" } else { "FAIL" },
            k + 1,
            elapsed.as_secs_f64()
        );
        if !ok {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
