//! Jacobi-preconditioned BiCGStab.

use crate::error::{Error, Result};
use crate::fem::SparseOperator;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    /// Relative residual tolerance `‖b − Ax‖ / ‖b‖`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve `A x = b`, starting from the contents of `x`.
pub fn bicgstab(a: &SparseOperator, b: &[f64], x: &mut [f64], settings: &SolverSettings) -> Result<SolveStats> {
    let n = a.dim();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64], out: &mut [f64]| {
        for ((o, vi), di) in out.iter_mut().zip(v).zip(&inv_diag) {
            *o = vi * di;
        }
    };

    let mut r = vec![0.0; n];
    a.mul_vec_into(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut history = vec![norm(&r) / bnorm];
    if history[0] <= settings.tol {
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: history[0],
        });
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];

    for it in 1..=settings.max_iters {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond(&p, &mut y);
        a.mul_vec_into(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            break;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = norm(&s) / bnorm;
        if snorm <= settings.tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            history.push(snorm);
            return Ok(SolveStats {
                iterations: it,
                relative_residual: snorm,
            });
        }
        precond(&s, &mut z);
        a.mul_vec_into(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= settings.tol {
            return Ok(SolveStats {
                iterations: it,
                relative_residual: rel,
            });
        }
        if omega == 0.0 || !rel.is_finite() {
            break;
        }
    }
    Err(Error::SolverDiverged {
        iterations: history.len() - 1,
        final_residual: *history.last().unwrap_or(&f64::NAN),
        residual_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_mass, assemble_stiffness, generate_mesh, DomainSpec};
    use crate::transport::eafe::assemble_eafe;

    #[test]
    fn matches_dense_solve_on_nonsymmetric_system() {
        let m = generate_mesh(
            &DomainSpec::Rectangle {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            0.1,
        )
        .unwrap();
        let pot: Vec<f64> = m.vertices().iter().map(|p| 2.0 * p.x - p.y * p.y).collect();
        let a = assemble_eafe(&m, &pot, 0.05)
            .unwrap()
            .add_scaled(1.0, &assemble_mass(&m).unwrap());
        let b: Vec<f64> = (0..m.num_vertices()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut x = vec![0.0; b.len()];
        let stats = bicgstab(&a, &b, &mut x, &SolverSettings::default()).unwrap();
        assert!(stats.relative_residual <= 1e-10);
        let exact = a
            .to_dense()
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&b))
            .unwrap();
        let err = exact.iter().zip(&x).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8 * exact.amax(), "{err}");
    }

    #[test]
    fn reports_history_on_failure() {
        let m = generate_mesh(
            &DomainSpec::Rectangle {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            0.1,
        )
        .unwrap();
        let k = assemble_stiffness(&m, 1.0)
            .unwrap()
            .add_scaled(1e-3, &assemble_mass(&m).unwrap());
        let b = vec![1.0; m.num_vertices()];
        let mut x = vec![0.0; b.len()];
        let err = bicgstab(
            &k,
            &b,
            &mut x,
            &SolverSettings {
                tol: 1e-14,
                max_iters: 2,
            },
        )
        .unwrap_err();
        match err {
            Error::SolverDiverged {
                iterations,
                residual_history,
                ..
            } => {
                assert_eq!(iterations, 2);
                assert_eq!(residual_history.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = SparseOperator::identity(3);
        let mut x = vec![1.0, 2.0, 3.0];
        bicgstab(&a, &[0.0; 3], &mut x, &SolverSettings::default()).unwrap();
        assert_eq!(x, vec![0.0; 3]);
    }
}
