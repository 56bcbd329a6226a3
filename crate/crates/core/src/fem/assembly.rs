//! P1 element matrices and global assembly.

use crate::error::{Error, Result};
use crate::fem::mesh::TriMesh;
use crate::fem::sparse::SparseOperator;
use crate::magnetics::Point;

/// Area and gradients of the three barycentric basis functions.
pub fn basis_gradients(p: &[Point; 3]) -> (f64, [Point; 3]) {
    let area = crate::fem::mesh::signed_area(&p[0], &p[1], &p[2]);
    let inv = 0.5 / area;
    let g = |a: &Point, b: &Point| Point::new(a.y - b.y, b.x - a.x) * inv;
    (area, [g(&p[1], &p[2]), g(&p[2], &p[0]), g(&p[0], &p[1])])
}

fn checked_gradients(mesh: &TriMesh, t: usize) -> Result<(f64, [Point; 3])> {
    let (area, g) = basis_gradients(&mesh.triangle_points(t));
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::DegenerateTriangle { index: t, area });
    }
    Ok((area, g))
}

/// Consistent mass matrix `m_ij = int phi_i phi_j`.
pub fn assemble_mass(mesh: &TriMesh) -> Result<SparseOperator> {
    let mut m = SparseOperator::with_mesh_pattern(mesh);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, _) = checked_gradients(mesh, t)?;
        for a in 0..3 {
            for b in 0..3 {
                let f = if a == b { 2.0 } else { 1.0 };
                m.add(tri[a], tri[b], f * area / 12.0);
            }
        }
    }
    Ok(m)
}

/// Stiffness matrix `eps * int grad phi_i . grad phi_j`.
pub fn assemble_stiffness(mesh: &TriMesh, eps: f64) -> Result<SparseOperator> {
    let mut k = SparseOperator::with_mesh_pattern(mesh);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, g) = checked_gradients(mesh, t)?;
        for a in 0..3 {
            for b in 0..3 {
                k.add(tri[a], tri[b], eps * area * g[a].dot(&g[b]));
            }
        }
    }
    Ok(k)
}

/// Row-sum lumping of a mass matrix, returned as the diagonal.
pub fn lumped_mass(m: &SparseOperator) -> Vec<f64> {
    m.row_sums()
}

/// Galerkin drift-diffusion operator for
/// `a(c, v) = int eps grad c . grad v - c k . grad v`,
/// with the drift `k` given at vertices and interpolated linearly.
pub fn assemble_drift_diffusion(mesh: &TriMesh, eps: f64, drift: &[Point]) -> Result<SparseOperator> {
    if drift.len() != mesh.num_vertices() {
        return Err(Error::DimensionMismatch {
            what: "drift field",
            expected: mesh.num_vertices(),
            found: drift.len(),
        });
    }
    let mut a = SparseOperator::with_mesh_pattern(mesh);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, g) = checked_gradients(mesh, t)?;
        for i in 0..3 {
            for j in 0..3 {
                // int_T phi_j (sum_k K_k phi_k) . grad phi_i
                let mut conv = 0.0;
                for k in 0..3 {
                    let w = if j == k { 2.0 } else { 1.0 } * area / 12.0;
                    conv += w * drift[tri[k]].dot(&g[i]);
                }
                a.add(tri[i], tri[j], eps * area * g[i].dot(&g[j]) - conv);
            }
        }
    }
    Ok(a)
}
