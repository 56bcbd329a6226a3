//! Edge-averaged finite elements in Bernoulli form.

use log::warn;

use crate::error::{Error, Result};
use crate::fem::assembly::basis_gradients;
use crate::fem::{SparseOperator, TriMesh};

/// `B(s) = s / (e^s - 1)`, with `B(0) = 1`, evaluated without overflow or
/// cancellation.
pub fn bernoulli(s: f64) -> f64 {
    if s.abs() < 1e-3 {
        let s2 = s * s;
        1.0 - 0.5 * s + s2 / 12.0 - s2 * s2 / 720.0
    } else if s > 0.0 {
        // s e^{-s} / (1 - e^{-s}) stays finite for large s
        s * (-s).exp() / -(-s).exp_m1()
    } else {
        s / s.exp_m1()
    }
}

/// Coefficients of `c_i` and `c_j` in the edge flux
/// `α_E δ_E(e^ψ c) = ε (B(ψ_i - ψ_j) c_j - B(ψ_j - ψ_i) c_i)`.
///
/// Returns `(ε B(ψ_j - ψ_i), ε B(ψ_i - ψ_j))`.
pub fn eafe_edge_coefficient(psi_i: f64, psi_j: f64, eps: f64) -> (f64, f64) {
    (eps * bernoulli(psi_j - psi_i), eps * bernoulli(psi_i - psi_j))
}

/// `-Σ_T ∫_T ∇φ_i · ∇φ_j` for every mesh edge, i.e. the cotangent weights.
pub fn edge_weights(mesh: &TriMesh) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(mesh.edges().len());
    for e in mesh.edges() {
        let [a, b] = e.vertices;
        let mut s = 0.0;
        for &t in &e.triangles[..e.count as usize] {
            let tri = mesh.triangles()[t];
            let (area, g) = basis_gradients(&mesh.triangle_points(t));
            if !(area > 0.0) {
                return Err(Error::DegenerateTriangle { index: t, area });
            }
            let la = tri.iter().position(|&v| v == a).expect("edge vertex in triangle");
            let lb = tri.iter().position(|&v| v == b).expect("edge vertex in triangle");
            s -= area * g[la].dot(&g[lb]);
        }
        w.push(s);
    }
    Ok(w)
}

/// EAFE operator for `-div(ε∇c - c∇|h|²)` with exponent `ψ = -|h|²/ε` built
/// from the nodal values `potential = |h|²`.
///
/// Columns sum to zero, so `1ᵀ A c = 0` for every `c`.
pub fn assemble_eafe(mesh: &TriMesh, potential: &[f64], eps: f64) -> Result<SparseOperator> {
    if potential.len() != mesh.num_vertices() {
        return Err(Error::DimensionMismatch {
            what: "nodal potential",
            expected: mesh.num_vertices(),
            found: potential.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("diffusion must be positive, got {eps}")));
    }
    if !mesh.is_nonobtuse() {
        warn!("mesh has obtuse angles; the EAFE operator may lose monotonicity");
    }
    let weights = edge_weights(mesh)?;
    Ok(assemble_with_weights(mesh, &weights, potential, eps))
}

/// Assembly with precomputed edge weights.
pub fn assemble_with_weights(mesh: &TriMesh, weights: &[f64], potential: &[f64], eps: f64) -> SparseOperator {
    let mut a = SparseOperator::with_mesh_pattern(mesh);
    for (e, &w) in mesh.edges().iter().zip(weights) {
        let [i, j] = e.vertices;
        let (ci, cj) = eafe_edge_coefficient(-potential[i] / eps, -potential[j] / eps, eps);
        a.add(i, i, w * ci);
        a.add(i, j, -w * cj);
        a.add(j, j, w * cj);
        a.add(j, i, -w * ci);
    }
    a
}
