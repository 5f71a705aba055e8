//! Intrinsic operators on triangle meshes: cotangent Laplacian, lumped mass,
//! low-frequency eigenbasis and heat kernel signatures.
//!
//! Everything here depends only on edge lengths, so results are unchanged by
//! rigid motions of the input.

mod cholesky;
mod eigen;
mod laplacian;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::geometry::Mesh;

pub use eigen::{dense_eigenpairs, laplacian_eigenbasis, laplacian_eigenbasis_with, EigenConfig};
pub use laplacian::{cotangent_laplacian, CotanLaplacian, CsrMatrix, COT_CLAMP};

/// Default number of basis functions.
pub const DEFAULT_BASIS_SIZE: usize = 60;
/// Default number of heat kernel time samples.
pub const DEFAULT_HKS_TIMES: usize = 16;

/// Low-frequency generalized eigenpairs of a mesh Laplacian.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// Ascending, nonnegative.
    pub eigenvalues: Vec<f64>,
    /// `V x k`, orthonormal with respect to the lumped mass.
    pub eigenvectors: DMatrix<f64>,
    /// Lumped vertex areas.
    pub mass: Vec<f64>,
}

impl SpectralBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn vertex_count(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// First `k` eigenvectors as a `V x k` matrix.
    pub fn truncated(&self, k: usize) -> DMatrix<f64> {
        self.eigenvectors.columns(0, k).into_owned()
    }
}

/// Laplacian plus eigenbasis of `mesh` in one call. `k` is clamped to
/// `V - 1`.
pub fn mesh_basis(mesh: &Mesh, k: usize) -> Result<SpectralBasis> {
    let lap = cotangent_laplacian(mesh)?;
    let k = k.min(mesh.vertex_count().saturating_sub(1)).max(1);
    laplacian_eigenbasis(&lap, k)
}

/// Heat kernel signature `sum_i exp(-λ_i t) φ_i(v)^2` at `n_times`
/// log-spaced times, each row normalized to unit length.
///
/// Times span `[4 ln 10 / λ_max, 4 ln 10 / λ_1]` where `λ_1` is the smallest
/// positive eigenvalue. A basis without positive eigenvalues uses `t = 1`.
pub fn hks_features(basis: &SpectralBasis, n_times: usize) -> DMatrix<f64> {
    let n_times = n_times.max(1);
    let times = hks_times(&basis.eigenvalues, n_times);
    let v = basis.vertex_count();
    let mut feats = DMatrix::zeros(v, n_times);
    for (c, &t) in times.iter().enumerate() {
        let weights: Vec<f64> = basis.eigenvalues.iter().map(|&l| (-l * t).exp()).collect();
        for r in 0..v {
            let mut s = 0.0;
            for (i, w) in weights.iter().enumerate() {
                let phi = basis.eigenvectors[(r, i)];
                s += w * phi * phi;
            }
            feats[(r, c)] = s;
        }
    }
    for mut row in feats.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    feats
}

fn hks_times(eigenvalues: &[f64], n_times: usize) -> Vec<f64> {
    let positive = eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > 1e-12 * eigenvalues.last().copied().unwrap_or(0.0).max(1e-300));
    let (lo_ev, hi_ev) = positive.fold((f64::INFINITY, 0.0f64), |(lo, hi), l| {
        (lo.min(l), hi.max(l))
    });
    if !lo_ev.is_finite() || hi_ev <= 0.0 {
        return vec![1.0; n_times];
    }
    let c = 4.0 * 10f64.ln();
    let (t_min, t_max) = (c / hi_ev, c / lo_ev);
    if n_times == 1 {
        return vec![t_min];
    }
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..n_times)
        .map(|i| (a + (b - a) * i as f64 / (n_times - 1) as f64).exp())
        .collect()
}
