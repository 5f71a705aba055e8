use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::cholesky::EnvelopeCholesky;
use super::laplacian::CotanLaplacian;
use super::SpectralBasis;
use crate::error::{Error, Result};

/// Eigensolver knobs. The defaults are what [`laplacian_eigenbasis`] uses.
#[derive(Debug, Clone)]
pub struct EigenConfig {
    /// Meshes with at most this many vertices use the dense solver.
    pub dense_limit: usize,
    pub max_restarts: usize,
    /// Convergence threshold on `|Lφ - λMφ|∞ / |L|∞`.
    pub tolerance: f64,
    pub seed: u64,
    /// Number of Krylov blocks per restart cycle.
    pub krylov_blocks: usize,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            dense_limit: 600,
            max_restarts: 100,
            tolerance: 1e-9,
            seed: 0x5eed,
            krylov_blocks: 3,
        }
    }
}

/// The `k` smallest generalized eigenpairs of `L φ = λ M φ`.
pub fn laplacian_eigenbasis(lap: &CotanLaplacian, k: usize) -> Result<SpectralBasis> {
    laplacian_eigenbasis_with(lap, k, &EigenConfig::default())
}

pub fn laplacian_eigenbasis_with(
    lap: &CotanLaplacian,
    k: usize,
    config: &EigenConfig,
) -> Result<SpectralBasis> {
    let n = lap.matrix.dim();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "eigenbasis size {k} must be in 1..{n} (vertex count)"
        )));
    }
    let (values, vectors) = if n <= config.dense_limit {
        dense_eigenpairs(lap, k)
    } else {
        lanczos_eigenpairs(lap, k, config)?
    };
    Ok(finish_basis(values, vectors, lap.mass.clone()))
}

/// Exact (dense) solution through the symmetric form `M^-1/2 L M^-1/2`.
pub fn dense_eigenpairs(lap: &CotanLaplacian, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = lap.matrix.dim();
    let inv_sqrt: Vec<f64> = lap.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut a = lap.matrix.to_dense();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, k);
    for (c, &i) in order[..k].iter().enumerate() {
        for r in 0..n {
            vectors[(r, c)] = eig.eigenvectors[(r, i)] * inv_sqrt[r];
        }
    }
    (values, vectors)
}

fn orthonormalize_against(w: &mut DMatrix<f64>, basis: Option<&DMatrix<f64>>) {
    for _ in 0..2 {
        if let Some(q) = basis {
            let proj = q.transpose() * &*w;
            *w -= q * proj;
        }
        let q = w.clone().qr().q();
        *w = q;
    }
}

/// Shift-invert block Lanczos with full reorthogonalization and restarts.
///
/// Works on `A = M^-1/2 L M^-1/2` through the operator
/// `(A + εI)^-1 = M^1/2 (L + εM)^-1 M^1/2`, whose largest eigenvalues map to
/// the smallest eigenvalues of `A`.
fn lanczos_eigenpairs(
    lap: &CotanLaplacian,
    k: usize,
    config: &EigenConfig,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = lap.matrix.dim();
    let sqrt_m: Vec<f64> = lap.mass.iter().map(|m| m.sqrt()).collect();
    let scale = (0..n)
        .map(|i| lap.matrix.get(i, i) / lap.mass[i])
        .sum::<f64>()
        / n as f64;
    let eps = 1e-6 * scale.max(f64::MIN_POSITIVE);
    let shift: Vec<f64> = lap.mass.iter().map(|m| eps * m).collect();
    let chol = EnvelopeCholesky::factor(&lap.matrix, &shift)?;
    let norm_l = lap.matrix.norm_inf();

    let apply = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, x.ncols());
        let mut rhs = vec![0.0; n];
        for c in 0..x.ncols() {
            for i in 0..n {
                rhs[i] = sqrt_m[i] * x[(i, c)];
            }
            let sol = chol.solve(&rhs);
            for i in 0..n {
                out[(i, c)] = sqrt_m[i] * sol[i];
            }
        }
        out
    };

    let block = (k + 16).min(n);
    let blocks = config.krylov_blocks.max(2).min(n / block).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    orthonormalize_against(&mut x, None);

    let mut worst = f64::INFINITY;
    for _restart in 0..config.max_restarts {
        let mut basis = x.clone();
        let mut images = apply(&x);
        for _ in 1..blocks {
            let start = images.ncols() - block;
            let mut w = images.columns(start, block).into_owned();
            orthonormalize_against(&mut w, Some(&basis));
            let img = apply(&w);
            basis = concat_columns(&basis, &w);
            images = concat_columns(&images, &img);
        }
        let mut h = basis.transpose() * &images;
        h = 0.5 * (&h + h.transpose());
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top: Vec<usize> = order[..block].to_vec();
        let mut u = DMatrix::zeros(basis.ncols(), block);
        for (c, &i) in top.iter().enumerate() {
            u.set_column(c, &eig.eigenvectors.column(i));
        }
        let ritz = &basis * u;

        let values: Vec<f64> = top[..k]
            .iter()
            .map(|&i| 1.0 / eig.eigenvalues[i] - eps)
            .collect();
        let mut vectors = DMatrix::zeros(n, k);
        for c in 0..k {
            for r in 0..n {
                vectors[(r, c)] = ritz[(r, c)] / sqrt_m[r];
            }
        }
        let lphi = lap.matrix.mul_dense(&vectors);
        worst = 0.0;
        for c in 0..k {
            for r in 0..n {
                let res = (lphi[(r, c)] - values[c] * lap.mass[r] * vectors[(r, c)]).abs();
                worst = worst.max(res / norm_l);
            }
        }
        if worst < config.tolerance {
            return Ok((values, vectors));
        }
        x = ritz;
        orthonormalize_against(&mut x, None);
    }
    Err(Error::NoConvergence {
        iterations: config.max_restarts,
        residual: worst,
    })
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Sorts ascending, clamps round-off negatives to zero and fixes signs so the
/// first significant entry of every eigenvector is positive.
fn finish_basis(values: Vec<f64>, vectors: DMatrix<f64>, mass: Vec<f64>) -> SpectralBasis {
    let k = values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenvectors = DMatrix::zeros(vectors.nrows(), k);
    for (c, &i) in order.iter().enumerate() {
        eigenvalues.push(values[i].max(0.0));
        let col = vectors.column(i);
        let peak = col.amax();
        let sign = col
            .iter()
            .find(|v| v.abs() > 1e-8 * peak)
            .map(|v| v.signum())
            .unwrap_or(1.0);
        eigenvectors.set_column(c, &(col * sign));
    }
    SpectralBasis {
        eigenvalues,
        eigenvectors,
        mass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use crate::spectral::laplacian::cotangent_laplacian;

    fn check_basis(lap: &CotanLaplacian, basis: &SpectralBasis, tol: f64) {
        let k = basis.eigenvalues.len();
        let phi = &basis.eigenvectors;
        let norm_l = lap.matrix.norm_inf();
        let lphi = lap.matrix.mul_dense(phi);
        for c in 0..k {
            for r in 0..phi.nrows() {
                let res = lphi[(r, c)] - basis.eigenvalues[c] * basis.mass[r] * phi[(r, c)];
                assert!(res.abs() < tol * norm_l, "residual {res:e} for pair {c}");
            }
        }
        let gram = phi.transpose()
            * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(basis.mass.clone()))
            * phi;
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-6);
            }
        }
        assert!(basis.eigenvalues[0] <= 1e-6 * basis.eigenvalues[k - 1] + 1e-12);
        assert!(basis.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn dense_basis_properties() {
        let mesh = shapes::icosphere(2, 1.0);
        let lap = cotangent_laplacian(&mesh).unwrap();
        let basis = laplacian_eigenbasis(&lap, 20).unwrap();
        check_basis(&lap, &basis, 1e-6);
        let phi0 = basis.eigenvectors.column(0);
        assert!(phi0.max() - phi0.min() < 1e-5);
        assert!(phi0[0] > 0.0);
    }

    #[test]
    fn lanczos_matches_dense() {
        let mesh = shapes::capsule(0.3, 2.0, 20, 6, 14);
        let lap = cotangent_laplacian(&mesh).unwrap();
        let k = 30;
        let sparse = laplacian_eigenbasis_with(
            &lap,
            k,
            &EigenConfig {
                dense_limit: 0,
                ..Default::default()
            },
        )
        .unwrap();
        check_basis(&lap, &sparse, 1e-6);
        let (dense_values, _) = dense_eigenpairs(&lap, k);
        for (a, b) in sparse.eigenvalues.iter().zip(&dense_values) {
            assert!(
                (a - b.max(0.0)).abs() < 1e-7 * (1.0 + b.abs()),
                "{a} vs {b}"
            );
        }
    }

    #[test]
    fn sphere_multiplicities() {
        // Lanczos path (642 vertices > dense limit).
        let mesh = shapes::icosphere(3, 1.0);
        let lap = cotangent_laplacian(&mesh).unwrap();
        let basis = laplacian_eigenbasis(&lap, 12).unwrap();
        let ev = &basis.eigenvalues;
        let close = |a: f64, b: f64| (a - b).abs() <= 0.05 * a.max(b);
        assert!(ev[0] < 1e-8);
        for i in 1..3 {
            assert!(close(ev[i], ev[i + 1]));
        }
        assert!(!close(ev[3], ev[4]));
        for i in 4..8 {
            assert!(close(ev[i], ev[i + 1]));
        }
        assert!((ev[1] - 2.0).abs() < 0.05 * 2.0);
        assert!((ev[4] - 6.0).abs() < 0.05 * 6.0);
    }

    #[test]
    fn rejects_oversized_k() {
        let lap = cotangent_laplacian(&shapes::unit_cube()).unwrap();
        assert!(laplacian_eigenbasis(&lap, 8).is_err());
        assert!(laplacian_eigenbasis(&lap, 7).is_ok());
    }
}
