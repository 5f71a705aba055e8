use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::Mesh;

/// Cotangents are clamped to this magnitude so sliver triangles cannot
/// produce unbounded weights.
pub const COT_CLAMP: f64 = 20.0;

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `self * x` for a dense block of column vectors.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let col = x.column(c);
            for i in 0..self.n {
                out[(i, c)] = self.row(i).map(|(j, v)| v * col[j]).sum();
            }
        }
        out
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }
}

/// Positive semidefinite cotangent Laplacian and lumped (barycentric) mass.
#[derive(Debug, Clone)]
pub struct CotanLaplacian {
    /// `L[i][j] = -w_ij` off the diagonal, `L[i][i] = sum_j w_ij`.
    pub matrix: CsrMatrix,
    /// One third of the area of the incident triangles, per vertex.
    pub mass: Vec<f64>,
}

impl CotanLaplacian {
    /// Edge weight `w_ij = (cot a + cot b) / 2`, the negated off-diagonal entry.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        -self.matrix.get(i, j)
    }
}

fn clamped_cot(u: &crate::geometry::Vec3, v: &crate::geometry::Vec3) -> f64 {
    let cross = u.cross(v).norm();
    let dot = u.dot(v);
    if cross <= f64::MIN_POSITIVE {
        return COT_CLAMP.copysign(dot);
    }
    (dot / cross).clamp(-COT_CLAMP, COT_CLAMP)
}

/// Builds the cotangent Laplacian of a triangle mesh.
///
/// Every vertex must be referenced by at least one face.
pub fn cotangent_laplacian(mesh: &Mesh) -> Result<CotanLaplacian> {
    let n = mesh.vertex_count();
    let mut mass = vec![0.0; n];
    let mut referenced = vec![false; n];
    let mut triplets = Vec::with_capacity(mesh.faces.len() * 12);
    for (f, face) in mesh.faces.iter().enumerate() {
        let area = mesh.face_area(f);
        for k in 0..3 {
            let (i, j, o) = (face[k], face[(k + 1) % 3], face[(k + 2) % 3]);
            referenced[i] = true;
            mass[i] += area / 3.0;
            // Angle at `o` is opposite edge (i, j).
            let p = &mesh.vertices;
            let w = 0.5 * clamped_cot(&(p[i] - p[o]), &(p[j] - p[o]));
            triplets.push((i, j, -w));
            triplets.push((j, i, -w));
            triplets.push((i, i, w));
            triplets.push((j, j, w));
        }
    }
    if let Some(v) = referenced.iter().position(|r| !r) {
        return Err(Error::UnreferencedVertex(v));
    }
    if let Some(v) = mass.iter().position(|&m| m <= 0.0 || !m.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "vertex {v} has zero lumped area (all incident triangles degenerate)"
        )));
    }
    Ok(CotanLaplacian {
        matrix: CsrMatrix::from_triplets(n, triplets),
        mass,
    })
}
