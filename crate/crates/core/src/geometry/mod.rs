//! Triangle meshes, sampled point clouds and the distance/area metrics used
//! to score deformation sequences.

mod io;
mod kdtree;
pub(crate) mod metrics;
mod sampling;
pub mod shapes;

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};

pub use io::{load_mesh, save_obj};
pub use kdtree::KdTree;
pub use metrics::{
    chamfer_distance, hausdorff_distance, sequence_area_std, FrameMetrics, SequenceMetrics,
    SequenceReport,
};
pub use sampling::sample_points;

pub type Vec3 = Vector3<f64>;

/// Fallback for vertices whose incident faces have no usable normal.
const FALLBACK_NORMAL: Vec3 = Vec3::new(0.0, 0.0, 1.0);

/// Triangle surface mesh.
///
/// `features` (one row per vertex) and `colors` are opaque per-vertex
/// attributes: deformation moves vertices and never touches them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub vertex_normals: Vec<Vec3>,
    pub features: Option<DMatrix<f64>>,
    pub colors: Option<Vec<Vec3>>,
}

impl Mesh {
    /// Builds a mesh, validating the connectivity and computing area-weighted
    /// vertex normals.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        validate_faces(&faces, vertices.len())?;
        let vertex_normals = compute_vertex_normals(&vertices, &faces);
        Ok(Mesh {
            vertices,
            faces,
            vertex_normals,
            features: None,
            colors: None,
        })
    }

    pub fn with_features(mut self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows for {} vertices",
                features.nrows(),
                self.vertices.len()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity and attributes, new vertex positions. Normals are
    /// recomputed from the new geometry.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Mesh> {
        if positions.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} positions for {} vertices",
                positions.len(),
                self.vertices.len()
            )));
        }
        let vertex_normals = compute_vertex_normals(&positions, &self.faces);
        Ok(Mesh {
            vertices: positions,
            faces: self.faces.clone(),
            vertex_normals,
            features: self.features.clone(),
            colors: self.colors.clone(),
        })
    }

    pub fn recompute_normals(&mut self) {
        self.vertex_normals = compute_vertex_normals(&self.vertices, &self.faces);
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        triangle_area(&self.vertices[a], &self.vertices[b], &self.vertices[c])
    }

    /// Sum of triangle areas.
    pub fn surface_area(&self) -> f64 {
        neumaier_sum((0..self.faces.len()).map(|f| self.face_area(f)))
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_points(&self.vertices)
    }

    /// Vertices as a cloud carrying the mesh normals.
    pub fn vertex_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.vertices.clone(),
            normals: self.vertex_normals.clone(),
            provenance: None,
        }
    }

    /// Mean length over all face edges (shared edges counted twice).
    pub fn mean_edge_length(&self) -> f64 {
        if self.faces.is_empty() {
            return 0.0;
        }
        let total = neumaier_sum(self.faces.iter().flat_map(|&[a, b, c]| {
            let v = &self.vertices;
            [
                (v[a] - v[b]).norm(),
                (v[b] - v[c]).norm(),
                (v[c] - v[a]).norm(),
            ]
        }));
        total / (3 * self.faces.len()) as f64
    }
}

/// Free-function form of [`Mesh::surface_area`].
pub fn surface_area(mesh: &Mesh) -> f64 {
    mesh.surface_area()
}

pub(crate) fn validate_faces(faces: &[[usize; 3]], vertex_count: usize) -> Result<()> {
    for (f, face) in faces.iter().enumerate() {
        for &index in face {
            if index >= vertex_count {
                return Err(Error::IndexOutOfRange {
                    face: f,
                    index,
                    vertex_count,
                });
            }
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return Err(Error::DegenerateFace { face: f });
        }
    }
    Ok(())
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Area-weighted average of incident face normals, normalized.
pub fn compute_vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for &[a, b, c] in faces {
        // Unnormalized cross product is twice the area times the unit normal.
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    let mut fallbacks = 0usize;
    let normals = acc
        .into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 1e-300 && len.is_finite() {
                n / len
            } else {
                fallbacks += 1;
                FALLBACK_NORMAL
            }
        })
        .collect();
    if fallbacks > 0 {
        log::warn!("{fallbacks} vertices have no usable face normal; using +z");
    }
    normals
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn from_points(points: &[Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        if points.is_empty() {
            min = Vec3::zeros();
            max = Vec3::zeros();
        }
        BoundingBox { min, max }
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }
}

/// Surface samples with unit normals.
///
/// `provenance`, when present, records the source triangle and barycentric
/// coordinates of every point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub provenance: Option<Vec<(usize, [f64; 3])>>,
}

impl PointCloud {
    /// Cloud without normals information; every normal is set to +z.
    pub fn from_points(points: Vec<Vec3>) -> Self {
        let normals = vec![FALLBACK_NORMAL; points.len()];
        PointCloud {
            points,
            normals,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_points(&self.points)
    }
}

/// Compensated summation; the result does not depend on thread scheduling
/// and is insensitive to input order at the 1e-15 level.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            compensation += (sum - t) + v;
        } else {
            compensation += (v - t) + sum;
        }
        sum = t;
    }
    sum + compensation
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triangle_normals_point_up() {
        let mesh = shapes::triangle([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_eq!(mesh.vertex_count(), 3);
        for n in &mesh.vertex_normals {
            assert!((n - Vec3::z()).norm() < 1e-12);
        }
        assert!((mesh.surface_area() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cube_area_is_six() {
        let cube = shapes::unit_cube();
        assert_eq!(cube.vertex_count(), 8);
        assert_eq!(cube.face_count(), 12);
        assert!((cube.surface_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn icosphere_area_close_to_sphere() {
        let sphere = shapes::icosphere(3, 1.0);
        let exact = 4.0 * std::f64::consts::PI;
        assert!((sphere.surface_area() - exact).abs() / exact < 0.01);
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(matches!(
            Mesh::new(v.clone(), vec![[0, 1, 99]]),
            Err(Error::IndexOutOfRange { index: 99, .. })
        ));
        assert!(matches!(
            Mesh::new(v, vec![[0, 1, 1]]),
            Err(Error::DegenerateFace { face: 0 })
        ));
    }

    #[test]
    fn feature_rows_must_match() {
        let mesh = shapes::unit_cube();
        assert!(mesh.clone().with_features(DMatrix::zeros(7, 2)).is_err());
        assert!(mesh.with_features(DMatrix::zeros(8, 2)).is_ok());
    }

    #[test]
    fn neumaier_handles_cancellation() {
        let s = neumaier_sum([1.0, 1e100, 1.0, -1e100]);
        assert_eq!(s, 2.0);
    }
}
