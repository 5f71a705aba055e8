use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mesh, PointCloud, Vec3};
use crate::error::{Error, Result};

/// All mesh vertices followed by `k` area-weighted surface samples.
///
/// Point `i < V` is vertex `i`, so vertex-indexed correspondences address the
/// cloud directly.
///
/// Sample normals interpolate the vertex normals barycentrically. The result
/// is a pure function of `(mesh, k, seed)`.
pub fn sample_points(mesh: &Mesh, k: usize, seed: u64) -> Result<PointCloud> {
    if mesh.vertices.is_empty() || mesh.faces.is_empty() {
        return Err(Error::Empty("mesh"));
    }
    let n = mesh.vertex_count();
    let mut points = Vec::with_capacity(n + k);
    let mut normals = Vec::with_capacity(n + k);
    let mut provenance = Vec::with_capacity(n + k);

    let mut corner_of = vec![None; n];
    for (f, face) in mesh.faces.iter().enumerate() {
        for (c, &v) in face.iter().enumerate() {
            corner_of[v].get_or_insert((f, c));
        }
    }
    for (v, corner) in corner_of.iter().enumerate() {
        points.push(mesh.vertices[v]);
        normals.push(mesh.vertex_normals[v]);
        let (f, bary) = match corner {
            Some((f, c)) => {
                let mut b = [0.0; 3];
                b[*c] = 1.0;
                (*f, b)
            }
            // Isolated vertex: no face to point at.
            None => (usize::MAX, [1.0, 0.0, 0.0]),
        };
        provenance.push((f, bary));
    }

    if k > 0 {
        let mut cdf = Vec::with_capacity(mesh.faces.len());
        let mut total = 0.0;
        for f in 0..mesh.faces.len() {
            total += mesh.face_area(f);
            cdf.push(total);
        }
        if total <= 0.0 {
            return Err(Error::InvalidArgument("mesh has zero surface area".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..k {
            let target = rng.random::<f64>() * total;
            let f = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let bary = [1.0 - s, s * (1.0 - r2), s * r2];
            let [a, b, c] = mesh.faces[f];
            let p = mesh.vertices[a] * bary[0]
                + mesh.vertices[b] * bary[1]
                + mesh.vertices[c] * bary[2];
            let nrm = mesh.vertex_normals[a] * bary[0]
                + mesh.vertex_normals[b] * bary[1]
                + mesh.vertex_normals[c] * bary[2];
            let nrm = if nrm.norm() > 1e-12 {
                nrm.normalize()
            } else {
                let face_n = (mesh.vertices[b] - mesh.vertices[a])
                    .cross(&(mesh.vertices[c] - mesh.vertices[a]));
                if face_n.norm() > 0.0 {
                    face_n.normalize()
                } else {
                    Vec3::z()
                }
            };
            points.push(p);
            normals.push(nrm);
            provenance.push((f, bary));
        }
    }

    Ok(PointCloud {
        points,
        normals,
        provenance: Some(provenance),
    })
}
