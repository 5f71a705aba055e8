//! Procedural meshes used by tests, examples and the synthetic suite.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{Mesh, Vec3};

pub fn triangle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Mesh {
    Mesh::new(
        vec![Vec3::from(a), Vec3::from(b), Vec3::from(c)],
        vec![[0, 1, 2]],
    )
    .expect("three distinct indices")
}

/// Axis-aligned cube `[0,1]^3` with 8 vertices and 12 outward triangles.
pub fn unit_cube() -> Mesh {
    let vertices = (0..8)
        .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3], // z = 0
        [4, 5, 6],
        [5, 7, 6], // z = 1
        [0, 1, 4],
        [1, 5, 4], // y = 0
        [2, 6, 3],
        [3, 6, 7], // y = 1
        [0, 4, 2],
        [2, 4, 6], // x = 0
        [1, 3, 5],
        [3, 7, 5], // x = 1
    ];
    Mesh::new(vertices, faces).expect("valid cube")
}

/// Subdivided icosahedron projected onto a sphere of the given radius.
///
/// Level `n` has `10 * 4^n + 2` vertices (642 at level 3).
pub fn icosphere(subdivisions: u32, radius: f64) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                vertices.push((0.5 * (vertices[a] + vertices[b])).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }

    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    Mesh::new(vertices, faces).expect("valid icosphere")
}

/// Capsule (cylinder with hemispherical caps) centered at the origin with its
/// axis along x.
///
/// `length` is the tip-to-tip extent. The mesh has
/// `2 + segments * (2 * cap_rings + body_rings)` vertices.
pub fn capsule(
    radius: f64,
    length: f64,
    segments: usize,
    cap_rings: usize,
    body_rings: usize,
) -> Mesh {
    assert!(
        segments >= 3 && cap_rings >= 1,
        "capsule resolution too low"
    );
    assert!(length >= 2.0 * radius, "capsule shorter than its caps");
    let half_body = 0.5 * length - radius;

    // (x, ring radius) profile from the -x pole to the +x pole, poles excluded.
    let mut profile = Vec::new();
    for i in 1..=cap_rings {
        let phi = 0.5 * PI * i as f64 / cap_rings as f64;
        profile.push((-half_body - radius * phi.cos(), radius * phi.sin()));
    }
    for i in 1..=body_rings {
        let s = i as f64 / (body_rings + 1) as f64;
        profile.push((-half_body + 2.0 * half_body * s, radius));
    }
    for i in (1..=cap_rings).rev() {
        let phi = 0.5 * PI * i as f64 / cap_rings as f64;
        profile.push((half_body + radius * phi.cos(), radius * phi.sin()));
    }

    let mut vertices = vec![Vec3::new(-half_body - radius, 0.0, 0.0)];
    for &(x, rho) in &profile {
        for j in 0..segments {
            let a = 2.0 * PI * j as f64 / segments as f64;
            vertices.push(Vec3::new(x, rho * a.cos(), rho * a.sin()));
        }
    }
    vertices.push(Vec3::new(half_body + radius, 0.0, 0.0));
    let last = vertices.len() - 1;

    let ring = |r: usize, j: usize| 1 + r * segments + (j % segments);
    let mut faces = Vec::new();
    for j in 0..segments {
        faces.push([0, ring(0, j + 1), ring(0, j)]);
    }
    for r in 0..profile.len() - 1 {
        for j in 0..segments {
            let (a, b) = (ring(r, j), ring(r, j + 1));
            let (c, d) = (ring(r + 1, j), ring(r + 1, j + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let top = profile.len() - 1;
    for j in 0..segments {
        faces.push([last, ring(top, j), ring(top, j + 1)]);
    }
    Mesh::new(vertices, faces).expect("valid capsule")
}

/// The capsule used by the synthetic suite: radius 0.25, length 2, about
/// 2,000 vertices.
pub fn default_capsule() -> Mesh {
    capsule(0.25, 2.0, 32, 10, 42)
}
