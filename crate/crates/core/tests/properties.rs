use flowmorph::deformation::{integrate, IntegrateOptions};
use flowmorph::geometry::{
    chamfer_distance, hausdorff_distance, sample_points, shapes, surface_area, BoundingBox, Vec3,
};
use flowmorph::registration::{confidence_map, loop_closure_filter, P2PMap};
use flowmorph::spectral::cotangent_laplacian;
use flowmorph::training::{distortion, tangential_strain, DistortionForm};
use flowmorph::velocity_field::{init_params, FieldConfig, LinearField};
use nalgebra::{Matrix3, Rotation3};
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(vec3(), 1..max)
}

fn matrix() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform9(-1.0..1.0f64).prop_map(|a| Matrix3::from_row_slice(&a))
}

fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    (vec3(), -3.0..3.0f64).prop_map(|(axis, angle)| {
        Rotation3::from_scaled_axis(axis.try_normalize(1e-6).unwrap_or(Vec3::z()) * angle)
    })
}

fn brute(a: &[Vec3], b: &[Vec3]) -> (f64, f64) {
    let nearest = |q: &Vec3, set: &[Vec3]| {
        set.iter()
            .map(|p| (p - q).norm_squared())
            .fold(f64::INFINITY, f64::min)
    };
    let ab: Vec<f64> = a.iter().map(|q| nearest(q, b)).collect();
    let ba: Vec<f64> = b.iter().map(|q| nearest(q, a)).collect();
    let cd = ab.iter().sum::<f64>() / a.len() as f64 + ba.iter().sum::<f64>() / b.len() as f64;
    let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max).sqrt();
    (cd, hd)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_vanish_on_identical_clouds(a in cloud(200)) {
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(hausdorff_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_symmetric_and_match_brute_force(a in cloud(300), b in cloud(300)) {
        let (cd, hd) = brute(&a, &b);
        let cd_ab = chamfer_distance(&a, &b).unwrap();
        let hd_ab = hausdorff_distance(&a, &b).unwrap();
        prop_assert!((cd_ab - chamfer_distance(&b, &a).unwrap()).abs() <= 1e-12 * cd_ab.max(1e-300));
        prop_assert_eq!(hd_ab, hausdorff_distance(&b, &a).unwrap());
        prop_assert!((cd_ab - cd).abs() <= 1e-10 * cd.max(1e-300));
        prop_assert!((hd_ab - hd).abs() <= 1e-10 * hd.max(1e-300));
    }

    #[test]
    fn surface_area_is_rigid_invariant(r in rotation(), shift in vec3()) {
        let mesh = shapes::icosphere(2, 0.7);
        let moved = mesh
            .with_positions(mesh.vertices.iter().map(|v| r * v + shift).collect())
            .unwrap();
        let (a, b) = (surface_area(&mesh), surface_area(&moved));
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), k in 0usize..200) {
        let mesh = shapes::unit_cube();
        let a = sample_points(&mesh, k, seed).unwrap();
        let b = sample_points(&mesh, k, seed).unwrap();
        prop_assert_eq!(a.points, b.points);
        prop_assert_eq!(a.normals, b.normals);
    }

    #[test]
    fn laplacian_is_symmetric_and_semidefinite(
        jitter in prop::collection::vec(vec3(), 42),
        x in prop::collection::vec(-1.0..1.0f64, 42),
    ) {
        let mesh = shapes::icosphere(1, 1.0);
        let moved = mesh
            .with_positions(mesh.vertices.iter().zip(&jitter).map(|(v, j)| v + 0.05 * j).collect())
            .unwrap();
        let lap = cotangent_laplacian(&moved).unwrap();
        let dense = lap.matrix.to_dense();
        prop_assert!((&dense - dense.transpose()).amax() <= 1e-12 * dense.amax());
        let lx = lap.matrix.mul_vec(&x);
        let quad: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        prop_assert!(quad >= -1e-9);
    }

    #[test]
    fn confidence_is_bounded_and_monotone(
        mut d in prop::collection::vec(0.0..1.0f64, 1..50),
        delta in 0.0..2.0f64,
    ) {
        d.sort_by(f64::total_cmp);
        let c = confidence_map(&d, delta);
        prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(c.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn loop_filter_matches_brute_force(
        (verts, ij, ji) in (1usize..100, 1usize..100).prop_flat_map(|(ni, nj)| (
            prop::collection::vec(vec3(), ni),
            prop::collection::vec(0..nj, ni),
            prop::collection::vec(0..ni, nj),
        )),
        delta in 0.0..4.0f64,
    ) {
        let (ni, nj) = (ij.len(), ji.len());
        let got = loop_closure_filter(
            &P2PMap::new(ij.clone(), (0, 1), nj).unwrap(),
            &P2PMap::new(ji.clone(), (1, 0), ni).unwrap(),
            &verts,
            delta,
        )
        .unwrap();
        let expected: Vec<usize> = (0..ni)
            .filter(|&i| (verts[i] - verts[ji[ij[i]]]).norm() < delta)
            .collect();
        prop_assert_eq!(got.retained, expected);
    }

    #[test]
    fn distortion_vanishes_on_skew_and_dilation(m in matrix(), s in -2.0..2.0f64) {
        let skew = 0.5 * (m - m.transpose());
        prop_assert!(distortion(&skew, DistortionForm::Deviatoric) <= 1e-15);
        let dilation = Matrix3::identity() * s + skew;
        prop_assert!(distortion(&dilation, DistortionForm::Deviatoric) <= 1e-12);
    }

    #[test]
    fn strain_vanishes_on_rotations(r in rotation(), n in vec3()) {
        let n = n.try_normalize(1e-6).unwrap_or(Vec3::x());
        prop_assert!(tangential_strain(r.matrix(), &n) <= 1e-12);
    }

    #[test]
    fn accumulated_gradient_is_ordered_product(a in matrix(), b in vec3(), steps in 1usize..12) {
        // Entries below 1/3 keep every Euler step invertible.
        let field = LinearField { a: 0.3 * a, b };
        let cloud = shapes::icosphere(0, 1.0).vertex_cloud();
        let opts = IntegrateOptions { keep_per_step_f: true, ..IntegrateOptions::default() };
        let traj = integrate(&field, &cloud, steps, &opts).unwrap();
        let per_step = traj.per_step_f.as_ref().unwrap();
        for (n, acc) in traj.accumulated_f.iter().enumerate() {
            let product = per_step
                .iter()
                .fold(Matrix3::identity(), |p, frame| frame[n] * p);
            prop_assert!((acc - product).amax() <= 1e-12 * product.amax().max(1.0));
        }
    }

    #[test]
    fn field_evaluation_is_order_independent(xs in cloud(40), t in 0.0..1.0f64, seed in any::<u64>()) {
        let config = FieldConfig { hidden_layers: 2, hidden_width: 16, ..FieldConfig::default() };
        let params = init_params(seed, &config, &BoundingBox::from_points(&[Vec3::repeat(-2.0), Vec3::repeat(2.0)])).unwrap();
        let forward = params.eval_batch(&xs, t).unwrap();
        let reversed: Vec<Vec3> = xs.iter().rev().copied().collect();
        let back = params.eval_batch(&reversed, t).unwrap();
        for (a, b) in forward.iter().zip(back.iter().rev()) {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn divergence_free_flow_preserves_volume_at_first_order() {
    let a: Matrix3<f64> = Matrix3::new(0.3, -0.4, 0.1, 0.4, -0.1, 0.2, 0.0, -0.2, -0.2);
    assert!(a.trace().abs() < 1e-15);
    let field = LinearField {
        a,
        b: Vec3::zeros(),
    };
    let cloud = shapes::icosphere(0, 1.0).vertex_cloud();
    let gap = |steps: usize| {
        let traj = integrate(&field, &cloud, steps, &IntegrateOptions::default()).unwrap();
        (traj.accumulated_f[0].determinant() - 1.0).abs()
    };
    let ratio = gap(32) / gap(64);
    assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
}
