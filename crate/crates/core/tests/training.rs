use flowmorph::autodiff::Tape;
use flowmorph::deformation::{integrate, IntegrateOptions};
use flowmorph::geometry::{PointCloud, Vec3};
use flowmorph::training::{
    batch_gradient, build_losses, loss_distortion, loss_match, loss_normal, loss_overlap,
    loss_smooth, loss_stretch, make_batch, total_loss, LossSettings, TrainConfig,
};
use flowmorph::velocity_field::{param_gradient, FieldVars};

mod common;
use common::{gradient_error, instance, rel, single_term};

#[test]
fn total_equals_independently_summed_terms() {
    for seed in 0..3 {
        let (p0, p1, corr, params, cfg) = instance(10, seed);
        let got = total_loss(&params, &p0, &p1, &corr, &cfg).unwrap();

        let h = cfg.fd_step_h * params.input_scale.diagonal();
        let opts = IntegrateOptions {
            keep_per_step_f: true,
            fd_step: Some(h),
            unscaled_f: false,
        };
        let traj = integrate(&params, &p0, cfg.steps_t, &opts).unwrap();
        let (mut lv, mut ld) = (0.0, 0.0);
        for k in 0..cfg.steps_t {
            let t = k as f64 / cfg.steps_t as f64;
            let (v, j, lap) = params.stencil_batch(&traj.positions[k], t, h).unwrap();
            lv += loss_smooth(&v, &lap, cfg.weights.alpha).unwrap() / cfg.steps_t as f64;
            ld += loss_distortion(&j, cfg.distortion).unwrap() / cfg.steps_t as f64;
        }
        let fs = traj.per_step_f.as_ref().unwrap();
        let ls = loss_stretch(fs, &traj.normals[..cfg.steps_t]).unwrap();
        let fin = traj.final_positions();
        let lo = loss_overlap(fin, &p1.points).unwrap();
        let last_normals = &traj.normals[cfg.steps_t];
        let src_n: Vec<Vec3> = corr.pairs.iter().map(|&(s, _)| last_normals[s]).collect();
        let dst_n: Vec<Vec3> = corr.pairs.iter().map(|&(_, d)| p1.normals[d]).collect();
        let ln = loss_normal(&src_n, &dst_n);
        let src_x: Vec<Vec3> = corr.pairs.iter().map(|&(s, _)| fin[s]).collect();
        let dst_x: Vec<Vec3> = corr.pairs.iter().map(|&(_, d)| p1.points[d]).collect();
        let lm = loss_match(&src_x, &dst_x, &corr.confidence);

        for (name, a, b) in [
            ("v", got.v, lv),
            ("o", got.o, lo),
            ("n", got.n, ln),
            ("s", got.s, ls),
            ("m", got.m, lm),
            ("d", got.d, ld),
        ] {
            assert!(b > 1e-8, "term {name} is degenerate: {b}");
            assert!(rel(a, b) < 1e-12, "term {name}: tape {a} vs plain {b}");
        }
        let w = cfg.weights;
        let sum = w.lambda_v * lv
            + w.lambda_o * lo
            + w.lambda_n * ln
            + w.lambda_s * ls
            + w.lambda_m * lm
            + w.lambda_d * ld;
        assert!(
            rel(got.total, sum) < 1e-12,
            "total {} vs {}",
            got.total,
            sum
        );
    }
}

#[test]
fn every_term_gradient_matches_finite_differences() {
    let (p0, p1, corr, params, cfg) = instance(30, 7);
    let names = [
        "smooth",
        "overlap",
        "normal",
        "stretch",
        "match",
        "distortion",
    ];
    for (k, name) in names.iter().enumerate() {
        let cfg = TrainConfig {
            weights: single_term(k),
            ..cfg.clone()
        };
        let err = gradient_error(&params, &p0, &p1, &corr, &cfg);
        assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
    }
    let err = gradient_error(&params, &p0, &p1, &corr, &cfg);
    assert!(err < 1e-4, "total: relative gradient error {err:e}");
}

#[test]
fn point_order_does_not_change_the_loss() {
    let (p0, p1, corr, params, cfg) = instance(20, 3);
    let base = total_loss(&params, &p0, &p1, &corr, &cfg).unwrap();
    let n = p0.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let shuffle = |c: &PointCloud| PointCloud {
        points: perm.iter().map(|&i| c.points[i]).collect(),
        normals: perm.iter().map(|&i| c.normals[i]).collect(),
        provenance: None,
    };
    let mut corr2 = corr.clone();
    corr2.pairs = corr.pairs.iter().map(|&(s, d)| (inv[s], inv[d])).collect();
    let got = total_loss(&params, &shuffle(&p0), &shuffle(&p1), &corr2, &cfg).unwrap();
    for (a, b) in got.terms().iter().zip(base.terms()) {
        assert!(rel(*a, b) < 1e-10, "{a} vs {b}");
    }
    assert!(rel(got.total, base.total) < 1e-10);
}

#[test]
fn zero_weight_terms_have_no_influence() {
    let (p0, p1, corr, params, cfg) = instance(12, 11);
    let all: Vec<usize> = (0..p0.len()).collect();
    let batch = make_batch(&p0, &p1, &corr, &all, &all);
    for k in 0..6 {
        let mut weights = cfg.weights;
        let lambdas = [
            &mut weights.lambda_v,
            &mut weights.lambda_o,
            &mut weights.lambda_n,
            &mut weights.lambda_s,
            &mut weights.lambda_m,
            &mut weights.lambda_d,
        ];
        *lambdas.into_iter().nth(k).unwrap() = 0.0;
        let settings = flowmorph::training::LossSettings {
            weights,
            steps: cfg.steps_t,
            h: cfg.fd_step_h * params.input_scale.diagonal(),
            distortion: cfg.distortion,
            unscaled_f: false,
        };
        let (_, with_flag) = param_gradient(&params, |tape, vars| {
            Ok(build_losses(tape, vars, &params, &batch, &settings)?
                .0
                .total)
        })
        .unwrap();
        // The same total assembled by hand from the five remaining terms.
        let (_, by_hand) = param_gradient(&params, |tape: &mut Tape, vars: &FieldVars| {
            let nodes = build_losses(tape, vars, &params, &batch, &settings)?.0;
            let w = [
                weights.lambda_v,
                weights.lambda_o,
                weights.lambda_n,
                weights.lambda_s,
                weights.lambda_m,
                weights.lambda_d,
            ];
            let terms = [nodes.v, nodes.o, nodes.n, nodes.s, nodes.m, nodes.d];
            let mut acc = tape.scalar_constant(0.0);
            for (j, (l, t)) in w.iter().zip(terms).enumerate() {
                if j != k {
                    let s = tape.scale(t, *l);
                    acc = tape.add(acc, s);
                }
            }
            Ok(acc)
        })
        .unwrap();
        for i in 0..params.parameter_count() {
            let (a, b) = (with_flag.get(i), by_hand.get(i));
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                "term {k}, parameter {i}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn chunked_gradient_equals_single_tape_gradient() {
    let (p0, p1, corr, params, cfg) = instance(600, 5);
    let all: Vec<usize> = (0..p0.len()).collect();
    let batch = make_batch(&p0, &p1, &corr, &all, &all);
    let (breakdown, chunked, _) = batch_gradient(&params, &batch, &cfg).unwrap();
    let settings = LossSettings {
        weights: cfg.weights,
        steps: cfg.steps_t,
        h: cfg.fd_step_h * params.input_scale.diagonal(),
        distortion: cfg.distortion,
        unscaled_f: false,
    };
    let (total, whole) = param_gradient(&params, |tape, vars| {
        Ok(build_losses(tape, vars, &params, &batch, &settings)?
            .0
            .total)
    })
    .unwrap();
    assert!(rel(breakdown.total, total) < 1e-12);
    let mut diff = chunked.clone();
    for l in &mut diff.layers {
        l.weight *= -1.0;
        l.bias *= -1.0;
    }
    diff += &whole;
    assert!(
        diff.norm() < 1e-10 * whole.norm(),
        "{} vs {}",
        diff.norm(),
        whole.norm()
    );
}
