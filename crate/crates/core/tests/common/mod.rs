//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use flowmorph::geometry::{PointCloud, Vec3};
use flowmorph::registration::CorrespondenceSet;
use flowmorph::training::{
    build_losses, joint_bbox, make_batch, total_loss, LossSettings, LossWeights, TrainConfig,
};
use flowmorph::velocity_field::{init_params, param_gradient, VelocityFieldParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 0.2 {
            return v.normalize();
        }
    }
}

/// Random clouds, a partial correspondence set with random confidences and
/// a field strong enough that every term is far from zero.
pub fn instance(
    n: usize,
    seed: u64,
) -> (
    PointCloud,
    PointCloud,
    CorrespondenceSet,
    VelocityFieldParams,
    TrainConfig,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = |rng: &mut ChaCha8Rng, shift: f64| {
        let points = (0..n)
            .map(|_| unit(rng) * 0.5 + Vec3::new(shift, 0.0, 0.0))
            .collect();
        let normals = (0..n).map(|_| unit(rng)).collect();
        PointCloud {
            points,
            normals,
            provenance: None,
        }
    };
    let p0 = cloud(&mut rng, 0.0);
    let p1 = cloud(&mut rng, 0.15);
    let mut corr = CorrespondenceSet::identity(n, 1.0);
    corr.pairs.truncate(n - 2);
    corr.loop_distance.truncate(n - 2);
    corr.confidence = (0..n - 2).map(|_| rng.random_range(0.2..1.0)).collect();
    corr.pairs.swap(0, 1);
    corr.pairs[0].1 = 5;

    let cfg = TrainConfig {
        steps_t: 2,
        hidden_layers: 2,
        hidden_width: 12,
        fd_step_h: 1e-2,
        ..TrainConfig::default()
    };
    let mut params = init_params(seed, &cfg.field_config(), &joint_bbox(&p0, &p1)).unwrap();
    let last = params.layers.last_mut().unwrap();
    last.weight *= 60.0;
    last.bias
        .iter_mut()
        .enumerate()
        .for_each(|(i, b)| *b = 0.01 * (i as f64 + 1.0));
    (p0, p1, corr, params, cfg)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn single_term(k: usize) -> LossWeights {
    let mut w = LossWeights::zero();
    w.alpha = 0.01;
    match k {
        0 => w.lambda_v = 1.0,
        1 => w.lambda_o = 1.0,
        2 => w.lambda_n = 1.0,
        3 => w.lambda_s = 1.0,
        4 => w.lambda_m = 1.0,
        _ => w.lambda_d = 1.0,
    }
    w
}

/// Relative error `‖g − g_fd‖ / ‖g_fd‖` over a spread of coordinates.
pub fn gradient_error(
    params: &VelocityFieldParams,
    p0: &PointCloud,
    p1: &PointCloud,
    corr: &CorrespondenceSet,
    cfg: &TrainConfig,
) -> f64 {
    let all: Vec<usize> = (0..p0.len()).collect();
    let targets: Vec<usize> = (0..p1.len()).collect();
    let batch = make_batch(p0, p1, corr, &all, &targets);
    let (_, grad) = param_gradient(params, |tape, vars| {
        let settings = LossSettings {
            weights: cfg.weights,
            steps: cfg.steps_t,
            h: cfg.fd_step_h * params.input_scale.diagonal(),
            distortion: cfg.distortion,
            unscaled_f: cfg.unscaled_f,
        };
        Ok(build_losses(tape, vars, params, &batch, &settings)?.0.total)
    })
    .unwrap();
    let count = params.parameter_count();
    let eps = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for k in (0..count).step_by((count / 40).max(1)) {
        let mut plus = params.clone();
        plus.set(k, params.get(k) + eps);
        let mut minus = params.clone();
        minus.set(k, params.get(k) - eps);
        let fp = total_loss(&plus, p0, p1, corr, cfg).unwrap().total;
        let fm = total_loss(&minus, p0, p1, corr, cfg).unwrap().total;
        let fd = (fp - fm) / (2.0 * eps);
        num += (grad.get(k) - fd).powi(2);
        den += fd * fd;
    }
    assert!(den > 0.0, "finite-difference gradient vanished");
    (num / den).sqrt()
}
