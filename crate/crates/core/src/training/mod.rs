//! Loss terms and the optimization loop that fits a velocity field carrying
//! one point cloud onto another.

mod files;
mod losses;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{sample_points, BoundingBox, Mesh, PointCloud};
use crate::registration::CorrespondenceSet;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::velocity_field::{
    init_params, param_gradient, FieldConfig, FieldVars, Layer, ParamGradient, VelocityFieldParams,
};
use crate::warning::{emit, Warning};

pub use files::{load_config, parse_config, read_loss_csv, write_loss_csv, LOSS_CSV_HEADER};
pub use losses::{
    build_chunk_losses, build_losses, distortion, loss_distortion, loss_match, loss_normal,
    loss_overlap, loss_smooth, loss_stretch, plan_chunks, tangential_strain, Batch, LossChunk,
    LossNodes, LossSettings, LOSS_CHUNK,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_o: f64,
    pub lambda_n: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    /// Weight of the Laplacian inside the smoothness term.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_v: 0.1,
            lambda_o: 1.0,
            lambda_n: 0.1,
            lambda_s: 0.5,
            lambda_m: 1.0,
            lambda_d: 0.1,
            alpha: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_v: 0.0,
            lambda_o: 0.0,
            lambda_n: 0.0,
            lambda_s: 0.0,
            lambda_m: 0.0,
            lambda_d: 0.0,
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_v,
            self.lambda_o,
            self.lambda_n,
            self.lambda_s,
            self.lambda_m,
            self.lambda_d,
            self.alpha,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// How the distortion term combines the traces of `D = sym(∇V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionForm {
    /// `|tr(D)²/6 − tr(D²)/2|`: zero for rotations and uniform dilations.
    Deviatoric,
    /// `|tr(D)²/6 − tr(D²)²/2|`.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub steps_t: usize,
    /// Minibatch size used when the source cloud exceeds `full_batch_limit`.
    pub batch_points: usize,
    pub full_batch_limit: usize,
    pub seed: u64,
    /// Finite-difference step as a fraction of the box diagonal.
    pub fd_step_h: f64,
    /// Loop-closure threshold; when set, pairs at or above it are dropped
    /// before training and confidences recomputed.
    pub delta_d: Option<f64>,
    pub weights: LossWeights,
    pub distortion: DistortionForm,
    pub unscaled_f: bool,
    /// Surface samples added to the vertices of each mesh by front ends.
    pub sample_points: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4000,
            learning_rate: 1e-3,
            lr_decay_epochs: vec![2000, 3000],
            lr_decay_factor: 0.5,
            steps_t: 8,
            batch_points: 8192,
            full_batch_limit: 20_000,
            seed: 0,
            fd_step_h: 1e-3,
            delta_d: None,
            weights: LossWeights::default(),
            distortion: DistortionForm::Deviatoric,
            unscaled_f: false,
            sample_points: 10_000,
            hidden_layers: 8,
            hidden_width: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.steps_t == 0 {
            return bad("steps_t must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.fd_step_h > 0.0) {
            return bad("fd_step_h must be positive");
        }
        if self.batch_points == 0 {
            return bad("batch_points must be at least 1");
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return bad("network needs at least one hidden layer of nonzero width");
        }
        if matches!(self.delta_d, Some(d) if !(d > 0.0)) {
            return bad("delta_d must be positive");
        }
        self.weights.validate()
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            ..FieldConfig::default()
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    fn settings(&self, params: &VelocityFieldParams) -> LossSettings {
        LossSettings {
            weights: self.weights,
            steps: self.steps_t,
            h: self.fd_step_h * params.input_scale.diagonal(),
            distortion: self.distortion,
            unscaled_f: self.unscaled_f,
        }
    }
}

/// Value of every term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub v: f64,
    pub o: f64,
    pub n: f64,
    pub s: f64,
    pub m: f64,
    pub d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [self.v, self.o, self.n, self.s, self.m, self.d]
    }

    fn sum(parts: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = LossBreakdown {
            v: 0.0,
            o: 0.0,
            n: 0.0,
            s: 0.0,
            m: 0.0,
            d: 0.0,
            total: 0.0,
        };
        for p in parts {
            acc.v += p.v;
            acc.o += p.o;
            acc.n += p.n;
            acc.s += p.s;
            acc.m += p.m;
            acc.d += p.d;
            acc.total += p.total;
        }
        acc
    }

    /// `Σ λ_k term_k` recomputed from the stored terms.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let lambdas = [
            w.lambda_v, w.lambda_o, w.lambda_n, w.lambda_s, w.lambda_m, w.lambda_d,
        ];
        lambdas
            .iter()
            .zip(self.terms())
            .filter(|(l, _)| **l != 0.0)
            .map(|(l, t)| l * t)
            .sum()
    }
}

/// Joint bounding box of the two clouds, the domain the network normalizes
/// against.
pub fn joint_bbox(p0: &PointCloud, p1: &PointCloud) -> BoundingBox {
    p0.bounding_box().union(&p1.bounding_box())
}

/// Training clouds of a mesh pair: vertices first, so vertex-indexed
/// correspondences stay valid, then `samples` surface points.
pub fn training_clouds(
    source: &Mesh,
    target: &Mesh,
    samples: usize,
    seed: u64,
) -> Result<(PointCloud, PointCloud)> {
    Ok((
        sample_points(source, samples, seed)?,
        sample_points(target, samples, seed.wrapping_add(1))?,
    ))
}

fn check_inputs(p0: &PointCloud, p1: &PointCloud, corr: &CorrespondenceSet) -> Result<()> {
    if p0.is_empty() || p1.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    if p0.normals.len() != p0.len() || p1.normals.len() != p1.len() {
        return Err(Error::DimensionMismatch(
            "every point needs a normal".into(),
        ));
    }
    for &(s, d) in &corr.pairs {
        if s >= p0.len() || d >= p1.len() {
            return Err(Error::DimensionMismatch(format!(
                "pair ({s}, {d}) out of range for clouds of {} and {} points",
                p0.len(),
                p1.len()
            )));
        }
    }
    Ok(())
}

/// Batch over the given source rows and target rows. Pairs count when their
/// source is in the batch.
pub fn make_batch(
    p0: &PointCloud,
    p1: &PointCloud,
    corr: &CorrespondenceSet,
    source_rows: &[usize],
    target_rows: &[usize],
) -> Batch {
    let mut slot = vec![usize::MAX; p0.len()];
    for (b, &i) in source_rows.iter().enumerate() {
        slot[i] = b;
    }
    let matched = corr
        .pairs
        .iter()
        .zip(&corr.confidence)
        .filter(|((s, _), _)| slot[*s] != usize::MAX)
        .map(|(&(s, d), &c)| (slot[s], p1.points[d], p1.normals[d], c))
        .collect();
    Batch {
        points: source_rows.iter().map(|&i| p0.points[i]).collect(),
        normals: source_rows.iter().map(|&i| p0.normals[i]).collect(),
        target: target_rows.iter().map(|&i| p1.points[i]).collect(),
        matched,
    }
}

/// Full-set evaluation of every term.
pub fn total_loss(
    params: &VelocityFieldParams,
    p0: &PointCloud,
    p1: &PointCloud,
    corr: &CorrespondenceSet,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    check_inputs(p0, p1, corr)?;
    let batch = make_batch(
        p0,
        p1,
        corr,
        &(0..p0.len()).collect::<Vec<_>>(),
        &(0..p1.len()).collect::<Vec<_>>(),
    );
    let settings = config.settings(params);
    let (chunks, _) = plan_chunks(params, &batch, &settings, LOSS_CHUNK)?;
    let parts: Vec<LossBreakdown> = chunks
        .par_iter()
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = FieldVars::register(&mut tape, params);
            Ok(build_chunk_losses(&mut tape, &vars, params, chunk, &settings)?.breakdown(&tape))
        })
        .collect::<Result<_>>()?;
    Ok(LossBreakdown::sum(&parts))
}

/// Loss breakdown plus parameter gradient of the total on one batch.
///
/// Chunks are differentiated independently, in parallel, and reduced in a
/// fixed order, so the result does not depend on the thread count.
pub fn batch_gradient(
    params: &VelocityFieldParams,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(LossBreakdown, ParamGradient, Vec<Warning>)> {
    let settings = config.settings(params);
    let (chunks, warnings) = plan_chunks(params, batch, &settings, LOSS_CHUNK)?;
    let parts: Vec<(LossBreakdown, ParamGradient)> = chunks
        .par_iter()
        .map(|chunk| {
            let mut breakdown = None;
            let (_, grad) = param_gradient(params, |tape, vars| {
                let nodes = build_chunk_losses(tape, vars, params, chunk, &settings)?;
                breakdown = Some(nodes.breakdown(tape));
                Ok(nodes.total)
            })?;
            Ok((breakdown.expect("closure ran"), grad))
        })
        .collect::<Result<_>>()?;
    let mut parts = parts.into_iter();
    let (first, mut grad) = parts.next().expect("at least one chunk");
    let mut breakdowns = vec![first];
    for (b, g) in parts {
        breakdowns.push(b);
        grad += &g;
    }
    Ok((LossBreakdown::sum(&breakdowns), grad, warnings))
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: VelocityFieldParams,
    /// Loss at the start of every completed epoch.
    pub history: Vec<LossBreakdown>,
    pub warnings: Vec<Warning>,
    /// Set when training stopped early on a non-finite loss or rollout.
    pub divergence: Option<Error>,
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &VelocityFieldParams) -> Self {
        let zeros: Vec<Layer> = params
            .layers
            .iter()
            .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut VelocityFieldParams, grad: &[Layer], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let state = self.m.iter_mut().zip(self.v.iter_mut());
        for ((layer, g), (m, v)) in params.layers.iter_mut().zip(grad).zip(state) {
            let pairs = [
                (&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight),
                (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in pairs {
                for i in 0..p.len() {
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Fits a velocity field from `p0` to `p1`.
///
/// Every epoch draws a batch (all points up to `full_batch_limit`, otherwise
/// `batch_points` random sources and as many random targets), evaluates the
/// losses on a `steps_t` rollout and takes one Adam step. Results depend only
/// on the inputs and `config.seed`.
pub fn train(
    p0: &PointCloud,
    p1: &PointCloud,
    corr: &CorrespondenceSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = init_params(config.seed, &config.field_config(), &joint_bbox(p0, p1))?;
    train_from(params, p0, p1, corr, config)
}

/// [`train`] starting from given parameters.
pub fn train_from(
    mut params: VelocityFieldParams,
    p0: &PointCloud,
    p1: &PointCloud,
    corr: &CorrespondenceSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_inputs(p0, p1, corr)?;
    let mut warnings = Vec::new();
    let corr = match config.delta_d {
        Some(delta) => corr.refiltered(delta),
        None => corr.clone(),
    };
    if corr.is_empty() {
        warnings.push(emit(Warning::EmptyCorrespondences));
    }
    let full = p0.len() <= config.full_batch_limit;
    let all_src: Vec<usize> = (0..p0.len()).collect();
    let all_dst: Vec<usize> = (0..p1.len()).collect();
    let full_batch = full.then(|| make_batch(p0, p1, &corr, &all_src, &all_dst));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut divergence = None;

    for epoch in 0..config.epochs {
        let drawn;
        let batch = match &full_batch {
            Some(b) => b,
            None => {
                let src = sample(&mut rng, p0.len(), config.batch_points.min(p0.len())).into_vec();
                let dst = sample(&mut rng, p1.len(), config.batch_points.min(p1.len())).into_vec();
                drawn = make_batch(p0, p1, &corr, &src, &dst);
                &drawn
            }
        };
        let (breakdown, grad, batch_warnings) = match batch_gradient(&params, batch, config) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => {
                log::error!("epoch {epoch}: {e}; keeping last finite parameters");
                divergence = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        for w in batch_warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        if !breakdown.total.is_finite() {
            let e = Error::NonFinite(format!("total loss at epoch {epoch}"));
            log::error!("{e}; keeping last finite parameters");
            divergence = Some(e);
            break;
        }
        if epoch % 100 == 0 || epoch + 1 == config.epochs {
            log::info!(
                "epoch {epoch}: total {:.4e} (v {:.3e} o {:.3e} n {:.3e} s {:.3e} m {:.3e} d {:.3e})",
                breakdown.total,
                breakdown.v,
                breakdown.o,
                breakdown.n,
                breakdown.s,
                breakdown.m,
                breakdown.d
            );
        }
        history.push(breakdown);
        adam.step(&mut params, &grad.layers, config.learning_rate_at(epoch));
    }
    Ok(TrainOutcome {
        params,
        history,
        warnings,
        divergence,
    })
}
