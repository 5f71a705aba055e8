//! Time-dependent velocity field `V(x, t)` as a fully connected network.
//!
//! Inputs are normalized to the bounding box stored with the parameters:
//! `x̂ = 2 (x - c) / diag`, `t̂ = 2t - 1`. The raw network output is scaled
//! back by `diag`, so a raw output of `1e-3` is a velocity of one thousandth
//! of the box diagonal per unit time.
//!
//! Spatial derivatives use central differences; every shifted evaluation is
//! an ordinary forward pass, so losses built on them differentiate through
//! the same tape as plain evaluations.

mod checkpoint;

use nalgebra::{DMatrix, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Vec3};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Relative finite-difference step, as a fraction of the box diagonal.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Rows evaluated per parallel work item.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in x out`.
    pub weight: DMatrix<f64>,
    /// `1 x out`.
    pub bias: DMatrix<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(fan_in, fan_out),
            bias: DMatrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Box the network normalizes its inputs against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScale {
    pub min: Vec3,
    pub max: Vec3,
}

impl InputScale {
    pub fn from_bbox(bbox: &BoundingBox) -> Result<Self> {
        let s = InputScale {
            min: bbox.min,
            max: bbox.max,
        };
        if !(s.diagonal() > 0.0) || !s.diagonal().is_finite() {
            return Err(Error::InvalidArgument(
                "bounding box must have positive finite extent".into(),
            ));
        }
        Ok(s)
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    /// `(scale, offset)` with `x̂ = scale * x + offset`.
    fn affine(&self) -> (f64, [f64; 3]) {
        let s = 2.0 / self.diagonal();
        let c = self.center();
        (s, [-s * c.x, -s * c.y, -s * c.z])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    /// Largest initial velocity, as a fraction of the box diagonal, over a
    /// probe of the normalized domain.
    pub init_max_velocity: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden_layers: 8,
            hidden_width: 256,
            activation: Activation::ShiftedSoftplus,
            init_max_velocity: 2e-3,
        }
    }
}

/// Weights, biases, activation and input normalization of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFieldParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub input_scale: InputScale,
}

/// Gradient of a scalar with respect to every layer, same shapes as the
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<Layer>,
}

impl std::ops::AddAssign<&ParamGradient> for ParamGradient {
    fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

impl ParamGradient {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Entry `k` in the flat order of [`VelocityFieldParams::get`].
    pub fn get(&self, k: usize) -> f64 {
        flat_get(&self.layers, k)
    }
}

fn flat_locate(layers: &[Layer], mut k: usize) -> (usize, bool, usize) {
    for (i, l) in layers.iter().enumerate() {
        if k < l.weight.len() {
            return (i, true, k);
        }
        k -= l.weight.len();
        if k < l.bias.len() {
            return (i, false, k);
        }
        k -= l.bias.len();
    }
    panic!("parameter index out of range");
}

fn flat_get(layers: &[Layer], k: usize) -> f64 {
    let (i, w, j) = flat_locate(layers, k);
    if w {
        layers[i].weight[j]
    } else {
        layers[i].bias[j]
    }
}

impl VelocityFieldParams {
    /// Validates the layer chain (`4 -> ... -> 3`).
    pub fn new(
        layers: Vec<Layer>,
        activation: Activation,
        input_scale: InputScale,
    ) -> Result<Self> {
        let p = VelocityFieldParams {
            layers,
            activation,
            input_scale,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero network of the given shape.
    pub fn zeros(config: &FieldConfig, input_scale: InputScale) -> Self {
        let sizes = layer_sizes(config);
        VelocityFieldParams {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            activation: config.activation,
            input_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DimensionMismatch(m));
        if self.layers.is_empty() {
            return bad("network has no layers".into());
        }
        if self.layers[0].fan_in() != 4 {
            return bad(format!(
                "first layer takes {} inputs, expected 4",
                self.layers[0].fan_in()
            ));
        }
        if self.layers.last().unwrap().fan_out() != 3 {
            return bad("last layer must produce 3 outputs".into());
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return bad(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    pair[0].fan_out(),
                    k + 1,
                    pair[1].fan_in()
                ));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.fan_out()) {
                return bad(format!("layer {k} bias shape {:?}", l.bias.shape()));
            }
        }
        Ok(())
    }

    /// `[4, hidden..., 3]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in()];
        s.extend(self.layers.iter().map(Layer::fan_out));
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Parameter `k` in layer order, weights (column-major) before biases.
    pub fn get(&self, k: usize) -> f64 {
        flat_get(&self.layers, k)
    }

    pub fn set(&mut self, k: usize, value: f64) {
        let (i, w, j) = flat_locate(&self.layers, k);
        if w {
            self.layers[i].weight[j] = value;
        } else {
            self.layers[i].bias[j] = value;
        }
    }

    /// Default finite-difference step for this field's domain.
    pub fn default_fd_step(&self) -> f64 {
        DEFAULT_FD_STEP * self.input_scale.diagonal()
    }

    fn normalized_inputs(&self, xs: &[Vec3], t: f64) -> DMatrix<f64> {
        let (s, off) = self.input_scale.affine();
        let tn = 2.0 * t - 1.0;
        DMatrix::from_fn(
            xs.len(),
            4,
            |r, c| if c < 3 { s * xs[r][c] + off[c] } else { tn },
        )
    }

    /// Raw network output on normalized inputs (`N x 4` to `N x 3`).
    pub fn forward_normalized(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = inputs.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = &h * &layer.weight;
            for (j, mut col) in next.column_iter_mut().enumerate() {
                let bj = layer.bias[(0, j)];
                if k < last {
                    let act = self.activation;
                    col.apply(|v| *v = act.apply(*v + bj));
                } else {
                    col.add_scalar_mut(bj);
                }
            }
            h = next;
        }
        h
    }

    /// Velocities at many points, all at time `t`.
    pub fn eval_batch(&self, xs: &[Vec3], t: f64) -> Result<Vec<Vec3>> {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("time {t}")));
        }
        if let Some(i) = xs.iter().position(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("input point {i}")));
        }
        let diag = self.input_scale.diagonal();
        let chunks: Vec<Vec<Vec3>> = xs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let out = self.forward_normalized(&self.normalized_inputs(chunk, t));
                (0..chunk.len())
                    .map(|r| Vec3::new(out[(r, 0)], out[(r, 1)], out[(r, 2)]) * diag)
                    .collect()
            })
            .collect();
        Ok(chunks.concat())
    }

    pub fn eval(&self, x: &Vec3, t: f64) -> Result<Vec3> {
        Ok(self.eval_batch(std::slice::from_ref(x), t)?[0])
    }

    /// Central-difference Jacobian `∂V_a/∂x_b` with step `h`.
    pub fn spatial_jacobian(&self, x: &Vec3, t: f64, h: f64) -> Result<Matrix3<f64>> {
        let (_, j, _) = self.stencil_batch(std::slice::from_ref(x), t, h)?;
        Ok(j[0])
    }

    /// Seven-point Laplacian of each velocity component with step `h`.
    pub fn spatial_laplacian(&self, x: &Vec3, t: f64, h: f64) -> Result<Vec3> {
        let (_, _, l) = self.stencil_batch(std::slice::from_ref(x), t, h)?;
        Ok(l[0])
    }

    /// Velocity, Jacobian and Laplacian at every point from one `7N` batch.
    pub fn stencil_batch(
        &self,
        xs: &[Vec3],
        t: f64,
        h: f64,
    ) -> Result<(Vec<Vec3>, Vec<Matrix3<f64>>, Vec<Vec3>)> {
        check_step(h)?;
        let stacked = stencil_points(xs, h);
        let out = self.eval_batch(&stacked, t)?;
        let n = xs.len();
        let mut v = Vec::with_capacity(n);
        let mut jac = Vec::with_capacity(n);
        let mut lap = Vec::with_capacity(n);
        for r in 0..n {
            let c = out[r];
            let mut j = Matrix3::zeros();
            let mut l = -6.0 * c;
            for b in 0..3 {
                let (p, m) = (out[(2 * b + 1) * n + r], out[(2 * b + 2) * n + r]);
                j.set_column(b, &((p - m) / (2.0 * h)));
                l += p + m;
            }
            v.push(c);
            jac.push(j);
            lap.push(l / (h * h));
        }
        Ok((v, jac, lap))
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    Ok(())
}

/// `[x; x+h e0; x-h e0; x+h e1; x-h e1; x+h e2; x-h e2]`.
pub fn stencil_points(xs: &[Vec3], h: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(7 * xs.len());
    out.extend_from_slice(xs);
    for axis in 0..3 {
        for sign in [h, -h] {
            let mut e = Vec3::zeros();
            e[axis] = sign;
            out.extend(xs.iter().map(|x| x + e));
        }
    }
    out
}

/// `[4, width × layers, 3]`.
pub fn layer_sizes(config: &FieldConfig) -> Vec<usize> {
    let mut s = vec![4];
    s.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
    s.push(3);
    s
}

/// Seeded initialization with a near-zero starting field.
///
/// Hidden layers use zero-mean Gaussians with variance `2 / fan_in` and zero
/// biases. The output layer is then rescaled so the largest velocity over a
/// fixed probe of the normalized domain equals
/// `init_max_velocity * diag`.
pub fn init_params(
    seed: u64,
    config: &FieldConfig,
    bbox: &BoundingBox,
) -> Result<VelocityFieldParams> {
    let input_scale = InputScale::from_bbox(bbox)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = layer_sizes(config);
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        let std = (2.0 / w[0] as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        layers.push(Layer {
            weight: DMatrix::from_fn(w[0], w[1], |_, _| normal.sample(&mut rng)),
            bias: DMatrix::zeros(1, w[1]),
        });
    }
    let mut params = VelocityFieldParams {
        layers,
        activation: config.activation,
        input_scale,
    };
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let probe = DMatrix::from_fn(512, 4, |_, _| unit.sample(&mut rng));
    let out = params.forward_normalized(&probe);
    let peak = out.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    if peak > 0.0 {
        params.layers.last_mut().unwrap().weight *= config.init_max_velocity / peak;
    }
    Ok(params)
}

/// Anything that can drive an Euler rollout.
pub trait VelocityField: Sync {
    fn velocity(&self, xs: &[Vec3], t: f64) -> Result<Vec<Vec3>>;

    /// Velocities plus spatial Jacobians (`∂V_a/∂x_b` at `(a, b)`). The
    /// default uses central differences of [`VelocityField::velocity`].
    fn velocity_and_jacobian(
        &self,
        xs: &[Vec3],
        t: f64,
        h: f64,
    ) -> Result<(Vec<Vec3>, Vec<Matrix3<f64>>)> {
        check_step(h)?;
        let n = xs.len();
        let out = self.velocity(&stencil_points(xs, h), t)?;
        let jac = (0..n)
            .map(|r| {
                Matrix3::from_fn(|a, b| {
                    (out[(2 * b + 1) * n + r][a] - out[(2 * b + 2) * n + r][a]) / (2.0 * h)
                })
            })
            .collect();
        Ok((out[..n].to_vec(), jac))
    }

    /// Characteristic length; default finite-difference steps are a
    /// fraction of it.
    fn length_scale(&self) -> f64;
}

impl VelocityField for VelocityFieldParams {
    fn velocity(&self, xs: &[Vec3], t: f64) -> Result<Vec<Vec3>> {
        self.eval_batch(xs, t)
    }

    fn velocity_and_jacobian(
        &self,
        xs: &[Vec3],
        t: f64,
        h: f64,
    ) -> Result<(Vec<Vec3>, Vec<Matrix3<f64>>)> {
        let (v, j, _) = self.stencil_batch(xs, t, h)?;
        Ok((v, j))
    }

    fn length_scale(&self) -> f64 {
        self.input_scale.diagonal()
    }
}

/// `V(x, t) = A x + b`, with exact Jacobian `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearField {
    pub a: Matrix3<f64>,
    pub b: Vec3,
}

impl VelocityField for LinearField {
    fn velocity(&self, xs: &[Vec3], _t: f64) -> Result<Vec<Vec3>> {
        Ok(xs.iter().map(|x| self.a * x + self.b).collect())
    }

    fn velocity_and_jacobian(
        &self,
        xs: &[Vec3],
        t: f64,
        _h: f64,
    ) -> Result<(Vec<Vec3>, Vec<Matrix3<f64>>)> {
        Ok((self.velocity(xs, t)?, vec![self.a; xs.len()]))
    }

    fn length_scale(&self) -> f64 {
        1.0
    }
}

/// Network parameters as tape variables.
#[derive(Debug, Clone)]
pub struct FieldVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Velocity, Jacobian (`N x 9`) and Laplacian (`N x 3`) nodes for a batch.
#[derive(Debug, Clone, Copy)]
pub struct StencilVars {
    pub velocity: Var,
    pub jacobian: Var,
    pub laplacian: Var,
}

impl FieldVars {
    /// Places the parameters on `tape` as differentiable leaves.
    pub fn register(tape: &mut Tape, params: &VelocityFieldParams) -> Self {
        let mut weights = Vec::with_capacity(params.layers.len());
        let mut biases = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            weights.push(tape.parameter(l.weight.clone()));
            biases.push(tape.parameter(l.bias.clone()));
        }
        FieldVars { weights, biases }
    }

    /// `V(x, t)` for an `N x 3` node of positions.
    pub fn forward(&self, tape: &mut Tape, params: &VelocityFieldParams, x: Var, t: f64) -> Var {
        let (s, off) = params.input_scale.affine();
        let n = tape.value(x).nrows();
        let xn = tape.affine(x, s, &off);
        let tc = tape.constant(DMatrix::from_element(n, 1, 2.0 * t - 1.0));
        let mut h = tape.hcat(&[xn, tc]);
        let last = self.weights.len() - 1;
        for k in 0..=last {
            let act = (k < last).then_some(params.activation);
            h = tape.dense(h, self.weights[k], self.biases[k], act);
        }
        tape.scale(h, params.input_scale.diagonal())
    }

    /// Velocity and central-difference derivatives at an `N x 3` node.
    pub fn stencil(
        &self,
        tape: &mut Tape,
        params: &VelocityFieldParams,
        x: Var,
        t: f64,
        h: f64,
    ) -> StencilVars {
        let n = tape.value(x).nrows();
        let stacked = tape.stack_shifts(x, h);
        let out = self.forward(tape, params, stacked, t);
        StencilVars {
            velocity: tape.rows(out, 0, n),
            jacobian: tape.fd_jacobian(out, n, h),
            laplacian: tape.fd_laplacian(out, n, h),
        }
    }
}

/// Loss value and its gradient with respect to every parameter.
///
/// `loss` builds a `1 x 1` node from the registered parameters; any number of
/// network evaluations, including shifted ones, may happen inside it.
pub fn param_gradient<F>(params: &VelocityFieldParams, loss: F) -> Result<(f64, ParamGradient)>
where
    F: FnOnce(&mut Tape, &FieldVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = FieldVars::register(&mut tape, params);
    let out = loss(&mut tape, &vars)?;
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (k, l) in params.layers.iter().enumerate() {
        let layer = Layer {
            weight: grads.get_or_zeros(vars.weights[k], l.weight.shape()),
            bias: grads.get_or_zeros(vars.biases[k], l.bias.shape()),
        };
        if !layer
            .weight
            .iter()
            .chain(layer.bias.iter())
            .all(|g| g.is_finite())
        {
            return Err(Error::NonFiniteGradient { layer: k });
        }
        layers.push(layer);
    }
    Ok((value, ParamGradient { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> BoundingBox {
        BoundingBox {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    fn small() -> FieldConfig {
        FieldConfig {
            hidden_layers: 3,
            hidden_width: 16,
            ..FieldConfig::default()
        }
    }

    /// Straight-line evaluator written without matrices.
    fn reference_eval(p: &VelocityFieldParams, x: &Vec3, t: f64) -> Vec3 {
        let diag = p.input_scale.diagonal();
        let c = p.input_scale.center();
        let mut h: Vec<f64> = (0..3).map(|i| 2.0 * (x[i] - c[i]) / diag).collect();
        h.push(2.0 * t - 1.0);
        for (k, l) in p.layers.iter().enumerate() {
            let mut next = vec![0.0; l.fan_out()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut s = l.bias[(0, j)];
                for (i, hi) in h.iter().enumerate() {
                    s += hi * l.weight[(i, j)];
                }
                *out = if k + 1 < p.layers.len() {
                    (1.0 + s.exp()).ln() - 2f64.ln()
                } else {
                    s
                };
            }
            h = next;
        }
        Vec3::new(h[0], h[1], h[2]) * diag
    }

    #[test]
    fn init_is_deterministic_and_small() {
        let cfg = FieldConfig::default();
        let a = init_params(7, &cfg, &unit_box()).unwrap();
        let b = init_params(7, &cfg, &unit_box()).unwrap();
        let c = init_params(8, &cfg, &unit_box()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            a.layer_sizes(),
            vec![4, 256, 256, 256, 256, 256, 256, 256, 256, 3]
        );
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<Vec3> = (0..1000)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let diag = a.input_scale.diagonal();
        for t in [0.0, 0.5, 1.0] {
            let peak = a
                .eval_batch(&xs, t)
                .unwrap()
                .iter()
                .map(|v| v.norm())
                .fold(0.0, f64::max);
            assert!(peak <= 1e-2 * diag, "peak {peak}");
        }
    }

    #[test]
    fn zero_params_give_zero_field() {
        let p = VelocityFieldParams::zeros(&small(), InputScale::from_bbox(&unit_box()).unwrap());
        let x = Vec3::new(0.3, -0.2, 0.9);
        assert_eq!(p.eval(&x, 0.4).unwrap(), Vec3::zeros());
        assert_eq!(p.spatial_jacobian(&x, 0.4, 1e-3).unwrap(), Matrix3::zeros());
        assert_eq!(p.spatial_laplacian(&x, 0.4, 1e-3).unwrap(), Vec3::zeros());
    }

    #[test]
    fn matches_reference_evaluator() {
        let mut p = init_params(3, &small(), &unit_box()).unwrap();
        p.layers.last_mut().unwrap().weight *= 300.0;
        for (i, t) in [(0, 0.0), (1, 0.3), (2, 1.0)] {
            let x = Vec3::new(0.1 * i as f64, -0.5, 0.7);
            let a = p.eval(&x, t).unwrap();
            let b = reference_eval(&p, &x, t);
            assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()), "{a} vs {b}");
        }
    }

    #[test]
    fn eval_is_batch_order_independent() {
        let p = init_params(4, &small(), &unit_box()).unwrap();
        let xs: Vec<Vec3> = (0..5000)
            .map(|i| Vec3::new((i as f64).sin(), (i as f64 * 0.7).cos(), 0.1))
            .collect();
        let fwd = p.eval_batch(&xs, 0.2).unwrap();
        let rev_in: Vec<Vec3> = xs.iter().rev().copied().collect();
        let mut rev = p.eval_batch(&rev_in, 0.2).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    /// One hidden unit per input coordinate with tiny input weights, so the
    /// field is `A x` up to `O(eps)`.
    fn near_linear(a: &Matrix3<f64>, eps: f64) -> VelocityFieldParams {
        let scale = InputScale::from_bbox(&unit_box()).unwrap();
        let diag = scale.diagonal();
        let mut l0 = Layer::zeros(4, 3);
        for i in 0..3 {
            // x̂ = 2x / diag; softplus slope at 0 is 1/2
            l0.weight[(i, i)] = eps;
        }
        let mut l1 = Layer::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                l1.weight[(i, j)] = a[(j, i)] / (eps * 0.5 * 2.0 / diag) / diag;
            }
        }
        VelocityFieldParams::new(vec![l0, l1], Activation::ShiftedSoftplus, scale).unwrap()
    }

    #[test]
    fn linear_construction_derivatives() {
        let a = Matrix3::new(0.2, -0.5, 0.1, 0.3, 0.0, -0.4, 0.05, 0.6, -0.1);
        let p = near_linear(&a, 1e-6);
        let x = Vec3::new(0.3, -0.6, 0.2);
        assert!((p.eval(&x, 0.5).unwrap() - a * x).norm() < 1e-6);
        let j = p.spatial_jacobian(&x, 0.5, 1e-2).unwrap();
        assert!((j - a).amax() < 1e-4);
        assert!(p.spatial_laplacian(&x, 0.5, 1e-2).unwrap().norm() < 1e-3);
    }

    #[test]
    fn quadratic_construction_laplacian() {
        // s(w u) + s(-w u) = w² u² / 4 + O(u⁴) with u = x̂₀ = x₀ for a diag-2 box
        let scale = InputScale::from_bbox(&BoundingBox {
            min: Vec3::new(-1.0, -1.0, -1.0) / 3f64.sqrt(),
            max: Vec3::new(1.0, 1.0, 1.0) / 3f64.sqrt(),
        })
        .unwrap();
        let diag = scale.diagonal();
        let w = 0.05;
        let mut l0 = Layer::zeros(4, 2);
        l0.weight[(0, 0)] = w;
        l0.weight[(0, 1)] = -w;
        let mut l1 = Layer::zeros(2, 3);
        // V₀ = diag · c · w² x̂₀² / 4 with x̂₀ = 2 x₀ / diag
        let c = 4.0 / (w * w) / diag * (diag * diag / 4.0);
        l1.weight[(0, 0)] = c;
        l1.weight[(1, 0)] = c;
        let p = VelocityFieldParams::new(vec![l0, l1], Activation::ShiftedSoftplus, scale).unwrap();
        let x = Vec3::new(0.2, 0.1, -0.3);
        assert!((p.eval(&x, 0.0).unwrap()[0] - x[0] * x[0]).abs() < 1e-3);
        let lap = p.spatial_laplacian(&x, 0.0, 1e-2).unwrap();
        assert!((lap[0] - 2.0).abs() < 0.1, "{lap}");
    }

    #[test]
    fn jacobian_converges_at_second_order() {
        let mut p = init_params(5, &small(), &unit_box()).unwrap();
        p.layers.last_mut().unwrap().weight *= 200.0;
        let x = Vec3::new(0.1, 0.2, -0.3);
        let exact = p.spatial_jacobian(&x, 0.3, 1e-5).unwrap();
        let e1 = (p.spatial_jacobian(&x, 0.3, 0.1).unwrap() - exact).amax();
        let e2 = (p.spatial_jacobian(&x, 0.3, 0.05).unwrap() - exact).amax();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn gradient_of_squared_output_matches_fd() {
        let mut p = init_params(6, &small(), &unit_box()).unwrap();
        p.layers.last_mut().unwrap().weight *= 100.0;
        let x0 = Vec3::new(0.2, -0.4, 0.5);
        let loss_of = |q: &VelocityFieldParams| q.eval(&x0, 0.7).unwrap().norm_squared();
        let (value, grad) = param_gradient(&p, |tape, vars| {
            let x = tape.constant(DMatrix::from_row_slice(1, 3, x0.as_slice()));
            let v = vars.forward(tape, &p, x, 0.7);
            let s = tape.square(v);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!((value - loss_of(&p)).abs() < 1e-14);
        let n = p.parameter_count();
        for k in (0..n).step_by(n / 50) {
            let eps = 1e-6;
            let mut q = p.clone();
            q.set(k, p.get(k) + eps);
            let up = loss_of(&q);
            q.set(k, p.get(k) - eps);
            let fd = (up - loss_of(&q)) / (2.0 * eps);
            let g = grad.get(k);
            assert!(
                (g - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                "param {k}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = init_params(1, &small(), &unit_box()).unwrap();
        let (_, g) = param_gradient(&p, |tape, _| Ok(tape.scalar_constant(3.0))).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn tape_stencil_matches_direct() {
        let p = init_params(2, &small(), &unit_box()).unwrap();
        let xs = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.4, 0.0, 0.5)];
        let (v, j, l) = p.stencil_batch(&xs, 0.6, 1e-2).unwrap();
        let mut tape = Tape::new();
        let vars = FieldVars::register(&mut tape, &p);
        let x = tape.constant(DMatrix::from_fn(2, 3, |r, c| xs[r][c]));
        let s = vars.stencil(&mut tape, &p, x, 0.6, 1e-2);
        for r in 0..2 {
            for a in 0..3 {
                assert!((tape.value(s.velocity)[(r, a)] - v[r][a]).abs() < 1e-15);
                assert!((tape.value(s.laplacian)[(r, a)] - l[r][a]).abs() < 1e-8);
                for b in 0..3 {
                    assert!((tape.value(s.jacobian)[(r, 3 * a + b)] - j[r][(a, b)]).abs() < 1e-12);
                }
            }
        }
    }
}
