//! The six loss terms, each in a plain form over precomputed quantities and
//! as part of one differentiable rollout on a [`Tape`].

use nalgebra::{DMatrix, Matrix3};

use super::{DistortionForm, LossBreakdown, LossWeights};
use crate::autodiff::{det3_row, mat3_row, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::metrics::nearest_sq_distances;
use crate::geometry::{chamfer_distance, KdTree, Vec3};
use crate::velocity_field::{FieldVars, VelocityFieldParams};
use crate::warning::{emit, Warning};

/// Mean of `‖V − αΔV‖²` over samples.
pub fn loss_smooth(velocities: &[Vec3], laplacians: &[Vec3], alpha: f64) -> Result<f64> {
    if velocities.is_empty() || velocities.len() != laplacians.len() {
        return Err(Error::Empty("smoothness samples"));
    }
    let s: f64 = velocities
        .iter()
        .zip(laplacians)
        .map(|(v, l)| (v - alpha * l).norm_squared())
        .sum();
    Ok(s / velocities.len() as f64)
}

/// Chamfer distance between the rolled-out points and the target cloud.
pub fn loss_overlap(final_positions: &[Vec3], target: &[Vec3]) -> Result<f64> {
    chamfer_distance(final_positions, target)
}

/// Mean unsquared distance between transported and target normals; zero
/// with a warning when there are no pairs.
pub fn loss_normal(transported: &[Vec3], targets: &[Vec3]) -> f64 {
    if transported.is_empty() {
        emit(Warning::NoMatchedPoints {
            term: "normal loss",
        });
        return 0.0;
    }
    transported
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / transported.len() as f64
}

/// `‖Pᵀ (FᵀF − I) P‖_F` with `P = I − n nᵀ`.
pub fn tangential_strain(f: &Matrix3<f64>, n: &Vec3) -> f64 {
    let p = Matrix3::identity() - n * n.transpose();
    (p.transpose() * (f.transpose() * f - Matrix3::identity()) * p).norm()
}

/// Mean tangential strain over steps and points; `normals[k]` must be the
/// normals at step `k`, before `f[k]` acts.
pub fn loss_stretch(
    per_step_f: &[Vec<Matrix3<f64>>],
    per_step_normals: &[Vec<Vec3>],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (fs, ns) in per_step_f.iter().zip(per_step_normals) {
        for (f, n) in fs.iter().zip(ns) {
            sum += tangential_strain(f, n);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("stretch samples"));
    }
    Ok(sum / count as f64)
}

/// Mean of `C_i ‖x_i − y_i‖²`; zero with a warning when there are no pairs.
pub fn loss_match(final_positions: &[Vec3], targets: &[Vec3], confidence: &[f64]) -> f64 {
    if final_positions.is_empty() {
        emit(Warning::NoMatchedPoints { term: "match loss" });
        return 0.0;
    }
    final_positions
        .iter()
        .zip(targets)
        .zip(confidence)
        .map(|((x, y), c)| c * (x - y).norm_squared())
        .sum::<f64>()
        / final_positions.len() as f64
}

/// Distortion of one velocity gradient, from its symmetric part `D`.
pub fn distortion(jacobian: &Matrix3<f64>, form: DistortionForm) -> f64 {
    let d = 0.5 * (jacobian + jacobian.transpose());
    let tr = d.trace();
    let tr_dd = (d * d).trace();
    match form {
        DistortionForm::Deviatoric => (tr * tr / 6.0 - tr_dd / 2.0).abs(),
        DistortionForm::Literal => (tr * tr / 6.0 - tr_dd * tr_dd / 2.0).abs(),
    }
}

pub fn loss_distortion(jacobians: &[Matrix3<f64>], form: DistortionForm) -> Result<f64> {
    if jacobians.is_empty() {
        return Err(Error::Empty("distortion samples"));
    }
    Ok(jacobians.iter().map(|j| distortion(j, form)).sum::<f64>() / jacobians.len() as f64)
}

/// One training instance restricted to a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub target: Vec<Vec3>,
    /// `(batch row, target position, target normal, confidence)`.
    pub matched: Vec<(usize, Vec3, Vec3, f64)>,
}

/// Settings shared by every loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub steps: usize,
    /// Absolute finite-difference step.
    pub h: f64,
    pub distortion: DistortionForm,
    pub unscaled_f: bool,
}

/// Node of every term plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub v: Var,
    pub o: Var,
    pub n: Var,
    pub s: Var,
    pub m: Var,
    pub d: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            v: tape.scalar(self.v),
            o: tape.scalar(self.o),
            n: tape.scalar(self.n),
            s: tape.scalar(self.s),
            m: tape.scalar(self.m),
            d: tape.scalar(self.d),
            total: tape.scalar(self.total),
        }
    }
}

fn points_matrix(points: &[Vec3]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |r, c| points[r][c])
}

fn add_scalar_terms(tape: &mut Tape, acc: Option<Var>, term: Var) -> Var {
    match acc {
        Some(a) => tape.add(a, term),
        None => term,
    }
}

/// Points per independently differentiated slice of a batch.
pub const LOSS_CHUNK: usize = 256;

/// One slice of a batch with everything needed to evaluate its share of
/// every term. Shares of all chunks add up to the batch losses.
#[derive(Debug, Clone)]
pub struct LossChunk {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Target nearest to each rolled-out point.
    pub nearest: Vec<Vec3>,
    /// `(chunk row, target)` for targets whose nearest rolled-out point lies
    /// in this chunk.
    pub pulls: Vec<(usize, Vec3)>,
    /// `(chunk row, target position, target normal, confidence)`.
    pub matched: Vec<(usize, Vec3, Vec3, f64)>,
    /// Batch points, targets and matched pairs.
    pub totals: (usize, usize, usize),
}

/// Euler rollout of the batch without gradients, used to fix the nearest
/// neighbors of the overlap term.
fn rollout_final(params: &VelocityFieldParams, points: &[Vec3], steps: usize) -> Result<Vec<Vec3>> {
    let dt = 1.0 / steps as f64;
    let mut x = points.to_vec();
    for k in 0..steps {
        let v = params.eval_batch(&x, k as f64 * dt)?;
        for (p, v) in x.iter_mut().zip(&v) {
            *p += v * dt;
        }
        if let Some(i) = x.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!(
                "position of point {i} at step {}",
                k + 1
            )));
        }
    }
    Ok(x)
}

/// Splits `batch` into chunks of at most `chunk_size` points and assigns
/// the nearest neighbors of both Chamfer directions at the current
/// parameters.
pub fn plan_chunks(
    params: &VelocityFieldParams,
    batch: &Batch,
    settings: &LossSettings,
    chunk_size: usize,
) -> Result<(Vec<LossChunk>, Vec<Warning>)> {
    let n = batch.points.len();
    if n == 0 || batch.target.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if settings.steps == 0 || chunk_size == 0 {
        return Err(Error::InvalidArgument(
            "steps and chunk size must be positive".into(),
        ));
    }
    let mut warnings = Vec::new();
    if batch.matched.is_empty() {
        warnings.push(emit(Warning::NoMatchedPoints {
            term: "normal and match losses",
        }));
    }
    let fin = rollout_final(params, &batch.points, settings.steps)?;
    let target_tree = KdTree::build(&batch.target);
    let fwd = nearest_sq_distances(&fin, &target_tree);
    let source_tree = KdTree::build(&fin);
    let bwd = nearest_sq_distances(&batch.target, &source_tree);
    let totals = (n, batch.target.len(), batch.matched.len());

    let mut chunks: Vec<LossChunk> = (0..n)
        .step_by(chunk_size)
        .map(|start| {
            let rows = start..(start + chunk_size).min(n);
            LossChunk {
                points: batch.points[rows.clone()].to_vec(),
                normals: batch.normals[rows.clone()].to_vec(),
                nearest: rows.map(|r| batch.target[fwd[r].0]).collect(),
                pulls: Vec::new(),
                matched: Vec::new(),
                totals,
            }
        })
        .collect();
    for (j, &(src, _)) in bwd.iter().enumerate() {
        chunks[src / chunk_size]
            .pulls
            .push((src % chunk_size, batch.target[j]));
    }
    for &(row, pos, normal, conf) in &batch.matched {
        chunks[row / chunk_size]
            .matched
            .push((row % chunk_size, pos, normal, conf));
    }
    Ok((chunks, warnings))
}

/// Differentiable `T`-step rollout of one chunk and its share of all six
/// terms.
///
/// The total only contains terms with a nonzero weight, so a zero weight
/// removes its term from the gradient entirely.
pub fn build_chunk_losses(
    tape: &mut Tape,
    vars: &FieldVars,
    params: &VelocityFieldParams,
    chunk: &LossChunk,
    settings: &LossSettings,
) -> Result<LossNodes> {
    let n = chunk.points.len();
    let (n_total, m_total, k_total) = chunk.totals;
    let steps = settings.steps;
    let dt = 1.0 / steps as f64;
    let w = settings.weights;
    let f_scale = if settings.unscaled_f { 1.0 } else { dt };
    // Per-step sums become means over points and steps.
    let per_sample = 1.0 / (n_total * steps) as f64;

    let mut x = tape.constant(points_matrix(&chunk.points));
    let mut normals = tape.constant(points_matrix(&chunk.normals));
    let eye = tape.identity3(n);
    let (mut lv, mut ls, mut ld) = (None, None, None);

    for k in 0..steps {
        let st = vars.stencil(tape, params, x, k as f64 * dt, settings.h);

        let smoothed = tape.scale(st.laplacian, w.alpha);
        let r = tape.sub(st.velocity, smoothed);
        let r2 = tape.square(r);
        let term = tape.sum(r2);
        lv = Some(add_scalar_terms(tape, lv, term));

        let dj = tape.scale(st.jacobian, f_scale);
        let f = tape.add(eye, dj);
        let fv = tape.value(f);
        for r in 0..n {
            let det = det3_row(&mat3_row(fv, r));
            if !(det > crate::deformation::MIN_DETERMINANT) {
                return Err(Error::SingularDeformation { point: r, det });
            }
        }

        let ft = tape.mat3_t(f);
        let ftf = tape.mat3_mul(ft, f);
        let strain = tape.sub(ftf, eye);
        let nn = tape.outer3(normals, normals);
        let proj = tape.sub(eye, nn);
        let sp = tape.mat3_mul(strain, proj);
        let psp = tape.mat3_mul(proj, sp);
        let sq = tape.square(psp);
        let fro = tape.sum_cols(sq);
        let fro = tape.sqrt(fro);
        let term = tape.sum(fro);
        ls = Some(add_scalar_terms(tape, ls, term));

        let jt = tape.mat3_t(st.jacobian);
        let sym = tape.add(st.jacobian, jt);
        let dmat = tape.scale(sym, 0.5);
        let tr = tape.trace3(dmat);
        let tr2 = tape.square(tr);
        let tr2 = tape.scale(tr2, 1.0 / 6.0);
        let dd = tape.mat3_mul(dmat, dmat);
        let trdd = tape.trace3(dd);
        let trdd = match settings.distortion {
            DistortionForm::Deviatoric => trdd,
            DistortionForm::Literal => tape.square(trdd),
        };
        let trdd = tape.scale(trdd, 0.5);
        let diff = tape.sub(tr2, trdd);
        let diff = tape.abs(diff);
        let term = tape.sum(diff);
        ld = Some(add_scalar_terms(tape, ld, term));

        let cof = tape.cofactor3(f);
        let moved = tape.mat3_vec(cof, normals);
        normals = tape.normalize_rows(moved);

        let step = tape.scale(st.velocity, dt);
        x = tape.add(x, step);
    }
    let lv = tape.scale(lv.expect("steps >= 1"), per_sample);
    let ls = tape.scale(ls.expect("steps >= 1"), per_sample);
    let ld = tape.scale(ld.expect("steps >= 1"), per_sample);

    // Chamfer with nearest neighbors fixed at their planned assignment.
    let nearest = tape.constant(points_matrix(&chunk.nearest));
    let d1 = tape.sub(x, nearest);
    let d1 = tape.square(d1);
    let t1 = tape.sum(d1);
    let mut lo = tape.scale(t1, 1.0 / n_total as f64);
    if !chunk.pulls.is_empty() {
        let pulled = tape.gather(x, chunk.pulls.iter().map(|p| p.0).collect());
        let targets = tape.constant(DMatrix::from_fn(chunk.pulls.len(), 3, |r, c| {
            chunk.pulls[r].1[c]
        }));
        let d2 = tape.sub(pulled, targets);
        let d2 = tape.square(d2);
        let t2 = tape.sum(d2);
        let t2 = tape.scale(t2, 1.0 / m_total as f64);
        lo = tape.add(lo, t2);
    }

    let (ln, lm) = if chunk.matched.is_empty() {
        (tape.scalar_constant(0.0), tape.scalar_constant(0.0))
    } else {
        let matched = &chunk.matched;
        let rows: Vec<usize> = matched.iter().map(|m| m.0).collect();
        let count = rows.len();
        let tn = tape.constant(DMatrix::from_fn(count, 3, |r, c| matched[r].2[c]));
        let tp = tape.constant(DMatrix::from_fn(count, 3, |r, c| matched[r].1[c]));
        let conf = tape.constant(DMatrix::from_fn(count, 1, |r, _| matched[r].3));

        let gn = tape.gather(normals, rows.clone());
        let dn = tape.sub(gn, tn);
        let dn = tape.row_norms(dn);
        let ln = tape.sum(dn);
        let ln = tape.scale(ln, 1.0 / k_total as f64);

        let gp = tape.gather(x, rows);
        let dp = tape.sub(gp, tp);
        let dp = tape.square(dp);
        let dp = tape.sum_cols(dp);
        let dp = tape.mul(dp, conf);
        let lm = tape.sum(dp);
        let lm = tape.scale(lm, 1.0 / k_total as f64);
        (ln, lm)
    };

    let mut total = None;
    for (lambda, term) in [
        (w.lambda_v, lv),
        (w.lambda_o, lo),
        (w.lambda_n, ln),
        (w.lambda_s, ls),
        (w.lambda_m, lm),
        (w.lambda_d, ld),
    ] {
        if lambda != 0.0 {
            let weighted = tape.scale(term, lambda);
            total = Some(add_scalar_terms(tape, total, weighted));
        }
    }
    let total = total.unwrap_or_else(|| tape.scalar_constant(0.0));
    Ok(LossNodes {
        v: lv,
        o: lo,
        n: ln,
        s: ls,
        m: lm,
        d: ld,
        total,
    })
}

/// All six terms of a whole batch on one tape.
pub fn build_losses(
    tape: &mut Tape,
    vars: &FieldVars,
    params: &VelocityFieldParams,
    batch: &Batch,
    settings: &LossSettings,
) -> Result<(LossNodes, Vec<Warning>)> {
    let (chunks, warnings) = plan_chunks(params, batch, settings, batch.points.len().max(1))?;
    let nodes = build_chunk_losses(tape, vars, params, &chunks[0], settings)?;
    Ok((nodes, warnings))
}
