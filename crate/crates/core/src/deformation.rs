//! Euler rollouts of a velocity field with deformation gradients and
//! normal transport.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{load_mesh, save_obj, Mesh, PointCloud, Vec3};
use crate::velocity_field::{VelocityField, DEFAULT_FD_STEP};
use crate::warning::{emit, Warning};

/// Smallest determinant accepted when transporting normals.
pub const MIN_DETERMINANT: f64 = 1e-12;

/// Per-step deformation gradient `I + dt ∇V`.
pub fn step_deformation_gradient(jacobian: &Matrix3<f64>, dt: f64) -> Matrix3<f64> {
    Matrix3::identity() + jacobian * dt
}

/// `normalize(F⁻ᵀ n)`, computed through the cofactor matrix.
pub fn transport_normal(n: &Vec3, f: &Matrix3<f64>) -> Result<Vec3> {
    let det = f.determinant();
    if !(det > MIN_DETERMINANT) {
        return Err(Error::SingularDeformation { point: 0, det });
    }
    let cof = Matrix3::from_fn(|i, j| {
        let (i1, i2, j1, j2) = ((i + 1) % 3, (i + 2) % 3, (j + 1) % 3, (j + 2) % 3);
        f[(i1, j1)] * f[(i2, j2)] - f[(i1, j2)] * f[(i2, j1)]
    });
    let m = cof * n;
    let len = m.norm();
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::SingularDeformation { point: 0, det });
    }
    Ok(m / len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    /// Keep every per-step gradient in [`Trajectory::per_step_f`].
    pub keep_per_step_f: bool,
    /// Finite-difference step; `None` uses [`DEFAULT_FD_STEP`] times the
    /// field's length scale.
    pub fd_step: Option<f64>,
    /// Use `F = I + ∇V` instead of `I + dt ∇V`.
    pub unscaled_f: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            keep_per_step_f: false,
            fd_step: None,
            unscaled_f: false,
        }
    }
}

/// States of a cloud at `t = k / T`, `k = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    pub dt: f64,
    /// `T + 1` frames of `N` points.
    pub positions: Vec<Vec<Vec3>>,
    /// Unit normals, same layout as `positions`.
    pub normals: Vec<Vec<Vec3>>,
    /// `F_{T-1} ... F_0` per point.
    pub accumulated_f: Vec<Matrix3<f64>>,
    /// `T` frames of per-point gradients when requested.
    pub per_step_f: Option<Vec<Vec<Matrix3<f64>>>>,
}

impl Trajectory {
    pub fn final_positions(&self) -> &[Vec3] {
        self.positions
            .last()
            .expect("trajectory has at least one frame")
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "step count must be at least 1".into(),
        ));
    }
    Ok(())
}

fn check_finite(points: &[Vec3], step: usize) -> Result<()> {
    if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite(format!(
            "position of point {i} at step {step}"
        )));
    }
    Ok(())
}

/// Forward Euler: `x_{k+1} = x_k + dt V(x_k, k dt)` with `dt = 1 / steps`,
/// gradients `F_k` at `(x_k, k dt)` and stepwise normal transport.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    cloud: &PointCloud,
    steps: usize,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    check_steps(steps)?;
    let dt = 1.0 / steps as f64;
    let h = opts
        .fd_step
        .unwrap_or(DEFAULT_FD_STEP * field.length_scale());
    let n = cloud.len();
    let mut positions = vec![cloud.points.clone()];
    let mut normals = vec![cloud.normals.clone()];
    let mut accumulated = vec![Matrix3::identity(); n];
    let mut per_step = opts.keep_per_step_f.then(Vec::new);
    for k in 0..steps {
        let x = &positions[k];
        let (v, jac) = field.velocity_and_jacobian(x, k as f64 * dt, h)?;
        let scale = if opts.unscaled_f { 1.0 } else { dt };
        let fs: Vec<Matrix3<f64>> = jac
            .iter()
            .map(|j| step_deformation_gradient(j, scale))
            .collect();
        let mut next_normals = Vec::with_capacity(n);
        for (i, (nrm, f)) in normals[k].iter().zip(&fs).enumerate() {
            next_normals.push(transport_normal(nrm, f).map_err(|e| match e {
                Error::SingularDeformation { det, .. } => {
                    Error::SingularDeformation { point: i, det }
                }
                other => other,
            })?);
            accumulated[i] = f * accumulated[i];
        }
        let next: Vec<Vec3> = x.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
        check_finite(&next, k + 1)?;
        positions.push(next);
        normals.push(next_normals);
        if let Some(p) = per_step.as_mut() {
            p.push(fs);
        }
    }
    Ok(Trajectory {
        steps,
        dt,
        positions,
        normals,
        accumulated_f: accumulated,
        per_step_f: per_step,
    })
}

/// [`integrate`] at a different step count than used in training. Warns
/// from `2 * trained_steps` on.
pub fn resample_framerate<F: VelocityField + ?Sized>(
    field: &F,
    cloud: &PointCloud,
    steps: usize,
    trained_steps: usize,
    opts: &IntegrateOptions,
) -> Result<(Trajectory, Vec<Warning>)> {
    let warnings = framerate_warnings(steps, trained_steps);
    Ok((integrate(field, cloud, steps, opts)?, warnings))
}

/// The guidance check used by [`resample_framerate`] on its own.
pub fn framerate_warnings(steps: usize, trained_steps: usize) -> Vec<Warning> {
    if trained_steps > 0 && steps >= 2 * trained_steps {
        vec![emit(Warning::StepsAboveGuidance {
            requested: steps,
            trained: trained_steps,
        })]
    } else {
        Vec::new()
    }
}

/// Positions only; skips the Jacobian stencil, about seven times cheaper
/// than [`integrate`].
pub fn rollout_positions<F: VelocityField + ?Sized>(
    field: &F,
    points: &[Vec3],
    steps: usize,
) -> Result<Vec<Vec<Vec3>>> {
    check_steps(steps)?;
    let dt = 1.0 / steps as f64;
    let mut frames = vec![points.to_vec()];
    for k in 0..steps {
        let x = &frames[k];
        let v = field.velocity(x, k as f64 * dt)?;
        let next: Vec<Vec3> = x.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
        check_finite(&next, k + 1)?;
        frames.push(next);
    }
    Ok(frames)
}

/// `steps + 1` meshes following the vertex rollout. Connectivity, features
/// and colors are carried over unchanged; normals are recomputed per frame.
pub fn deform_mesh<F: VelocityField + ?Sized>(
    field: &F,
    mesh: &Mesh,
    steps: usize,
) -> Result<Vec<Mesh>> {
    rollout_positions(field, &mesh.vertices, steps)?
        .into_iter()
        .map(|p| mesh.with_positions(p))
        .collect()
}

/// `frame_0000.obj`, `frame_0001.obj`, ...
pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:04}.obj")
}

pub fn write_frames(dir: impl AsRef<Path>, frames: &[Mesh]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let p = dir.join(frame_file_name(k));
            save_obj(m, &p)?;
            Ok(p)
        })
        .collect()
}

/// Loads every `.obj` in `dir` in file-name order, which for
/// [`write_frames`] output is frame order.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<Mesh>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(&dir.display().to_string(), "no .obj frames"));
    }
    paths.iter().map(load_mesh).collect()
}

const TRACK_MAGIC: [u8; 4] = *b"VTRK";

/// `VTRK`, `u32` frame count, `u32` point count, then `f32` xyz per point,
/// frame-major.
pub fn write_tracking(path: impl AsRef<Path>, frames: &[Vec<Vec3>]) -> Result<()> {
    let path = path.as_ref();
    let n = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != n) {
        return Err(Error::DimensionMismatch(
            "frames differ in point count".into(),
        ));
    }
    let mut buf = Vec::with_capacity(12 + 12 * n * frames.len());
    buf.extend_from_slice(&TRACK_MAGIC);
    buf.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for p in frames.iter().flatten() {
        for c in p.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tracking(path: impl AsRef<Path>) -> Result<Vec<Vec<Vec3>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            context: ctx,
            expected: 12 - bytes.len(),
        });
    }
    if bytes[..4] != TRACK_MAGIC {
        return Err(Error::BadMagic {
            context: ctx,
            expected: TRACK_MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + 12 * frames * n;
    if bytes.len() < need {
        return Err(Error::Truncated {
            context: ctx,
            expected: need - bytes.len(),
        });
    }
    let vals: Vec<f64> = bytes[12..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(vals
        .chunks_exact(3 * n.max(1))
        .take(frames)
        .map(|f| {
            f.chunks_exact(3)
                .map(|p| Vec3::new(p[0], p[1], p[2]))
                .collect()
        })
        .collect())
}
