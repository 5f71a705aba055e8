//! Synthetic mesh sequences with analytic ground truth.
//!
//! Every frame is an exact deformation of frame 0, so intermediate frames
//! can be compared against what a trained field produces.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::deformation::write_frames;
use crate::error::{Error, Result};
use crate::geometry::{save_obj, shapes, Mesh, Vec3};
use crate::registration::{
    write_correspondences, write_features, CorrespondenceSet, DEFAULT_DELTA_FRACTION,
};

/// Vertex jitter as a fraction of the mean edge length. Breaks the exact
/// symmetries of the generated shapes, which would otherwise make intrinsic
/// descriptors ambiguous.
pub const JITTER_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Rigid rotation about the z axis.
    Rotation,
    /// Circular-arc bend of the bar in the xy plane, keeping the axis length.
    Bend,
    /// Rotation about the x axis by an angle linear in x.
    Twist,
    Identity,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(SynthKind::Rotation),
            "bend" => Ok(SynthKind::Bend),
            "twist" => Ok(SynthKind::Twist),
            "identity" => Ok(SynthKind::Identity),
            _ => Err(Error::InvalidArgument(format!(
                "unknown synthetic case `{s}` (rotation, bend, twist, identity)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Rotation => "rotation",
            SynthKind::Bend => "bend",
            SynthKind::Twist => "twist",
            SynthKind::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseShape {
    /// The radius 0.25, length 2 capsule along x.
    Capsule,
    /// Radius 0.5 icosphere with three subdivisions.
    Icosphere,
}

impl FromStr for BaseShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capsule" => Ok(BaseShape::Capsule),
            "icosphere" => Ok(BaseShape::Icosphere),
            _ => Err(Error::InvalidArgument(format!(
                "unknown base shape `{s}` (capsule, icosphere)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCase {
    pub kind: SynthKind,
    /// Total angle in radians at the last frame; unused for the identity.
    pub magnitude: f64,
    /// Number of frames including both ends, at least 2.
    pub frames: usize,
    pub seed: u64,
    pub base: BaseShape,
}

impl SynthCase {
    pub fn new(kind: SynthKind, magnitude: f64, frames: usize, seed: u64) -> Self {
        SynthCase {
            kind,
            magnitude,
            frames,
            seed,
            base: BaseShape::Capsule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidArgument(
                "a sequence needs at least 2 frames".into(),
            ));
        }
        if !self.magnitude.is_finite() {
            return Err(Error::InvalidArgument("magnitude must be finite".into()));
        }
        Ok(())
    }
}

/// Jittered base mesh of a case.
pub fn base_mesh(case: &SynthCase) -> Mesh {
    let mesh = match case.base {
        BaseShape::Capsule => shapes::default_capsule(),
        BaseShape::Icosphere => shapes::icosphere(3, 0.5),
    };
    let amount = JITTER_FRACTION * mesh.mean_edge_length();
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let moved = mesh
        .vertices
        .iter()
        .zip(&mesh.vertex_normals)
        .map(|(v, n)| {
            let r = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            // Tangential only, so the surface stays where it was.
            v + (r - n * n.dot(&r)) * amount
        })
        .collect();
    mesh.with_positions(moved).expect("same vertex count")
}

/// Position of `p` under `kind` at fraction `s` of the full deformation.
/// `length` is the extent of the bar along x.
pub fn deform_point(kind: SynthKind, magnitude: f64, s: f64, length: f64, p: &Vec3) -> Vec3 {
    let angle = magnitude * s;
    match kind {
        SynthKind::Identity => *p,
        SynthKind::Rotation => Rotation3::from_axis_angle(&Vector3::z_axis(), angle) * p,
        SynthKind::Twist => {
            Rotation3::from_axis_angle(&Vector3::x_axis(), angle * p.x / length) * p
        }
        SynthKind::Bend => {
            let kappa = angle / length;
            if kappa.abs() < 1e-12 {
                return *p;
            }
            // The x axis wraps onto a circle of radius 1/κ centered at
            // (0, 1/κ); arc length along the axis is preserved.
            let r = 1.0 / kappa;
            let phi = kappa * p.x;
            Vec3::new((r - p.y) * phi.sin(), r - (r - p.y) * phi.cos(), p.z)
        }
    }
}

/// Random Fourier features of the rest (frame 0) positions, `dim` columns.
///
/// Corresponding vertices get identical rows on every frame, the way ideal
/// semantic descriptors would, and cosine similarity falls off with rest
/// distance on a scale of `bandwidth`.
pub fn rest_pose_features(rest: &Mesh, dim: usize, bandwidth: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive bandwidth");
    let freqs: Vec<(Vec3, f64)> = (0..dim)
        .map(|_| {
            let w = Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
            (w, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    DMatrix::from_fn(rest.vertex_count(), dim, |r, c| {
        let (w, b) = &freqs[c];
        (w.dot(&rest.vertices[r]) + b).cos()
    })
}

/// Ground-truth sequence with exact identity correspondences.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub case: SynthCase,
    pub frames: Vec<Mesh>,
    pub correspondences: CorrespondenceSet,
}

impl SynthSequence {
    pub fn source(&self) -> &Mesh {
        &self.frames[0]
    }

    pub fn target(&self) -> &Mesh {
        self.frames.last().expect("at least two frames")
    }

    /// Ground truth at an arbitrary fraction `s` of the sequence.
    pub fn at(&self, s: f64) -> Mesh {
        let base = self.source();
        let length = bar_length(base);
        let moved = base
            .vertices
            .iter()
            .map(|p| deform_point(self.case.kind, self.case.magnitude, s, length, p))
            .collect();
        base.with_positions(moved).expect("same vertex count")
    }
}

fn bar_length(mesh: &Mesh) -> f64 {
    let b = mesh.bounding_box();
    b.max.x - b.min.x
}

pub fn generate(case: &SynthCase) -> Result<SynthSequence> {
    case.validate()?;
    let base = base_mesh(case);
    let n = base.vertex_count();
    let delta = DEFAULT_DELTA_FRACTION * base.bounding_box().diagonal();
    let mut seq = SynthSequence {
        case: *case,
        frames: vec![base],
        correspondences: CorrespondenceSet::identity(n, delta),
    };
    let last = (case.frames - 1) as f64;
    let rest: Vec<Mesh> = (1..case.frames).map(|k| seq.at(k as f64 / last)).collect();
    seq.frames.extend(rest);
    Ok(seq)
}

/// Paths written by [`write_sequence`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Rest-pose features of the source and target, see
    /// [`rest_pose_features`].
    pub source_features: PathBuf,
    pub target_features: PathBuf,
    pub ground_truth: PathBuf,
    pub correspondences: PathBuf,
}

/// Feature columns written by [`write_sequence`].
pub const FEATURE_DIM: usize = 64;

/// Writes `source.obj`, `target.obj`, `correspondences.txt`, rest-pose
/// features `source.vftr` and `target.vftr`, and the frames under `gt/`.
pub fn write_sequence(seq: &SynthSequence, dir: impl AsRef<Path>) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles {
        source: dir.join("source.obj"),
        target: dir.join("target.obj"),
        source_features: dir.join("source.vftr"),
        target_features: dir.join("target.vftr"),
        ground_truth: dir.join("gt"),
        correspondences: dir.join("correspondences.txt"),
    };
    save_obj(seq.source(), &files.source)?;
    save_obj(seq.target(), &files.target)?;
    let bandwidth = 0.1 * seq.source().bounding_box().diagonal();
    let features = rest_pose_features(seq.source(), FEATURE_DIM, bandwidth, seq.case.seed);
    write_features(&files.source_features, &features)?;
    write_features(&files.target_features, &features)?;
    write_frames(&files.ground_truth, &seq.frames)?;
    write_correspondences(&files.correspondences, &seq.correspondences)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn areas(seq: &SynthSequence) -> Vec<f64> {
        seq.frames.iter().map(Mesh::surface_area).collect()
    }

    #[test]
    fn identity_frames_are_equal() {
        let seq = generate(&SynthCase::new(SynthKind::Identity, 1.0, 4, 0)).unwrap();
        assert!(seq
            .frames
            .iter()
            .all(|f| f.vertices == seq.frames[0].vertices));
    }

    #[test]
    fn rotation_keeps_area() {
        let seq = generate(&SynthCase::new(SynthKind::Rotation, 0.5236, 5, 1)).unwrap();
        let a = areas(&seq);
        assert!(a.iter().all(|x| (x - a[0]).abs() < 1e-9 * a[0]));
        let v0 = seq.source().vertices[10];
        let v4 = seq.target().vertices[10];
        assert!((v0.norm() - v4.norm()).abs() < 1e-12);
    }

    #[test]
    fn bend_is_near_isometric() {
        let seq = generate(&SynthCase::new(SynthKind::Bend, 0.5, 5, 2)).unwrap();
        let a = areas(&seq);
        assert!(a.iter().all(|x| (x - a[0]).abs() < 0.02 * a[0]), "{a:?}");
        // The axis keeps its length: the +x pole lands on the arc.
        let len = bar_length(seq.source());
        let tip = deform_point(SynthKind::Bend, 0.5, 1.0, len, &Vec3::new(1.0, 0.0, 0.0));
        let r = len / 0.5;
        assert!(((tip - Vec3::new(0.0, r, 0.0)).norm() - r).abs() < 1e-12);
    }

    #[test]
    fn twist_is_linear_in_x() {
        let p = Vec3::new(0.5, 0.1, 0.0);
        let q = deform_point(SynthKind::Twist, 1.0, 1.0, 2.0, &p);
        assert!((q.z.atan2(q.y) - 0.25).abs() < 1e-12);
        assert_eq!(q.x, 0.5);
    }

    #[test]
    fn jitter_is_seeded() {
        let a = base_mesh(&SynthCase::new(SynthKind::Bend, 0.5, 2, 3));
        let b = base_mesh(&SynthCase::new(SynthKind::Bend, 0.5, 2, 3));
        let c = base_mesh(&SynthCase::new(SynthKind::Bend, 0.5, 2, 4));
        assert_eq!(a.vertices, b.vertices);
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn rejects_single_frame() {
        assert!(generate(&SynthCase::new(SynthKind::Rotation, 1.0, 1, 0)).is_err());
    }

    #[test]
    fn writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&SynthCase::new(SynthKind::Twist, 0.3, 3, 0)).unwrap();
        let files = write_sequence(&seq, dir.path()).unwrap();
        assert!(files.source.exists() && files.target.exists());
        assert!(files.ground_truth.join("frame_0002.obj").exists());
        let corr = crate::registration::read_correspondences(&files.correspondences).unwrap();
        assert_eq!(corr.len(), seq.source().vertex_count());
        assert!(corr.confidence.iter().all(|&c| c == 1.0));
        let f = crate::registration::read_features(&files.source_features).unwrap();
        assert_eq!(f.shape(), (seq.source().vertex_count(), FEATURE_DIM));
    }

    #[test]
    fn rest_features_pick_the_same_vertex() {
        let seq = generate(&SynthCase::new(SynthKind::Bend, 0.5, 2, 0)).unwrap();
        let f = rest_pose_features(seq.source(), FEATURE_DIM, 0.25, 1);
        let sim = crate::registration::similarity_matrix(&f, &f).unwrap();
        for r in (0..f.nrows()).step_by(97) {
            let best = sim
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            assert_eq!(best.0, r);
        }
    }
}
