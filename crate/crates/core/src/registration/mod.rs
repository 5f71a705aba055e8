//! Sparse correspondences between two meshes from per-vertex features.
//!
//! The pipeline is: cosine similarity of feature rows, per-row argmax in both
//! directions, spectral refinement of both maps, then a round-trip
//! (loop-closure) check. Pairs whose round trip lands within `delta_d` of the
//! start are kept and weighted by how close they came back.

mod files;
mod zoomout;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};
use crate::spectral::{mesh_basis, SpectralBasis, DEFAULT_BASIS_SIZE};
use crate::warning::{emit, Warning};

pub use files::{read_correspondences, read_features, write_correspondences, write_features};
pub use zoomout::{functional_map_refine, ZoomOutSchedule};

/// Above this many similarity entries rows are streamed instead of
/// materializing the full matrix.
pub const DENSE_SIMILARITY_LIMIT: usize = 40_000_000;

/// Fraction of the source bounding-box diagonal used when no explicit
/// loop-closure threshold is configured.
pub const DEFAULT_DELTA_FRACTION: f64 = 0.05;

/// Point-to-point map from every vertex of one mesh to a vertex of another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct P2PMap {
    pub targets: Vec<usize>,
    /// `(source mesh id, target mesh id)`.
    pub direction: (u32, u32),
    pub target_count: usize,
}

impl P2PMap {
    pub fn new(targets: Vec<usize>, direction: (u32, u32), target_count: usize) -> Result<Self> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= target_count) {
            return Err(Error::InvalidArgument(format!(
                "map target {bad} out of range for {target_count} vertices"
            )));
        }
        Ok(P2PMap {
            targets,
            direction,
            target_count,
        })
    }

    pub fn identity(n: usize, direction: (u32, u32)) -> Self {
        P2PMap {
            targets: (0..n).collect(),
            direction,
            target_count: n,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Filtered matches from source vertices to target vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// `(source vertex, target vertex)`, at most one pair per source.
    pub pairs: Vec<(usize, usize)>,
    /// Round-trip distance of each pair, always `< delta_d`.
    pub loop_distance: Vec<f64>,
    /// Per-pair weight in `[0, 1]`.
    pub confidence: Vec<f64>,
    pub delta_d: f64,
    pub source_vertex_count: usize,
}

impl CorrespondenceSet {
    pub fn empty(delta_d: f64, source_vertex_count: usize) -> Self {
        CorrespondenceSet {
            pairs: Vec::new(),
            loop_distance: Vec::new(),
            confidence: Vec::new(),
            delta_d,
            source_vertex_count,
        }
    }

    /// Vertex `i` to vertex `i` for every source vertex, confidence 1.
    pub fn identity(n: usize, delta_d: f64) -> Self {
        CorrespondenceSet {
            pairs: (0..n).map(|i| (i, i)).collect(),
            loop_distance: vec![0.0; n],
            confidence: vec![1.0; n],
            delta_d,
            source_vertex_count: n,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn retention(&self) -> f64 {
        if self.source_vertex_count == 0 {
            return 0.0;
        }
        self.pairs.len() as f64 / self.source_vertex_count as f64
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidence.is_empty() {
            return 0.0;
        }
        self.confidence.iter().sum::<f64>() / self.confidence.len() as f64
    }

    /// Drops pairs with loop distance at or above `delta_d` and recomputes
    /// confidences against the new threshold.
    pub fn refiltered(&self, delta_d: f64) -> CorrespondenceSet {
        let keep: Vec<usize> = (0..self.pairs.len())
            .filter(|&k| self.loop_distance[k] < delta_d)
            .collect();
        let loop_distance: Vec<f64> = keep.iter().map(|&k| self.loop_distance[k]).collect();
        CorrespondenceSet {
            pairs: keep.iter().map(|&k| self.pairs[k]).collect(),
            confidence: confidence_map(&loop_distance, delta_d),
            loop_distance,
            delta_d,
            source_vertex_count: self.source_vertex_count,
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.pairs.len();
        if self.loop_distance.len() != n || self.confidence.len() != n {
            return Err(Error::DimensionMismatch(
                "correspondence columns differ in length".into(),
            ));
        }
        let mut seen = vec![false; self.source_vertex_count];
        for (k, &(s, _)) in self.pairs.iter().enumerate() {
            if s >= self.source_vertex_count || seen[s] {
                return Err(Error::InvalidArgument(format!(
                    "pair {k}: bad or repeated source {s}"
                )));
            }
            seen[s] = true;
            if !(self.loop_distance[k] >= 0.0 && self.loop_distance[k] < self.delta_d) {
                return Err(Error::InvalidArgument(format!(
                    "pair {k}: loop distance out of range"
                )));
            }
            if !(0.0..=1.0).contains(&self.confidence[k]) {
                return Err(Error::InvalidArgument(format!(
                    "pair {k}: confidence out of range"
                )));
            }
        }
        Ok(())
    }
}

fn normalized_rows(feat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = feat.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

fn check_dims(feat_i: &DMatrix<f64>, feat_j: &DMatrix<f64>) -> Result<()> {
    if feat_i.ncols() != feat_j.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "feature dimensions {} and {}",
            feat_i.ncols(),
            feat_j.ncols()
        )));
    }
    Ok(())
}

/// Cosine similarity between every row of `feat_i` and every row of
/// `feat_j`. Zero rows are similar to nothing (cosine 0).
pub fn similarity_matrix(feat_i: &DMatrix<f64>, feat_j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(feat_i, feat_j)?;
    Ok(normalized_rows(feat_i) * normalized_rows(feat_j).transpose())
}

fn row_argmax<'a>(row: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, &v) in row.enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Row-wise argmax of a similarity matrix; ties go to the smallest column.
pub fn initial_p2p(sim: &DMatrix<f64>, direction: (u32, u32)) -> P2PMap {
    let targets = (0..sim.nrows())
        .map(|r| row_argmax(sim.row(r).iter()))
        .collect();
    P2PMap {
        targets,
        direction,
        target_count: sim.ncols(),
    }
}

/// Same result as `initial_p2p(similarity_matrix(..))`, computing the
/// similarity in row blocks when the full matrix would be too large.
pub fn initial_p2p_from_features(
    feat_i: &DMatrix<f64>,
    feat_j: &DMatrix<f64>,
    direction: (u32, u32),
) -> Result<P2PMap> {
    check_dims(feat_i, feat_j)?;
    let (vi, vj) = (feat_i.nrows(), feat_j.nrows());
    if vi.saturating_mul(vj) <= DENSE_SIMILARITY_LIMIT {
        return Ok(initial_p2p(&similarity_matrix(feat_i, feat_j)?, direction));
    }
    let rows_per_block = (DENSE_SIMILARITY_LIMIT / 8 / vj.max(1)).max(1);
    Ok(streamed_p2p(feat_i, feat_j, direction, rows_per_block))
}

fn streamed_p2p(
    feat_i: &DMatrix<f64>,
    feat_j: &DMatrix<f64>,
    direction: (u32, u32),
    rows_per_block: usize,
) -> P2PMap {
    let (vi, vj) = (feat_i.nrows(), feat_j.nrows());
    let ni = normalized_rows(feat_i);
    let nj_t = normalized_rows(feat_j).transpose();
    let starts: Vec<usize> = (0..vi).step_by(rows_per_block).collect();
    let blocks: Vec<Vec<usize>> = starts
        .par_iter()
        .map(|&start| {
            let len = rows_per_block.min(vi - start);
            let sim = ni.rows(start, len) * &nj_t;
            (0..len).map(|r| row_argmax(sim.row(r).iter())).collect()
        })
        .collect();
    P2PMap {
        targets: blocks.concat(),
        direction,
        target_count: vj,
    }
}

/// Round-trip distances of a pair of opposite maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosure {
    /// Source vertices with round-trip distance `< delta_d`, ascending.
    pub retained: Vec<usize>,
    /// Distance of each retained vertex.
    pub distances: Vec<f64>,
    /// Distance of every source vertex.
    pub all_distances: Vec<f64>,
}

/// `D_i = |x_i - x[map_ji[map_ij[i]]]|`; retains exactly `{i : D_i < delta_d}`.
pub fn loop_closure_filter(
    map_ij: &P2PMap,
    map_ji: &P2PMap,
    verts_i: &[Vec3],
    delta_d: f64,
) -> Result<LoopClosure> {
    if map_ij.direction.0 != map_ji.direction.1 || map_ij.direction.1 != map_ji.direction.0 {
        return Err(Error::DirectionMismatch(format!(
            "{:?} is not the reverse of {:?}",
            map_ji.direction, map_ij.direction
        )));
    }
    if map_ij.len() != verts_i.len()
        || map_ji.target_count != verts_i.len()
        || map_ij.target_count != map_ji.len()
    {
        return Err(Error::DirectionMismatch("map sizes do not chain".into()));
    }
    if !(delta_d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta_d must be positive, got {delta_d}"
        )));
    }
    let all_distances: Vec<f64> = verts_i
        .par_iter()
        .enumerate()
        .map(|(i, x)| (x - verts_i[map_ji.targets[map_ij.targets[i]]]).norm())
        .collect();
    let retained: Vec<usize> = (0..verts_i.len())
        .filter(|&i| all_distances[i] < delta_d)
        .collect();
    let distances = retained.iter().map(|&i| all_distances[i]).collect();
    Ok(LoopClosure {
        retained,
        distances,
        all_distances,
    })
}

/// `C_i = (delta_d - D_i) / max(D)` over the retained set, clamped to
/// `[0, 1]`; all ones when every distance is zero.
pub fn confidence_map(distances: &[f64], delta_d: f64) -> Vec<f64> {
    let max_d = distances.iter().copied().fold(0.0f64, f64::max);
    if max_d <= 0.0 {
        return vec![1.0; distances.len()];
    }
    distances
        .iter()
        .map(|d| ((delta_d - d) / max_d).clamp(0.0, 1.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub basis_size: usize,
    pub schedule: ZoomOutSchedule,
    /// Loop-closure threshold in model units; `None` uses
    /// [`DEFAULT_DELTA_FRACTION`] of the source bounding-box diagonal.
    pub delta_d: Option<f64>,
    /// Skip the spectral refinement and filter the raw argmax maps.
    pub refine: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            basis_size: DEFAULT_BASIS_SIZE,
            schedule: ZoomOutSchedule::default(),
            delta_d: None,
            refine: true,
        }
    }
}

impl RegistrationConfig {
    pub fn delta_for(&self, source: &Mesh) -> f64 {
        self.delta_d
            .unwrap_or_else(|| DEFAULT_DELTA_FRACTION * source.bounding_box().diagonal())
    }
}

/// Output of [`register`]: the filtered set plus the intermediate maps.
#[derive(Debug, Clone)]
pub struct Registration {
    pub correspondences: CorrespondenceSet,
    /// Refined source-to-target map.
    pub map_ij: P2PMap,
    /// Refined target-to-source map.
    pub map_ji: P2PMap,
    pub warnings: Vec<Warning>,
}

/// Both directional maps before filtering: argmax of feature similarity,
/// optionally refined spectrally.
pub fn bidirectional_maps(
    basis_i: &SpectralBasis,
    basis_j: &SpectralBasis,
    feat_i: &DMatrix<f64>,
    feat_j: &DMatrix<f64>,
    config: &RegistrationConfig,
) -> Result<(P2PMap, P2PMap)> {
    let mut map_ij = initial_p2p_from_features(feat_i, feat_j, (0, 1))?;
    let mut map_ji = initial_p2p_from_features(feat_j, feat_i, (1, 0))?;
    if config.refine {
        let available = basis_i.len().min(basis_j.len());
        let schedule = config.schedule.clamped(available);
        map_ij = functional_map_refine(basis_i, basis_j, &map_ij, &schedule)?;
        map_ji = functional_map_refine(basis_j, basis_i, &map_ji, &schedule)?;
    }
    Ok((map_ij, map_ji))
}

/// Full registration of `mesh_i` onto `mesh_j` with the given features.
pub fn register(
    mesh_i: &Mesh,
    mesh_j: &Mesh,
    feat_i: &DMatrix<f64>,
    feat_j: &DMatrix<f64>,
    config: &RegistrationConfig,
) -> Result<Registration> {
    let basis_i = mesh_basis(mesh_i, config.basis_size)?;
    let basis_j = mesh_basis(mesh_j, config.basis_size)?;
    register_with_bases(mesh_i, mesh_j, &basis_i, &basis_j, feat_i, feat_j, config)
}

/// [`register`] with precomputed spectral bases.
pub fn register_with_bases(
    mesh_i: &Mesh,
    mesh_j: &Mesh,
    basis_i: &SpectralBasis,
    basis_j: &SpectralBasis,
    feat_i: &DMatrix<f64>,
    feat_j: &DMatrix<f64>,
    config: &RegistrationConfig,
) -> Result<Registration> {
    check_dims(feat_i, feat_j)?;
    if feat_i.nrows() != mesh_i.vertex_count() || feat_j.nrows() != mesh_j.vertex_count() {
        return Err(Error::DimensionMismatch(
            "feature rows must match vertex counts".into(),
        ));
    }
    let delta_d = config.delta_for(mesh_i);
    let n = mesh_i.vertex_count();
    let mut warnings = Vec::new();

    let zero_i: Vec<bool> = feat_i
        .row_iter()
        .map(|r| r.iter().all(|&x| x == 0.0))
        .collect();
    let zero_j_all = feat_j.iter().all(|&x| x == 0.0);
    if zero_i.iter().all(|&z| z) || zero_j_all {
        warnings.push(emit(Warning::EmptyCorrespondences));
        return Ok(Registration {
            correspondences: CorrespondenceSet::empty(delta_d, n),
            map_ij: P2PMap::new(vec![0; n], (0, 1), mesh_j.vertex_count().max(1))?,
            map_ji: P2PMap::new(vec![0; mesh_j.vertex_count()], (1, 0), n.max(1))?,
            warnings,
        });
    }
    let zero_count = zero_i.iter().filter(|&&z| z).count();
    if zero_count > 0 {
        warnings.push(emit(Warning::ZeroFeatureRows { count: zero_count }));
    }

    let (map_ij, map_ji) = bidirectional_maps(basis_i, basis_j, feat_i, feat_j, config)?;
    let closure = loop_closure_filter(&map_ij, &map_ji, &mesh_i.vertices, delta_d)?;
    let mut pairs = Vec::new();
    let mut loop_distance = Vec::new();
    for (&i, &d) in closure.retained.iter().zip(&closure.distances) {
        if !zero_i[i] {
            pairs.push((i, map_ij.targets[i]));
            loop_distance.push(d);
        }
    }
    let confidence = confidence_map(&loop_distance, delta_d);
    let correspondences = CorrespondenceSet {
        pairs,
        loop_distance,
        confidence,
        delta_d,
        source_vertex_count: n,
    };
    if correspondences.is_empty() {
        warnings.push(emit(Warning::EmptyCorrespondences));
    }
    Ok(Registration {
        correspondences,
        map_ij,
        map_ji,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    #[test]
    fn cosine_examples() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let s = similarity_matrix(&a, &b).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(s[(1, 0)], 0.0);
        assert!((s[(0, 1)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(s.row(2).iter().copied().fold(0.0, f64::max), 0.0);
        assert!(similarity_matrix(&a, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn argmax_rules() {
        let eye = DMatrix::<f64>::identity(4, 4);
        assert_eq!(initial_p2p(&eye, (0, 1)).targets, vec![0, 1, 2, 3]);
        let row = DMatrix::from_row_slice(1, 3, &[0.2, 0.9, 0.9]);
        assert_eq!(initial_p2p(&row, (0, 1)).targets, vec![1]);
    }

    #[test]
    fn streamed_argmax_matches_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let fi = DMatrix::from_fn(50, 7, |_, _| rng.random::<f64>() - 0.5);
        let fj = DMatrix::from_fn(40, 7, |_, _| rng.random::<f64>() - 0.5);
        let dense = initial_p2p(&similarity_matrix(&fi, &fj).unwrap(), (0, 1));
        assert_eq!(dense, initial_p2p_from_features(&fi, &fj, (0, 1)).unwrap());
        assert_eq!(dense, streamed_p2p(&fi, &fj, (0, 1), 7));
    }

    #[test]
    fn loop_closure_hand_case() {
        let verts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let ij = P2PMap::identity(3, (0, 1));
        let ji = P2PMap::new(vec![1, 0, 2], (1, 0), 3).unwrap();
        let lc = loop_closure_filter(&ij, &ji, &verts, 0.5).unwrap();
        assert_eq!(lc.all_distances, vec![1.0, 1.0, 0.0]);
        assert_eq!(lc.retained, vec![2]);
        let all = loop_closure_filter(&ij, &ji, &verts, 10.0).unwrap();
        assert_eq!(all.retained, vec![0, 1, 2]);
        assert!(matches!(
            loop_closure_filter(&ij, &ij, &verts, 1.0),
            Err(Error::DirectionMismatch(_))
        ));
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_map(&[0.0, 0.0], 0.1), vec![1.0, 1.0]);
        let c = confidence_map(&[0.02, 0.08], 0.1);
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 0.25).abs() < 1e-12);
        let c = confidence_map(&[0.01, 0.08], 0.1);
        assert_eq!(c[0], 1.0);
        assert!((c[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_features_give_empty_set() {
        let mesh = shapes::icosphere(1, 1.0);
        let z = DMatrix::zeros(mesh.vertex_count(), 4);
        let reg = register(&mesh, &mesh, &z, &z, &RegistrationConfig::default()).unwrap();
        assert!(reg.correspondences.is_empty());
        assert_eq!(reg.warnings, vec![Warning::EmptyCorrespondences]);
    }
}
