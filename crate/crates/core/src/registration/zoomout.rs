use nalgebra::DMatrix;
use rayon::prelude::*;

use super::P2PMap;
use crate::error::{Error, Result};
use crate::spectral::SpectralBasis;

/// Growing basis sizes `start, start + step, ..., <= end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZoomOutSchedule {
    pub start: usize,
    pub end: usize,
    pub step: usize,
}

impl Default for ZoomOutSchedule {
    fn default() -> Self {
        ZoomOutSchedule {
            start: 20,
            end: 60,
            step: 5,
        }
    }
}

impl ZoomOutSchedule {
    pub fn sizes(&self) -> impl Iterator<Item = usize> {
        (self.start..=self.end).step_by(self.step.max(1))
    }

    /// Shrinks the schedule to fit `available` basis functions.
    pub fn clamped(&self, available: usize) -> ZoomOutSchedule {
        let end = self.end.min(available).max(1);
        ZoomOutSchedule {
            start: self.start.min(end).max(1),
            end,
            step: self.step,
        }
    }
}

/// Spectral refinement of a point-to-point map.
///
/// At each basis size `k` the current map is converted to a `k x k`
/// functional map `C = Φ_iᵀ M_i Π Φ_j`, and every source vertex is reassigned
/// to the target vertex whose spectral row is nearest to its own row times
/// `C`.
pub fn functional_map_refine(
    basis_i: &SpectralBasis,
    basis_j: &SpectralBasis,
    p2p: &P2PMap,
    schedule: &ZoomOutSchedule,
) -> Result<P2PMap> {
    if schedule.end > basis_i.len() || schedule.end > basis_j.len() || schedule.start == 0 {
        return Err(Error::InvalidArgument(format!(
            "schedule {schedule:?} exceeds basis sizes {} / {}",
            basis_i.len(),
            basis_j.len()
        )));
    }
    if p2p.len() != basis_i.vertex_count() || p2p.target_count != basis_j.vertex_count() {
        return Err(Error::DimensionMismatch(
            "map does not match the bases".into(),
        ));
    }
    let mut targets = p2p.targets.clone();
    for k in schedule.sizes() {
        let phi_i = basis_i.eigenvectors.columns(0, k);
        let phi_j = basis_j.truncated(k);
        let mut weighted = phi_i.into_owned();
        for (r, m) in basis_i.mass.iter().enumerate() {
            weighted.row_mut(r).scale_mut(*m);
        }
        let pulled = DMatrix::from_fn(targets.len(), k, |r, c| phi_j[(targets[r], c)]);
        let c = weighted.transpose() * pulled;
        let queries = basis_i.eigenvectors.columns(0, k) * c;
        targets = nearest_rows(&queries, &phi_j);
    }
    Ok(P2PMap {
        targets,
        direction: p2p.direction,
        target_count: p2p.target_count,
    })
}

/// For every row of `queries`, the index of the closest row of `points`
/// (Euclidean, ties to the smallest index). Blocked through GEMM.
pub(crate) fn nearest_rows(queries: &DMatrix<f64>, points: &DMatrix<f64>) -> Vec<usize> {
    const BLOCK: usize = 512;
    let point_norms: Vec<f64> = points.row_iter().map(|r| r.norm_squared()).collect();
    let points_t = points.transpose();
    let starts: Vec<usize> = (0..queries.nrows()).step_by(BLOCK).collect();
    let blocks: Vec<Vec<usize>> = starts
        .par_iter()
        .map(|&start| {
            let len = BLOCK.min(queries.nrows() - start);
            let q = queries.rows(start, len);
            let dots = q * &points_t;
            (0..len)
                .map(|r| {
                    let mut best = (0usize, f64::INFINITY);
                    for (j, pn) in point_norms.iter().enumerate() {
                        // |q|^2 is constant per row and does not affect the argmin.
                        let d = pn - 2.0 * dots[(r, j)];
                        if d < best.1 {
                            best = (j, d);
                        }
                    }
                    best.0
                })
                .collect()
        })
        .collect();
    blocks.concat()
}
