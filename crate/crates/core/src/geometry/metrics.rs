use rayon::prelude::*;

use super::{neumaier_sum, KdTree, Mesh, Vec3};
use crate::error::{Error, Result};

/// Squared distance from every query point to its nearest neighbor in `tree`,
/// in query order.
pub(crate) fn nearest_sq_distances(queries: &[Vec3], tree: &KdTree<'_>) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| tree.nearest(q).expect("tree is nonempty"))
        .collect()
}

fn check_nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    Ok(())
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance from
/// `a` to `b` plus the same from `b` to `a`.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_nonempty(a, b)?;
    let (ta, tb) = (KdTree::build(a), KdTree::build(b));
    let ab = neumaier_sum(nearest_sq_distances(a, &tb).into_iter().map(|(_, d)| d));
    let ba = neumaier_sum(nearest_sq_distances(b, &ta).into_iter().map(|(_, d)| d));
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

/// Symmetric Hausdorff distance (unsquared).
pub fn hausdorff_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_nonempty(a, b)?;
    let (ta, tb) = (KdTree::build(a), KdTree::build(b));
    let directed = |q: &[Vec3], t: &KdTree<'_>| {
        nearest_sq_distances(q, t)
            .into_iter()
            .map(|(_, d)| d)
            .fold(0.0f64, f64::max)
    };
    Ok(directed(a, &tb).max(directed(b, &ta)).sqrt())
}

/// Population standard deviation of per-frame surface areas.
pub fn sequence_area_std(areas: &[f64]) -> Result<f64> {
    if areas.is_empty() {
        return Err(Error::Empty("area sequence"));
    }
    let n = areas.len() as f64;
    let mean = neumaier_sum(areas.iter().copied()) / n;
    let var = neumaier_sum(areas.iter().map(|a| (a - mean).powi(2))) / n;
    Ok(var.sqrt())
}

/// Summary scores of a predicted sequence against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceMetrics {
    /// Mean per-frame Chamfer distance.
    pub chamfer: f64,
    /// Mean per-frame Hausdorff distance.
    pub hausdorff: f64,
    /// Standard deviation of the predicted sequence's surface areas.
    pub area_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub chamfer: f64,
    pub hausdorff: f64,
    pub area: f64,
    pub reference_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub frames: Vec<FrameMetrics>,
    pub summary: SequenceMetrics,
    /// Area standard deviation of the reference sequence.
    pub reference_area_std: f64,
}

impl SequenceMetrics {
    /// Scores `predicted` against `reference` frame by frame on vertex sets.
    ///
    /// With `relative`, both area deviations are divided by the frame-0 area
    /// of their own sequence.
    pub fn evaluate(
        predicted: &[Mesh],
        reference: &[Mesh],
        relative: bool,
    ) -> Result<SequenceReport> {
        Self::evaluate_with(predicted, reference, relative, |m| m.vertices.clone())
    }

    /// Like [`evaluate`](Self::evaluate) with a caller-chosen point set per
    /// frame (for example dense surface samples).
    pub fn evaluate_with(
        predicted: &[Mesh],
        reference: &[Mesh],
        relative: bool,
        points: impl Fn(&Mesh) -> Vec<Vec3>,
    ) -> Result<SequenceReport> {
        if predicted.len() != reference.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predicted frames vs {} reference frames",
                predicted.len(),
                reference.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::Empty("frame sequence"));
        }
        let mut frames = Vec::with_capacity(predicted.len());
        for (p, r) in predicted.iter().zip(reference) {
            let (pp, rp) = (points(p), points(r));
            frames.push(FrameMetrics {
                chamfer: chamfer_distance(&pp, &rp)?,
                hausdorff: hausdorff_distance(&pp, &rp)?,
                area: p.surface_area(),
                reference_area: r.surface_area(),
            });
        }
        let n = frames.len() as f64;
        let areas: Vec<f64> = frames.iter().map(|f| f.area).collect();
        let ref_areas: Vec<f64> = frames.iter().map(|f| f.reference_area).collect();
        let mut area_std = sequence_area_std(&areas)?;
        let mut reference_area_std = sequence_area_std(&ref_areas)?;
        if relative {
            area_std /= areas[0];
            reference_area_std /= ref_areas[0];
        }
        let summary = SequenceMetrics {
            chamfer: neumaier_sum(frames.iter().map(|f| f.chamfer)) / n,
            hausdorff: neumaier_sum(frames.iter().map(|f| f.hausdorff)) / n,
            area_std,
        };
        Ok(SequenceReport {
            frames,
            summary,
            reference_area_std,
        })
    }
}
