//! Point-set distances (Chamfer, Hausdorff, Earth Mover's) and the
//! retention rate of observed voxels.

mod emd;
mod nearest;
mod report;

pub use emd::{auction, hungarian};
pub use report::{category_table, markdown_table, write_csv, MetricRow, TableEntry};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::voxel::{voxel_to_pointcloud, PointCloud, VoxelGrid};

/// Clouds at or below this size use exhaustive nearest-neighbor search.
pub const BRUTE_FORCE_LIMIT: usize = 4096;
/// Largest cardinality solved exactly by the Hungarian method.
pub const EXACT_EMD_LIMIT: usize = 512;
/// Mean-cost tolerance of the auction solver used above the exact limit.
pub const AUCTION_EPSILON: Real = 1e-5;

fn nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(format!(
            "point clouds must be nonempty (sizes {} and {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn nearest(queries: &[[Real; 3]], targets: &[[Real; 3]]) -> Vec<Real> {
    if queries.len() <= BRUTE_FORCE_LIMIT && targets.len() <= BRUTE_FORCE_LIMIT {
        nearest::nearest_brute(queries, targets)
    } else {
        nearest::nearest_accelerated(queries, targets)
    }
}

fn mean(v: &[Real]) -> Real {
    v.iter().sum::<Real>() / v.len() as Real
}

/// Sum of the two directed mean squared nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<Real> {
    nonempty(a, b)?;
    Ok(mean(&nearest(&a.points, &b.points)) + mean(&nearest(&b.points, &a.points)))
}

/// Chamfer distance forcing the bucket-grid search regardless of size.
pub fn chamfer_accelerated(a: &PointCloud, b: &PointCloud) -> Result<Real> {
    nonempty(a, b)?;
    Ok(mean(&nearest::nearest_accelerated(&a.points, &b.points))
        + mean(&nearest::nearest_accelerated(&b.points, &a.points)))
}

/// Symmetric Hausdorff distance (unsquared).
pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<Real> {
    nonempty(a, b)?;
    let ab = nearest(&a.points, &b.points).into_iter().fold(0.0, Real::max);
    let ba = nearest(&b.points, &a.points).into_iter().fold(0.0, Real::max);
    Ok(ab.max(ba).sqrt())
}

/// Earth Mover's distance with the matching that realizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmdSolution {
    pub cost: Real,
    pub assignment: Vec<usize>,
    /// Zero for the exact solver, otherwise the auction's mean-cost bound.
    pub epsilon: Real,
}

/// Mean matched Euclidean distance over the optimal bijection.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<Real> {
    Ok(emd_solution(a, b)?.cost)
}

pub fn emd_solution(a: &PointCloud, b: &PointCloud) -> Result<EmdSolution> {
    let m = a.len();
    if m == 0 || b.len() != m {
        return Err(Error::invalid(format!(
            "EMD needs two nonempty clouds of equal size, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let cost = emd::cost_matrix(&a.points, &b.points);
    let (assignment, epsilon) = if m <= EXACT_EMD_LIMIT {
        (hungarian(&cost, m), 0.0)
    } else {
        (auction(&cost, m, AUCTION_EPSILON), AUCTION_EPSILON)
    };
    let total: Real = assignment.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum();
    Ok(EmdSolution {
        cost: total / m as Real,
        assignment,
        epsilon,
    })
}

/// Percent of occupied `x_p` cells still occupied in `x̃` binarized at
/// `threshold`; 100 when `x_p` is empty.
pub fn prr(x_p: &VoxelGrid, x_tilde: &VoxelGrid, threshold: Real) -> Result<Real> {
    if x_p.resolution() != x_tilde.resolution() {
        return Err(Error::ShapeMismatch {
            lhs: vec![x_p.resolution(); 3],
            rhs: vec![x_tilde.resolution(); 3],
            context: "prr",
        });
    }
    let observed = x_p.occupied(0.5);
    if observed.is_empty() {
        return Ok(100.0);
    }
    let kept = observed
        .iter()
        .filter(|&&i| x_tilde.is_occupied(i, threshold))
        .count();
    Ok(100.0 * kept as Real / observed.len() as Real)
}

/// Raw (unscaled) metric values for one shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: Real,
    pub hd: Real,
    pub emd: Real,
    pub prr: Option<Real>,
}

impl MetricReport {
    pub const CD_SCALE: Real = 1e2;
    pub const HD_SCALE: Real = 1e3;
    pub const EMD_SCALE: Real = 10.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub points: usize,
    pub threshold: Real,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            points: 1024,
            threshold: 0.5,
            seed: 0,
        }
    }
}

/// Samples a cloud from `grid`; an output with nothing above the threshold
/// falls back to its single most occupied cell.
pub fn sample_cloud(grid: &VoxelGrid, settings: &EvalSettings) -> Result<PointCloud> {
    if grid.occupied_count(settings.threshold) > 0 {
        return voxel_to_pointcloud(grid, settings.points, settings.threshold, settings.seed);
    }
    let best = grid
        .values()
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > grid.values()[b] { i } else { b });
    let mut single = VoxelGrid::zeros(grid.resolution());
    single.set_index(best, 1.0);
    voxel_to_pointcloud(&single, settings.points, 0.5, settings.seed)
}

/// Compares a prediction against ground truth; PRR is reported when the
/// partial input is given.
pub fn evaluate(
    truth: &VoxelGrid,
    prediction: &VoxelGrid,
    partial: Option<&VoxelGrid>,
    settings: &EvalSettings,
) -> Result<MetricReport> {
    let a = sample_cloud(truth, settings)?;
    let b = sample_cloud(prediction, settings)?;
    Ok(MetricReport {
        cd: chamfer(&a, &b)?,
        hd: hausdorff(&a, &b)?,
        emd: emd(&a, &b)?,
        prr: partial.map(|p| prr(p, prediction, settings.threshold)).transpose()?,
    })
}

#[cfg(test)]
mod tests;
