use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{item_seed, VoxelGrid};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[Real; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[Real; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [Real; 3] {
        let n = self.points.len().max(1) as Real;
        let mut c = [0.0; 3];
        for p in &self.points {
            (0..3).for_each(|a| c[a] += p[a]);
        }
        c.map(|v| v / n)
    }
}

impl VoxelGrid {
    /// Occupied cells with at least one unoccupied (or out-of-grid)
    /// 6-neighbor.
    pub fn surface_cells(&self, threshold: Real) -> Vec<usize> {
        let r = self.resolution();
        let occ = |x: isize, y: isize, z: isize| {
            let inside = [x, y, z].iter().all(|&c| c >= 0 && (c as usize) < r);
            inside && self.is_occupied(self.index(x as usize, y as usize, z as usize), threshold)
        };
        (0..self.len())
            .filter(|&i| self.is_occupied(i, threshold))
            .filter(|&i| {
                let [x, y, z] = self.coords(i).map(|c| c as isize);
                [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|(dx, dy, dz)| !occ(x + dx, y + dy, z + dz))
            })
            .collect()
    }
}

/// Samples `n_points` world-space points from surface cells, jittered
/// inside each. Cells are taken in rounds; each round visits every surface
/// cell once in a seeded random order, so cells are drawn uniformly and
/// without replacement when enough exist. Order keys and jitter depend only
/// on `(seed, cell, round)`, so two grids sharing surface cells share the
/// points drawn from them.
pub fn voxel_to_pointcloud(x: &VoxelGrid, n_points: usize, threshold: Real, seed: u64) -> Result<PointCloud> {
    let surface = x.surface_cells(threshold);
    if surface.is_empty() {
        return Err(Error::invalid(format!("no cell at or above threshold {threshold}")));
    }
    let mut points = Vec::with_capacity(n_points);
    let mut round = 0u64;
    while points.len() < n_points {
        let mut keyed: Vec<(u64, usize)> = surface
            .iter()
            .map(|&c| (item_seed(seed ^ round.wrapping_mul(0xD6E8_FEB8_6659_FD93), c), c))
            .collect();
        keyed.sort_unstable();
        for &(key, c) in keyed.iter().take(n_points - points.len()) {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let (lo, hi) = x.cell_bounds(c);
            points.push([0, 1, 2].map(|a| lo[a] + (hi[a] - lo[a]) * rng.random::<f64>() as Real));
        }
        round += 1;
    }
    Ok(PointCloud { points })
}
