//! Voxel grids, procedural shapes, occlusion masking, point sampling and
//! the VOX1 container.

mod dataset;
mod io;
mod occlusion;
mod sample;
mod synth;

pub use dataset::{item_seed, Dataset, DatasetItem, Manifest, ManifestEntry, Split, MANIFEST_FILE};
pub use io::{read_vox, write_vox, VOX_HEADER_LEN, VOX_MAGIC};
pub use occlusion::{apply_occlusion, OcclusionMask, OcclusionMode};
pub use sample::{voxel_to_pointcloud, PointCloud};
pub use synth::{synthesize_shape, ProceduralShapeSpec, ShapeFamily, ShapeParams};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Threshold used wherever a binary occupancy is required.
pub const DEFAULT_THRESHOLD: Real = 0.5;

/// Occupancy field on an `R³` lattice. Cell `(x, y, z)` lives at flat index
/// `x + R·y + R²·z`, which is also the row-major `[z][y][x]` order used by
/// tensors of shape `[.., R, R, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    values: Vec<Real>,
    /// World position of the grid corner.
    pub origin: [Real; 3],
    /// World edge length of the whole grid.
    pub scale: Real,
}

impl VoxelGrid {
    pub fn zeros(resolution: usize) -> Self {
        Self {
            resolution,
            values: vec![0.0; resolution.pow(3)],
            origin: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn filled(resolution: usize, value: Real) -> Self {
        let mut g = Self::zeros(resolution);
        g.values.fill(value);
        g
    }

    /// Values must lie in `[0, 1]`.
    pub fn from_values(resolution: usize, values: Vec<Real>) -> Result<Self> {
        if resolution == 0 || values.len() != resolution.pow(3) {
            return Err(Error::invalid(format!(
                "{} values for resolution {resolution}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("occupancy {v} outside [0, 1]")));
        }
        Ok(Self {
            resolution,
            values,
            origin: [0.0; 3],
            scale: 1.0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let r = self.resolution;
        [i % r, (i / r) % r, i / (r * r)]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Real {
        self.values[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: Real) {
        let i = self.index(x, y, z);
        self.values[i] = v.clamp(0.0, 1.0);
    }

    pub fn set_index(&mut self, i: usize, v: Real) {
        self.values[i] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn is_occupied(&self, i: usize, threshold: Real) -> bool {
        self.values[i] >= threshold
    }

    pub fn binarize(&self, threshold: Real) -> Self {
        let mut g = self.clone();
        g.values
            .iter_mut()
            .for_each(|v| *v = if *v >= threshold { 1.0 } else { 0.0 });
        g
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied(&self, threshold: Real) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.is_occupied(i, threshold)).collect()
    }

    pub fn occupied_count(&self, threshold: Real) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    pub fn cell_size(&self) -> Real {
        self.scale / self.resolution as Real
    }

    /// World-space lower and upper corners of cell `i`.
    pub fn cell_bounds(&self, i: usize) -> ([Real; 3], [Real; 3]) {
        let c = self.coords(i);
        let h = self.cell_size();
        let lo = [0, 1, 2].map(|a| self.origin[a] + c[a] as Real * h);
        (lo, lo.map(|v| v + h))
    }

    /// `[1, 1, R, R, R]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor {
        let r = self.resolution;
        Tensor::new(vec![1, 1, r, r, r], self.values.clone()).expect("cubic grid")
    }

    /// Builds a grid from an `R³`-element slice, clamping into `[0, 1]`.
    pub fn from_slice_clamped(resolution: usize, data: &[Real]) -> Result<Self> {
        Self::from_values(resolution, data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Cellwise product, e.g. applying a mask.
    pub fn hadamard(&self, other: &VoxelGrid) -> Result<Self> {
        if self.resolution != other.resolution {
            return Err(Error::ShapeMismatch {
                lhs: vec![self.resolution; 3],
                rhs: vec![other.resolution; 3],
                context: "voxel product",
            });
        }
        let mut g = self.clone();
        g.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a *= b);
        Ok(g)
    }
}

#[cfg(test)]
mod tests;
