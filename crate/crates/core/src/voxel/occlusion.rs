use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{VoxelGrid, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionMode {
    /// Uniformly random occupied cells.
    RandomCells,
    /// Occupied cells beyond a plane with a random normal.
    HalfSpace,
    /// Occupied cells nearest to a random occupied center.
    SphericalBlob,
}

impl OcclusionMode {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionMode::RandomCells => "random-cells",
            OcclusionMode::HalfSpace => "half-space",
            OcclusionMode::SphericalBlob => "spherical-blob",
        }
    }
}

/// Binary mask over all cells: 1 = observed, 0 = removed.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    pub resolution: usize,
    pub values: Vec<u8>,
    pub seed: u64,
}

impl OcclusionMask {
    pub fn all_observed(resolution: usize) -> Self {
        Self {
            resolution,
            values: vec![1; resolution.pow(3)],
            seed: 0,
        }
    }

    pub fn to_grid(&self) -> VoxelGrid {
        let vals = self.values.iter().map(|&v| v as Real).collect();
        VoxelGrid::from_values(self.resolution, vals).expect("binary mask")
    }

    pub fn removed(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

/// Removes `⌊ratio · |occupied(x)|⌋` occupied cells of `x` (binarized at
/// 0.5). Returns the partial grid `x ⊙ mask` and the mask.
pub fn apply_occlusion(
    x: &VoxelGrid,
    ratio: Real,
    mode: OcclusionMode,
    seed: u64,
) -> Result<(VoxelGrid, OcclusionMask)> {
    if !(ratio > 0.0 && ratio <= 0.95) {
        return Err(Error::invalid(format!("occlusion ratio {ratio} outside (0, 0.95]")));
    }
    let x = x.binarize(DEFAULT_THRESHOLD);
    let occupied = x.occupied(DEFAULT_THRESHOLD);
    if occupied.is_empty() {
        return Err(Error::invalid("cannot occlude an empty grid"));
    }
    let n_remove = (ratio * occupied.len() as Real).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let removed: Vec<usize> = match mode {
        OcclusionMode::RandomCells => {
            let mut cells = occupied.clone();
            cells.partial_shuffle(&mut rng, n_remove);
            cells.truncate(n_remove);
            cells
        }
        OcclusionMode::HalfSpace => {
            let normal = random_unit(&mut rng);
            let mut ranked: Vec<(Real, usize)> = occupied
                .iter()
                .map(|&i| {
                    let c = x.coords(i);
                    ((0..3).map(|a| c[a] as Real * normal[a]).sum(), i)
                })
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.into_iter().take(n_remove).map(|(_, i)| i).collect()
        }
        OcclusionMode::SphericalBlob => {
            let center = x.coords(occupied[rng.random_range(0..occupied.len())]);
            let mut ranked: Vec<(Real, usize)> = occupied
                .iter()
                .map(|&i| {
                    let c = x.coords(i);
                    let d: Real = (0..3).map(|a| (c[a] as Real - center[a] as Real).powi(2)).sum();
                    (d, i)
                })
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ranked.into_iter().take(n_remove).map(|(_, i)| i).collect()
        }
    };

    let mut mask = OcclusionMask::all_observed(x.resolution());
    mask.seed = seed;
    for &i in &removed {
        mask.values[i] = 0;
    }
    let partial = x.hadamard(&mask.to_grid())?;
    Ok((partial, mask))
}

fn random_unit<R: Rng>(rng: &mut R) -> [Real; 3] {
    loop {
        let v = [0; 3].map(|_| 2.0 * rng.random::<f64>() as Real - 1.0);
        let n = v.iter().map(|a| a * a).sum::<Real>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|a| a / n);
        }
    }
}
