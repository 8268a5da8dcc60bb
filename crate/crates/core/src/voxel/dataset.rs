use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize_shape, ProceduralShapeSpec, ShapeFamily, VoxelGrid};
use std::path::Path;

use super::{read_vox, write_vox};
use crate::error::{Error, Result};

/// Fraction of shapes assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: usize,
    /// Absent for imported shapes.
    pub spec: Option<ProceduralShapeSpec>,
    pub split: Split,
    pub grid: VoxelGrid,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

/// Per-item seed derived from a base seed (splitmix64 mixing).
pub fn item_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    /// `count` procedural shapes cycling through the families, split 80/20
    /// by a seeded shuffle.
    pub fn synthesize(count: usize, resolution: usize, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5151));
        let n_train = (count as f64 * TRAIN_FRACTION).floor() as usize;
        let mut split = vec![Split::Test; count];
        for &i in &order[..n_train] {
            split[i] = Split::Train;
        }
        let items = (0..count)
            .map(|id| {
                let family = ShapeFamily::ALL[id % ShapeFamily::ALL.len()];
                let spec = ProceduralShapeSpec::sample(family, item_seed(seed, id));
                Ok(DatasetItem {
                    id,
                    spec: Some(spec),
                    split: split[id],
                    grid: synthesize_shape(&spec, resolution)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |it| it.split == which)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// File listing a dataset directory's shapes.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub split: Split,
    #[serde(default)]
    pub spec: Option<ProceduralShapeSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    pub items: Vec<ManifestEntry>,
}

impl Dataset {
    /// Writes one VOX1 file per shape plus `manifest.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, seed: Option<u64>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let resolution = self.items.first().map_or(0, |i| i.grid.resolution());
        let mut items = Vec::with_capacity(self.items.len());
        for it in &self.items {
            let file = format!("shape_{:05}.vox", it.id);
            write_vox(&it.grid, dir.join(&file))?;
            items.push(ManifestEntry {
                id: it.id,
                file,
                split: it.split,
                spec: it.spec,
            });
        }
        let manifest = Manifest { resolution, seed, items };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::write_dir`] or prepared by
    /// hand with the same manifest layout.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.clone()),
            _ => Error::Io(e),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut items = Vec::with_capacity(manifest.items.len());
        for e in manifest.items {
            let grid = read_vox(dir.join(&e.file))?;
            if grid.resolution() != manifest.resolution {
                return Err(Error::Format(format!(
                    "{} has resolution {}, manifest says {}",
                    e.file,
                    grid.resolution(),
                    manifest.resolution
                )));
            }
            items.push(DatasetItem {
                id: e.id,
                spec: e.spec,
                split: e.split,
                grid,
            });
        }
        Ok(Self { items })
    }

    /// `(id, grid)` pairs of one split.
    pub fn grids(&self, which: Split) -> Vec<(String, VoxelGrid)> {
        self.split(which).map(|i| (i.id.to_string(), i.grid.clone())).collect()
    }
}
