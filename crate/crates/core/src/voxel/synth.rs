use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VoxelGrid;
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAX_ATTEMPTS: u64 = 8;
const MIN_FILL: Real = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Box,
    Ellipsoid,
    Cylinder,
    Cross,
    LBracket,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Box,
        ShapeFamily::Ellipsoid,
        ShapeFamily::Cylinder,
        ShapeFamily::Cross,
        ShapeFamily::LBracket,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Box => "box",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cross => "cross",
            ShapeFamily::LBracket => "l-bracket",
        }
    }
}

/// Geometry in normalized grid coordinates (the grid spans `[0, 1]³`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub center: [Real; 3],
    pub half_extents: [Real; 3],
    /// Rotation angles about x, y and z, applied in that order.
    pub rotation: [Real; 3],
    /// Bar thickness for cross and L-bracket shapes.
    pub thickness: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralShapeSpec {
    pub family: ShapeFamily,
    pub params: ShapeParams,
    pub seed: u64,
}

impl ProceduralShapeSpec {
    /// Draws random parameters for `family` from `seed`.
    pub fn sample(family: ShapeFamily, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            family,
            params: draw_params(&mut rng),
            seed,
        }
    }

    /// Axis-aligned, centered shape with explicit half extents.
    pub fn centered(family: ShapeFamily, half_extents: [Real; 3]) -> Self {
        Self {
            family,
            params: ShapeParams {
                center: [0.5; 3],
                half_extents,
                rotation: [0.0; 3],
                thickness: 0.1,
            },
            seed: 0,
        }
    }

    /// Whether the normalized point `p` lies inside the shape.
    pub fn contains(&self, p: [Real; 3]) -> bool {
        let ShapeParams {
            center,
            half_extents: h,
            rotation,
            thickness: t,
        } = self.params;
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let q = inverse_rotate(d, rotation);
        let inside_box = |q: [Real; 3], lo: [Real; 3], hi: [Real; 3]| (0..3).all(|a| q[a] >= lo[a] && q[a] <= hi[a]);
        match self.family {
            ShapeFamily::Box => (0..3).all(|a| q[a].abs() <= h[a]),
            ShapeFamily::Ellipsoid => (0..3).map(|a| (q[a] / h[a]).powi(2)).sum::<Real>() <= 1.0,
            ShapeFamily::Cylinder => {
                (q[0] / h[0]).powi(2) + (q[1] / h[1]).powi(2) <= 1.0 && q[2].abs() <= h[2]
            }
            ShapeFamily::Cross => (0..3).any(|axis| {
                (0..3).all(|a| if a == axis { q[a].abs() <= h[a] } else { q[a].abs() <= t / 2.0 })
            }),
            ShapeFamily::LBracket => {
                let base = inside_box(q, [-h[0], -h[1], -h[2]], [h[0], -h[1] + t, h[2]]);
                let upright = inside_box(q, [-h[0], -h[1], -h[2]], [-h[0] + t, h[1], h[2]]);
                base || upright
            }
        }
    }
}

fn draw_params<R: Rng>(rng: &mut R) -> ShapeParams {
    let mut u = |lo: Real, hi: Real| lo + (hi - lo) * rng.random::<f64>() as Real;
    ShapeParams {
        center: [u(0.42, 0.58), u(0.42, 0.58), u(0.42, 0.58)],
        half_extents: [u(0.18, 0.38), u(0.18, 0.38), u(0.18, 0.38)],
        rotation: [u(-0.4, 0.4), u(-0.4, 0.4), u(0.0, std::f64::consts::PI as Real)],
        thickness: u(0.14, 0.24),
    }
}

fn inverse_rotate(v: [Real; 3], angles: [Real; 3]) -> [Real; 3] {
    // Forward rotation is Rz·Ry·Rx; undo z, then y, then x.
    let rot = |v: [Real; 3], axis: usize, a: Real| {
        let (s, c) = (-a).sin_cos();
        let (i, j) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let mut out = v;
        out[i] = c * v[i] - s * v[j];
        out[j] = s * v[i] + c * v[j];
        out
    };
    let v = rot(v, 2, angles[2]);
    let v = rot(v, 1, angles[1]);
    rot(v, 0, angles[0])
}

fn rasterize(spec: &ProceduralShapeSpec, resolution: usize) -> VoxelGrid {
    let mut grid = VoxelGrid::zeros(resolution);
    let r = resolution as Real;
    for i in 0..grid.len() {
        let [x, y, z] = grid.coords(i);
        let p = [(x as Real + 0.5) / r, (y as Real + 0.5) / r, (z as Real + 0.5) / r];
        if spec.contains(p) {
            grid.set_index(i, 1.0);
        }
    }
    grid
}

/// Rasterizes `spec` at cell centers. Degenerate results (under 1% filled)
/// are resampled from a derived seed up to eight times.
pub fn synthesize_shape(spec: &ProceduralShapeSpec, resolution: usize) -> Result<VoxelGrid> {
    if !(8..=64).contains(&resolution) {
        return Err(Error::invalid(format!("resolution {resolution} outside [8, 64]")));
    }
    let min_cells = (MIN_FILL * resolution.pow(3) as Real).ceil() as usize;
    let mut current = *spec;
    for attempt in 0..=MAX_ATTEMPTS {
        let grid = rasterize(&current, resolution);
        if grid.occupied_count(0.5) >= min_cells.max(1) {
            return Ok(grid);
        }
        if attempt < MAX_ATTEMPTS {
            let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt + 1);
            current = ProceduralShapeSpec::sample(spec.family, seed);
            current.seed = spec.seed;
        }
    }
    Err(Error::Synthesis(format!(
        "{} shape (seed {}) stayed below {} occupied cells after {MAX_ATTEMPTS} resamples",
        spec.family.name(),
        spec.seed,
        min_cells
    )))
}
