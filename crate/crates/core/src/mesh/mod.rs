//! Marching-cubes surface extraction and Wavefront OBJ input/output.

mod obj;
mod tables;

pub use obj::{read_obj, write_obj, write_obj_to};

use std::collections::HashMap;

use crate::tensor::Real;
use crate::voxel::VoxelGrid;
use tables::TRI_TABLE;

/// Corner offsets in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

const MIN_AREA: Real = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[Real; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [Real; 3]) -> Real {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: &[usize; 3]) -> [[Real; 3]; 3] {
        t.map(|i| self.vertices[i])
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> Real {
        let [a, b, c] = self.corners(t);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> Real {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Enclosed volume by signed tetrahedra; positive for outward winding.
    pub fn signed_volume(&self) -> Real {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                let n = cross(b, c);
                (a[0] * n[0] + a[1] * n[1] + a[2] * n[2]) / 6.0
            })
            .sum()
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        self.triangles.iter().flatten().for_each(|&i| used[i] = true);
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Indices in range and no triangle below the area floor.
    pub fn is_valid(&self) -> bool {
        self.triangles
            .iter()
            .all(|t| t.iter().all(|&i| i < self.vertices.len()) && self.triangle_area(t) >= MIN_AREA)
    }
}

/// Extracts the iso-surface of `x` at `iso` with outward-facing triangles
/// (normals point toward lower values). The grid is padded with a layer of
/// zeros so shapes touching the boundary close; lattice points sit at cell
/// centers in world space. A grid with no value on both sides of `iso`
/// yields an empty mesh.
pub fn marching_cubes(x: &VoxelGrid, iso: Real) -> TriangleMesh {
    let r = x.resolution();
    let mut mesh = TriangleMesh::default();
    let (lo, hi) = x
        .values()
        .iter()
        .fold((Real::INFINITY, Real::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if r < 2 || !(iso > lo && iso < hi) {
        return mesh;
    }
    let p = r + 2;
    let value = |q: [usize; 3]| -> Real {
        if q.iter().any(|&c| c == 0 || c == p - 1) {
            0.0
        } else {
            x.get(q[0] - 1, q[1] - 1, q[2] - 1)
        }
    };
    let h = x.cell_size();
    let world = |q: [Real; 3]| [0, 1, 2].map(|a| x.origin[a] + (q[a] - 0.5) * h);
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    let lattice = |q: [usize; 3]| q[0] + p * (q[1] + p * q[2]);

    for cz in 0..p - 1 {
        for cy in 0..p - 1 {
            for cx in 0..p - 1 {
                let pts = CORNERS.map(|o| [cx + o[0], cy + o[1], cz + o[2]]);
                let vals = pts.map(value);
                let case = (0..8).fold(0, |acc, i| acc | (((vals[i] > iso) as usize) << i));
                let row = &TRI_TABLE[case];
                let mut k = 0;
                while k < 16 && row[k] >= 0 {
                    let mut tri = [0usize; 3];
                    for (slot, &e) in tri.iter_mut().zip(&row[k..k + 3]) {
                        let [a, b] = EDGES[e as usize];
                        // order endpoints by lattice index so shared edges
                        // interpolate identically
                        let (a, b) = if lattice(pts[a]) < lattice(pts[b]) { (a, b) } else { (b, a) };
                        let key = (lattice(pts[a]), lattice(pts[b]));
                        *slot = *vertex_of.entry(key).or_insert_with(|| {
                            let t = (iso - vals[a]) / (vals[b] - vals[a]);
                            let q = [0, 1, 2].map(|d| pts[a][d] as Real + t * (pts[b][d] as Real - pts[a][d] as Real));
                            mesh.vertices.push(world(q));
                            mesh.vertices.len() - 1
                        });
                    }
                    // the table winds triangles toward higher values
                    let tri = [tri[0], tri[2], tri[1]];
                    if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] && mesh.triangle_area(&tri) >= MIN_AREA {
                        mesh.triangles.push(tri);
                    }
                    k += 3;
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests;
