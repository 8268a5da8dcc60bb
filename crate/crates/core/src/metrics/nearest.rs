use crate::tensor::Real;

pub(crate) fn dist2(a: &[Real; 3], b: &[Real; 3]) -> Real {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Squared distance from every point of `queries` to its nearest neighbor in
/// `targets`, by exhaustive search.
pub(crate) fn nearest_brute(queries: &[[Real; 3]], targets: &[[Real; 3]]) -> Vec<Real> {
    queries
        .iter()
        .map(|q| targets.iter().map(|t| dist2(q, t)).fold(Real::INFINITY, Real::min))
        .collect()
}

/// Uniform bucket grid over a point set for exact nearest-neighbor queries.
pub(crate) struct BucketGrid<'a> {
    points: &'a [[Real; 3]],
    origin: [Real; 3],
    cell: Real,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> BucketGrid<'a> {
    pub(crate) fn new(points: &'a [[Real; 3]]) -> Self {
        let mut lo = [Real::INFINITY; 3];
        let mut hi = [Real::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, Real::max).max(1e-12);
        // about two points per bucket for a surface-like distribution
        let per_axis = ((points.len() as Real / 2.0).sqrt().ceil() as usize).clamp(1, 256);
        let cell = extent / per_axis as Real;
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(per_axis + 1));
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; n_cells + 1],
            order: Vec::with_capacity(points.len()),
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(grid.cell_of(p))).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for i in 0..n_cells {
            grid.starts[i + 1] += grid.starts[i];
        }
        let mut fill = grid.starts.clone();
        grid.order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            grid.order[fill[k]] = i;
            fill[k] += 1;
        }
        grid
    }

    fn cell_of(&self, p: &[Real; 3]) -> [isize; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as isize)
    }

    fn key(&self, c: [isize; 3]) -> usize {
        let c = [0, 1, 2].map(|a| (c[a].max(0) as usize).min(self.dims[a] - 1));
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    fn scan(&self, c: [isize; 3], q: &[Real; 3], best: &mut Real) {
        let k = self.key(c);
        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
            *best = best.min(dist2(q, &self.points[i]));
        }
    }

    /// Squared distance to the nearest stored point.
    pub(crate) fn nearest(&self, q: &[Real; 3]) -> Real {
        let c = self.cell_of(q);
        let d = self.dims.map(|v| v as isize);
        // rings closer than `first` contain no grid cell
        let first = (0..3).map(|a| (-c[a]).max(c[a] - d[a] + 1).max(0)).max().unwrap_or(0);
        let far = (0..3).map(|a| c[a].abs().max((c[a] - d[a]).abs())).max().unwrap_or(0);
        let span = |a: usize, r: isize| ((c[a] - r).max(0), (c[a] + r).min(d[a] - 1));
        let mut best = Real::INFINITY;
        for r in first..=far {
            let (z0, z1) = span(2, r);
            let (y0, y1) = span(1, r);
            let (x0, x1) = span(0, r);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    if (z - c[2]).abs() == r || (y - c[1]).abs() == r {
                        for x in x0..=x1 {
                            self.scan([x, y, z], q, &mut best);
                        }
                    } else {
                        for x in [c[0] - r, c[0] + r] {
                            if x >= 0 && x < d[0] && (r > 0 || x == c[0] - r) {
                                self.scan([x, y, z], q, &mut best);
                            }
                        }
                    }
                }
            }
            // everything outside ring r is at least r cells away
            let bound = r as Real * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best
    }
}

pub(crate) fn nearest_accelerated(queries: &[[Real; 3]], targets: &[[Real; 3]]) -> Vec<Real> {
    let grid = BucketGrid::new(targets);
    queries.iter().map(|q| grid.nearest(q)).collect()
}
