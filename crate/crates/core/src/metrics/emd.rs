use super::nearest::dist2;
use crate::tensor::Real;

/// Exact minimum-cost perfect matching on a dense square cost matrix
/// (shortest augmenting paths with potentials, O(m³)). Returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Real], m: usize) -> Vec<usize> {
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=m {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![Real::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = Real::INFINITY;
            let mut j1 = 0;
            let crow = &cost[(i0 - 1) * m..i0 * m];
            for j in 1..=m {
                if !used[j] {
                    let cur = crow[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; m];
    for j in 1..=m {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// ε-scaling forward auction for the minimum-cost assignment. The returned
/// matching costs at most `m·epsilon` more than the optimum.
pub fn auction(cost: &[Real], m: usize, epsilon: Real) -> Vec<usize> {
    let max_cost = cost.iter().cloned().fold(0.0, Real::max);
    let mut prices = vec![0.0; m];
    let mut eps = (max_cost / 4.0).max(epsilon);
    let mut owner: Vec<Option<usize>>;
    let mut assigned: Vec<Option<usize>>;
    loop {
        owner = vec![None; m];
        assigned = vec![None; m];
        let mut queue: Vec<usize> = (0..m).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * m..(i + 1) * m];
            let (mut best, mut best_j, mut second) = (Real::NEG_INFINITY, 0, Real::NEG_INFINITY);
            for (j, (&c, &p)) in row.iter().zip(&prices).enumerate() {
                let value = -c - p;
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            let increment = if second.is_finite() { best - second } else { 0.0 };
            prices[best_j] += increment + eps;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push(prev);
            }
            assigned[i] = Some(best_j);
        }
        if eps <= epsilon {
            break;
        }
        eps = (eps / 5.0).max(epsilon);
    }
    assigned.into_iter().map(|a| a.expect("auction assigns every row")).collect()
}

/// Euclidean cost matrix between equal-size point sets.
pub(crate) fn cost_matrix(a: &[[Real; 3]], b: &[[Real; 3]]) -> Vec<Real> {
    let mut c = Vec::with_capacity(a.len() * b.len());
    for p in a {
        c.extend(b.iter().map(|q| dist2(p, q).sqrt()));
    }
    c
}
