//! Optimal bipartite assignment and polyline matching costs.

use crate::geometry::Point;

/// Min-cost assignment over an n x m matrix (Jonker-Volgenant potentials,
/// O(k^3) on the padded square). Returns, per row, the assigned column.
/// When n != m the matrix is padded with a constant; rows landing on
/// padding come back as `None`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return vec![None; n];
    }
    let k = n.max(m);
    let at = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            cost[i][j]
        } else {
            0.0
        }
    };

    // Potentials u, v and column assignment p (1-indexed sentinel at 0).
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; n];
    for j in 1..=k {
        let i = p[j];
        if i >= 1 && i <= n && j <= m {
            row_to_col[i - 1] = Some(j - 1);
        }
    }
    row_to_col
}

/// Mean point-to-point L1 distance under the best admissible ordering of
/// the ground truth: forward or reversed for open polylines, every cyclic
/// shift for closed ones. Returns the cost and the reordered ground-truth
/// points realizing it.
pub fn point_cost(pred: &[Point], gt: &[Point], closed: bool) -> (f64, Vec<Point>) {
    assert_eq!(pred.len(), gt.len(), "point_cost needs equal point counts");
    let n = gt.len();
    let mean_l1 = |ordered: &dyn Fn(usize) -> Point| -> f64 {
        (0..n)
            .map(|i| {
                let g = ordered(i);
                (pred[i].0 - g.0).abs() + (pred[i].1 - g.1).abs()
            })
            .sum::<f64>()
            / n as f64
    };
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<Point> = Vec::new();
    if closed {
        for shift in 0..n {
            let f = |i: usize| gt[(i + shift) % n];
            let c = mean_l1(&f);
            if c < best_cost {
                best_cost = c;
                best = (0..n).map(f).collect();
            }
        }
    } else {
        let fwd = |i: usize| gt[i];
        let c = mean_l1(&fwd);
        if c < best_cost {
            best_cost = c;
            best = gt.to_vec();
        }
        let rev = |i: usize| gt[n - 1 - i];
        let c = mean_l1(&rev);
        if c < best_cost {
            best_cost = c;
            best = (0..n).map(rev).collect();
        }
    }
    (best_cost, best)
}
