//! Kuhn-Munkres (Hungarian) assignment on rectangular matrices.

/// Minimum-cost assignment of rows to distinct columns. The smaller side is
/// matched completely, which is the same as padding the other side with
/// zero-cost dummies and dropping their matches. Returns the column of each
/// row, or `None` for rows left over when there are more rows than columns.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");
    if cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let by_col = hungarian(&transposed);
        let mut out = vec![None; rows];
        for (j, i) in by_col.into_iter().enumerate() {
            out[i] = Some(j);
        }
        return out;
    }
    hungarian(cost).into_iter().map(Some).collect()
}

/// Maximum-weight assignment: the same problem with negated weights.
pub fn max_weight_matching(weight: &[Vec<f64>]) -> Vec<Option<usize>> {
    let cost: Vec<Vec<f64>> = weight.iter().map(|r| r.iter().map(|w| -w).collect()).collect();
    min_cost_assignment(&cost)
}

/// Potentials-based Hungarian method for `n ≤ m`, O(n²m). Returns the
/// column assigned to each row.
fn hungarian(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let m = a[0].len();
    debug_assert!(n <= m);
    // 1-based with column 0 as the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Total of `matrix[i][col]` over matched rows.
pub fn matching_total(matrix: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|j| matrix[i][j]))
        .sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Best total over every injective map from the smaller side.
    pub fn brute_force_max(w: &[Vec<f64>]) -> f64 {
        let rows = w.len();
        let cols = w[0].len();
        fn go(w: &[Vec<f64>], i: usize, used: &mut Vec<bool>, transposed: bool) -> f64 {
            let (rows, cols) = if transposed { (w[0].len(), w.len()) } else { (w.len(), w[0].len()) };
            if i == rows {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    let x = if transposed { w[j][i] } else { w[i][j] };
                    best = best.max(x + go(w, i + 1, used, transposed));
                    used[j] = false;
                }
            }
            best
        }
        if rows <= cols {
            go(w, 0, &mut vec![false; cols], false)
        } else {
            go(w, 0, &mut vec![false; rows], true)
        }
    }

    pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect()
    }

    #[test]
    fn anti_diagonal_costs() {
        let w = vec![vec![-0.0, -5.0], vec![-5.0, -0.0]];
        assert_eq!(max_weight_matching(&w), vec![Some(0), Some(1)]);
        assert_eq!(matching_total(&w, &max_weight_matching(&w)), 0.0);
    }

    #[test]
    fn single_cell() {
        assert_eq!(max_weight_matching(&[vec![-3.0]]), vec![Some(0)]);
    }

    #[test]
    fn rectangular_shapes() {
        let w = vec![vec![1.0, 9.0, 2.0]];
        assert_eq!(max_weight_matching(&w), vec![Some(1)]);
        let w = vec![vec![1.0], vec![9.0], vec![2.0]];
        assert_eq!(max_weight_matching(&w), vec![None, Some(0), None]);
        assert!(max_weight_matching(&[]).is_empty());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=6);
            let w = random_matrix(&mut rng, rows, cols);
            let a = max_weight_matching(&w);
            let mut cols_used: Vec<usize> = a.iter().flatten().copied().collect();
            assert_eq!(cols_used.len(), rows.min(cols));
            cols_used.sort();
            cols_used.dedup();
            assert_eq!(cols_used.len(), rows.min(cols));
            assert!((matching_total(&w, &a) - brute_force_max(&w)).abs() < 1e-9);
        }
    }
}
