//! Rectangular linear assignment with forbidden pairs (Hungarian method with
//! potentials, O(n³)).

/// A cost matrix entry: `None` marks a forbidden pair.
pub type Entry = Option<f64>;

/// Solves the assignment problem on `costs[row][col]`.
///
/// Among all one-to-one matchings that use only allowed pairs, returns one
/// with the largest number of pairs and, among those, the smallest total
/// cost. Pairs are returned sorted by row.
pub fn solve(costs: &[Vec<Entry>]) -> Vec<(usize, usize)> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    assert!(
        costs.iter().all(|r| r.len() == cols),
        "cost matrix rows must have equal length"
    );
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let allowed: Vec<f64> = costs.iter().flatten().filter_map(|c| *c).collect();
    if allowed.is_empty() {
        return Vec::new();
    }
    let lo = allowed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = allowed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = rows.max(cols);
    // Any extra allowed pair outweighs every possible change in allowed cost.
    let forbidden = (n as f64 + 1.0) * (hi - lo + 1.0) + hi.abs();

    let mut square = vec![vec![forbidden; n]; n];
    for (r, row) in costs.iter().enumerate() {
        for (c, entry) in row.iter().enumerate() {
            if let Some(v) = entry {
                square[r][c] = *v;
            }
        }
    }

    let col_of_row = hungarian(&square);
    col_of_row
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < rows && c < cols && costs[r][c].is_some())
        .collect()
}

/// Minimum-cost perfect matching on a square matrix; returns the column
/// assigned to each row.
fn hungarian(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    // 1-based potentials; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

/// Total cost of a set of pairs.
pub fn total_cost(costs: &[Vec<Entry>], pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(r, c)| costs[r][c].expect("pairs only use allowed entries"))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive oracle: best (max pairs, min cost) over all partial
    /// injections of rows into columns.
    fn brute_force(costs: &[Vec<Entry>]) -> (usize, f64) {
        fn go(
            costs: &[Vec<Entry>],
            row: usize,
            used: &mut Vec<bool>,
            count: usize,
            cost: f64,
            best: &mut (usize, f64),
        ) {
            if row == costs.len() {
                if count > best.0 || (count == best.0 && cost < best.1) {
                    *best = (count, cost);
                }
                return;
            }
            go(costs, row + 1, used, count, cost, best);
            for c in 0..used.len() {
                if let (false, Some(v)) = (used[c], costs[row][c]) {
                    used[c] = true;
                    go(costs, row + 1, used, count + 1, cost + v, best);
                    used[c] = false;
                }
            }
        }
        let cols = costs.first().map_or(0, Vec::len);
        let mut best = (0, f64::INFINITY);
        go(costs, 0, &mut vec![false; cols], 0, 0.0, &mut best);
        if best.0 == 0 {
            best.1 = 0.0;
        }
        best
    }

    #[test]
    fn global_optimum_beats_greedy() {
        let costs = vec![
            vec![Some(0.1), Some(0.2)],
            vec![Some(0.15), Some(0.9)],
        ];
        let pairs = solve(&costs);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert!((total_cost(&costs, &pairs) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn forbidden_pairs_are_never_used() {
        let costs = vec![vec![None, Some(0.5)], vec![None, Some(0.1)]];
        let pairs = solve(&costs);
        assert_eq!(pairs, vec![(1, 1)]);
        assert!(solve(&[vec![None, None]]).is_empty());
        assert!(solve(&[]).is_empty());
        assert!(solve(&[vec![], vec![]]).is_empty());
    }

    #[test]
    fn rectangular_matrices() {
        let wide = vec![vec![Some(0.9), Some(0.1), Some(0.5)]];
        assert_eq!(solve(&wide), vec![(0, 1)]);
        let tall = vec![vec![Some(0.9)], vec![Some(0.1)], vec![Some(0.5)]];
        assert_eq!(solve(&tall), vec![(1, 0)]);
    }

    #[test]
    fn prefers_more_pairs_over_lower_cost() {
        // one pair of cost 0 vs two pairs of cost 1 each
        let costs = vec![vec![Some(0.0), Some(1.0)], vec![Some(1.0), None]];
        let pairs = solve(&costs);
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..400 {
            let rows = rng.random_range(1..=4);
            let cols = rng.random_range(1..=4);
            let p_forbid = rng.random_range(0.0..0.6);
            let costs: Vec<Vec<Entry>> = (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| (!rng.random_bool(p_forbid)).then(|| rng.random::<f64>()))
                        .collect()
                })
                .collect();
            let pairs = solve(&costs);
            let (count, cost) = brute_force(&costs);
            assert_eq!(pairs.len(), count, "{costs:?}");
            assert!((total_cost(&costs, &pairs) - cost).abs() < 1e-12, "{costs:?}");
            let mut seen_cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            seen_cols.sort_unstable();
            seen_cols.dedup();
            assert_eq!(seen_cols.len(), pairs.len());
        }
    }
}
