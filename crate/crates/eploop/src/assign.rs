//! Minimum-cost assignment between two eigenpair sets.
//!
//! Eigenpair tracking reduces to an assignment problem on overlap scores.
//! Up to [`EXACT_LIMIT`] rows the problem is solved exactly with the
//! shortest-augmenting-path Hungarian algorithm; above that a greedy
//! assignment with pairwise-swap improvement is used.

use ndarray::Array2;

/// Largest row count solved with the exact algorithm.
pub const EXACT_LIMIT: usize = 64;

/// Assigns each row to a distinct column, minimizing total cost.
///
/// `cost` may be rectangular with `nrows <= ncols`. Returns the column chosen
/// for each row.
pub fn assign(cost: &Array2<f64>) -> Vec<usize> {
    assert!(
        cost.nrows() <= cost.ncols(),
        "assignment needs nrows <= ncols"
    );
    if cost.nrows() <= EXACT_LIMIT {
        hungarian(cost)
    } else {
        greedy_with_swaps(cost)
    }
}

/// Exact O(n²·m) shortest-augmenting-path assignment.
fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    const NONE: usize = usize::MAX;

    // 1-indexed potentials with a sentinel column 0.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; m + 1];
    // col_row[j] = row currently assigned to column j (1-indexed), NONE if free.
    let mut col_row = vec![NONE; m + 1];
    let mut way = vec![0_usize; m + 1];

    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0_usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    if col_row[j] != NONE {
                        u[col_row[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == NONE {
                break;
            }
        }
        // Augment along the alternating path back to the sentinel.
        while j0 != 0 {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
        }
    }

    let mut row_col = vec![NONE; n];
    for j in 1..=m {
        if col_row[j] != NONE && col_row[j] != 0 {
            row_col[col_row[j] - 1] = j - 1;
        }
    }
    debug_assert!(row_col.iter().all(|&c| c != NONE));
    row_col
}

/// Greedy assignment followed by pairwise-swap improvement passes.
fn greedy_with_swaps(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    let mut taken = vec![false; m];
    let mut row_col = vec![0_usize; n];

    // Rows with the largest gap between best and second-best choice first.
    let mut order: Vec<usize> = (0..n).collect();
    let urgency: Vec<f64> = (0..n)
        .map(|r| {
            let mut best = f64::INFINITY;
            let mut second = f64::INFINITY;
            for c in 0..m {
                let x = cost[[r, c]];
                if x < best {
                    second = best;
                    best = x;
                } else if x < second {
                    second = x;
                }
            }
            best - second
        })
        .collect();
    order.sort_by(|&a, &b| urgency[a].total_cmp(&urgency[b]));

    for &r in &order {
        let mut best = f64::INFINITY;
        let mut best_c = 0;
        for c in 0..m {
            if !taken[c] && cost[[r, c]] < best {
                best = cost[[r, c]];
                best_c = c;
            }
        }
        taken[best_c] = true;
        row_col[r] = best_c;
    }

    // Local improvement: swap column pairs while it lowers the total cost.
    let mut improved = true;
    let mut passes = 0;
    while improved && passes < 50 {
        improved = false;
        passes += 1;
        for r1 in 0..n {
            for r2 in (r1 + 1)..n {
                let (c1, c2) = (row_col[r1], row_col[r2]);
                let now = cost[[r1, c1]] + cost[[r2, c2]];
                let swapped = cost[[r1, c2]] + cost[[r2, c1]];
                if swapped + 1e-15 < now {
                    row_col[r1] = c2;
                    row_col[r2] = c1;
                    improved = true;
                }
            }
        }
    }
    row_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &Array2<f64>) -> f64 {
        let n = cost.nrows();
        let m = cost.ncols();
        let mut best = f64::INFINITY;
        let mut cols: Vec<usize> = (0..m).collect();
        permute(&mut cols, 0, n, cost, &mut best);
        best
    }

    fn permute(cols: &mut Vec<usize>, k: usize, n: usize, cost: &Array2<f64>, best: &mut f64) {
        if k == n {
            let total: f64 = (0..n).map(|r| cost[[r, cols[r]]]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in k..cols.len() {
            cols.swap(k, i);
            permute(cols, k + 1, n, cost, best);
            cols.swap(k, i);
        }
    }

    fn total(cost: &Array2<f64>, sel: &[usize]) -> f64 {
        sel.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum()
    }

    #[test]
    fn exact_matches_brute_force_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=6 {
            for _ in 0..40 {
                let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
                let sel = assign(&cost);
                let mut sorted = sel.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), n, "selection must be injective");
                assert!((total(&cost, &sel) - brute_force(&cost)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_matches_brute_force_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, m) in [(2, 4), (3, 5), (4, 6)] {
            for _ in 0..30 {
                let cost = Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0));
                let sel = assign(&cost);
                assert!((total(&cost, &sel) - brute_force(&cost)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_is_injective_and_reasonable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = EXACT_LIMIT + 10;
        let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
        let sel = assign(&cost);
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), n);
        // A near-diagonal cost matrix must be resolved exactly by the greedy path.
        let diag = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(assign(&diag), (0..n).collect::<Vec<_>>());
    }
}
