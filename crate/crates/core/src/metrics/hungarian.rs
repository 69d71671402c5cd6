//! Minimum-cost assignment on a dense rectangular matrix.

/// Returns, for each row, the column assigned to it (`None` for rows left
/// over when there are more rows than columns). Minimises the total cost.
pub fn assign(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let by_col = assign(&t);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // Potentials method with 1-based bookkeeping; column 0 is a sentinel.
    let (n, m) = (rows, cols);
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
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total(cost: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
        a.iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost[r][c]))
            .sum()
    }

    /// Minimum over all injective row → column maps of the smaller side.
    fn brute(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        let k = rows.min(cols);
        fn rec(
            cost: &[Vec<f64>],
            r: usize,
            used: &mut Vec<bool>,
            left: usize,
            acc: f64,
            best: &mut f64,
        ) {
            if left == 0 {
                *best = best.min(acc);
                return;
            }
            if r == cost.len() {
                return;
            }
            // Row r may stay unassigned only if enough rows remain.
            if cost.len() - r > left {
                rec(cost, r + 1, used, left, acc, best);
            }
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    rec(cost, r + 1, used, left - 1, acc + cost[r][c], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cols], k, 0.0, &mut best);
        best
    }

    #[test]
    fn classic_three_by_three() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = assign(&c);
        assert_eq!(total(&c, &a), 5.0);
    }

    #[test]
    fn empty_inputs() {
        assert!(assign(&[]).is_empty());
        assert_eq!(assign(&[vec![], vec![]]), vec![None, None]);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            rows in 1usize..6, cols in 1usize..6,
            vals in prop::collection::vec(-5.0f64..5.0, 36)
        ) {
            let c: Vec<Vec<f64>> = (0..rows).map(|r| (0..cols).map(|k| vals[r * 6 + k]).collect()).collect();
            let a = assign(&c);
            let assigned = a.iter().flatten().count();
            prop_assert_eq!(assigned, rows.min(cols));
            let mut seen = std::collections::BTreeSet::new();
            prop_assert!(a.iter().flatten().all(|&k| seen.insert(k)));
            prop_assert!((total(&c, &a) - brute(&c)).abs() < 1e-9);
        }
    }
}
