use super::{AssignmentError, MatchResult};

/// Minimum-cost assignment of `k` rows to `g` columns, `min(k, g)` pairs.
///
/// The matrix is padded to a square with a constant larger than any entry.
/// Among optimal assignments the lexicographically smallest pair list wins.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult, AssignmentError> {
    let k = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(AssignmentError::Shape(format!("ragged cost matrix with {k} rows")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(AssignmentError::NonFinite);
    }
    if k == 0 || g == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total: 0.0, unmatched: (0..k).collect(), terms: Vec::new() });
    }
    let n = k.max(g);
    let max = cost.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = cost.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
    let pad = max + (max - min).abs() + 1.0;
    let a: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| if r < k && c < g { cost[r][c] } else { pad }).collect()).collect();

    let all: Vec<usize> = (0..n).collect();
    let Solution { assign: best, total: opt, u, v } = solve(&a, &all, &all);
    let scale = a.iter().flatten().map(|c| c.abs()).fold(0.0, f64::max) * n as f64;
    let tol = 1e-9 * (1.0 + scale);

    // greedy lexicographic refinement: each row takes the smallest column
    // that still admits an optimal completion; only edges tight under the
    // optimal duals can appear in an optimal assignment
    let mut assign = vec![usize::MAX; n];
    let mut free: Vec<usize> = (0..n).collect();
    let mut remaining = opt;
    for r in 0..n {
        let rows: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for (idx, &c) in free.iter().enumerate() {
            if (a[r][c] - u[r] - v[c]).abs() > tol {
                continue;
            }
            let cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let sub = solve(&a, &rows, &cols).total;
            if (a[r][c] + sub - remaining).abs() <= tol {
                chosen = Some((idx, c, sub));
                break;
            }
        }
        let Some((idx, c, sub)) = chosen else {
            assign = best;
            break;
        };
        assign[r] = c;
        free.remove(idx);
        remaining = sub;
    }

    let pairs: Vec<(usize, usize)> = (0..k).filter(|&r| assign[r] < g).map(|r| (r, assign[r])).collect();
    let unmatched = (0..k).filter(|&r| assign[r] >= g).collect();
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(MatchResult { pairs, total, unmatched, terms: Vec::new() })
}

struct Solution {
    /// Column of every global row in the solved submatrix.
    assign: Vec<usize>,
    total: f64,
    /// Row and column duals, indexed globally.
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest augmenting path solver on the square submatrix `rows × cols`.
fn solve(a: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Solution {
    let n = rows.len();
    let mut assign = vec![usize::MAX; a.len()];
    let mut ug = vec![0.0; a.len()];
    let mut vg = vec![0.0; a.len()];
    if n == 0 {
        return Solution { assign, total: 0.0, u: ug, v: vg };
    }
    let at = |i: usize, j: usize| a[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut total = 0.0;
    for j in 1..=n {
        let r = rows[p[j] - 1];
        assign[r] = cols[j - 1];
    }
    for &r in rows {
        total += a[r][assign[r]];
    }
    for i in 1..=n {
        ug[rows[i - 1]] = u[i];
        vg[cols[i - 1]] = v[i];
    }
    Solution { assign, total, u: ug, v: vg }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_examples() {
        let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total, 2.0);
        let m = hungarian(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.total, 2.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let m = hungarian(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let m = hungarian(&vec![vec![0.0, 0.0, 0.0]; 3]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn rectangular_shapes() {
        let m = hungarian(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched, vec![0, 2]);
        let m = hungarian(&[vec![4.0, 1.0, 3.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert!(m.unmatched.is_empty());
    }

    #[test]
    fn rejects_non_finite() {
        assert_eq!(hungarian(&[vec![f64::NAN]]).unwrap_err(), AssignmentError::NonFinite);
    }
}
