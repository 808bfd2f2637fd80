//! Minimum-cost bipartite assignment.
//!
//! `hungarian` solves rectangular instances exactly in O(s³) by padding to a
//! square matrix and running the shortest-augmenting-path algorithm with
//! dual potentials. Ties are broken deterministically: among all minimum
//! cost matchings, the one whose (row, column) pair list is lexicographically
//! smallest wins. The tie-break is resolved on the zero-reduced-cost graph
//! given by the optimal duals, so it never changes the total cost.
//!
//! `brute_force_match` is the independent oracle: exhaustive enumeration in
//! lexicographic order, capped at 8 on the smaller side.

use crate::error::{Error, Result};
use crate::par;

/// Cost matrix over image tokens (rows) and text tokens (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || costs.len() != rows * cols {
            return Err(Error::Input(format!(
                "cost matrix: invalid dims {rows}x{cols} with {} entries",
                costs.len()
            )));
        }
        if !costs.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("cost matrix: non-finite entry".into()));
        }
        Ok(CostMatrix { rows, cols, costs })
    }

    /// Build the matching cost 1 - c from a cosine similarity matrix.
    /// Entries land in [0, 2].
    pub fn from_cosine(rows: usize, cols: usize, cosine: &[f64]) -> Result<Self> {
        if cosine.iter().any(|&v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::Input(
                "cosine matrix entry outside [-1, 1]".into(),
            ));
        }
        CostMatrix::new(rows, cols, cosine.iter().map(|&v| 1.0 - v).collect())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }
}

/// Injective row-to-column matching of size min(rows, cols), with the total
/// of the matched entries. Pairs are sorted by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pairs(costs: &CostMatrix, pairs: Vec<(usize, usize)>) -> Self {
        let total_cost = pairs.iter().map(|&(r, c)| costs.at(r, c)).sum();
        Assignment { pairs, total_cost }
    }

    /// Column matched to a row, if any.
    pub fn column_of(&self, row: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(r, _)| r == row)
            .map(|&(_, c)| c)
    }
}

/// Exact minimum-cost assignment with lexicographic tie-breaking
/// (lowest row index, then lowest column index).
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (costs.rows, costs.cols);
    let s = m.max(n);

    // Pad to square with zero-cost dummy rows or columns. A dummy row
    // absorbs an unused column (m < n); a dummy column marks an unmatched
    // row (m > n). Either way the real entries' optimum is unchanged.
    let mut sq = vec![0.0; s * s];
    for r in 0..m {
        for c in 0..n {
            sq[r * s + c] = costs.at(r, c);
        }
    }

    let (col_to_row, u, v) = jv_square(&sq, s);

    // Zero-reduced-cost graph: every minimum-cost perfect matching of the
    // square problem uses only cells with rc == 0 (complementary slackness).
    let max_abs = costs.costs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tie_eps = 1e-12 * (1.0 + max_abs);
    let allowed: Vec<Vec<usize>> = (0..s)
        .map(|r| {
            (0..s)
                .filter(|&c| (sq[r * s + c] - u[r + 1] - v[c + 1]).abs() <= tie_eps)
                .collect()
        })
        .collect();

    let row_to_col = lex_smallest_perfect_matching(&allowed, s, &col_to_row);

    let pairs: Vec<(usize, usize)> = (0..m)
        .filter_map(|r| {
            let c = row_to_col[r];
            (c < n).then_some((r, c))
        })
        .collect();
    debug_assert_eq!(pairs.len(), m.min(n));
    Ok(Assignment::from_pairs(costs, pairs))
}

/// Shortest-augmenting-path assignment on a square matrix.
/// Returns (col -> row matching, row duals, col duals), all 1-indexed with
/// slot 0 as scratch.
fn jv_square(cost: &[f64], s: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut p = vec![0usize; s + 1];
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=s {
                if !used[j] {
                    let cur = cost[(i0 - 1) * s + (j - 1)] - u[i0] - v[j];
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
            for j in 0..=s {
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
    (p, u, v)
}

/// Greedy lexicographic selection over the zero-reduced-cost graph: fix each
/// row's column in ascending order, keeping the remainder perfectly
/// matchable. `col_to_row` (from the solver) guarantees feasibility exists.
fn lex_smallest_perfect_matching(
    allowed: &[Vec<usize>],
    s: usize,
    col_to_row: &[usize],
) -> Vec<usize> {
    let mut row_to_col = vec![usize::MAX; s];
    let mut col_used = vec![false; s];
    debug_assert!((1..=s).all(|j| col_to_row[j] > 0));

    for r in 0..s {
        let mut fixed = false;
        for &c in &allowed[r] {
            if col_used[c] {
                continue;
            }
            col_used[c] = true;
            if rows_matchable(allowed, r + 1, s, &col_used) {
                row_to_col[r] = c;
                fixed = true;
                break;
            }
            col_used[c] = false;
        }
        debug_assert!(fixed, "zero-rc graph lost feasibility at row {r}");
        if !fixed {
            // Defensive fallback: take the solver's own matching for the rest.
            for rr in r..s {
                for j in 1..=s {
                    if col_to_row[j] == rr + 1 && !col_used[j - 1] {
                        row_to_col[rr] = j - 1;
                        col_used[j - 1] = true;
                        break;
                    }
                }
            }
            break;
        }
    }
    row_to_col
}

/// Kuhn's algorithm feasibility check: can rows `from..s` all be matched to
/// distinct unused columns?
fn rows_matchable(allowed: &[Vec<usize>], from: usize, s: usize, col_used: &[bool]) -> bool {
    let mut col_match = vec![usize::MAX; s];
    for r in from..s {
        let mut visited = vec![false; s];
        if !augment(allowed, r, col_used, &mut col_match, &mut visited) {
            return false;
        }
    }
    true
}

fn augment(
    allowed: &[Vec<usize>],
    r: usize,
    col_used: &[bool],
    col_match: &mut [usize],
    visited: &mut [bool],
) -> bool {
    for &c in &allowed[r] {
        if col_used[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        if col_match[c] == usize::MAX || augment(allowed, col_match[c], col_used, col_match, visited)
        {
            col_match[c] = r;
            return true;
        }
    }
    false
}

/// Bound on the smaller matrix side for exhaustive enumeration.
pub const BRUTE_FORCE_BOUND: usize = 8;

/// Exhaustive minimum over all injective matchings of size min(rows, cols),
/// enumerated in lexicographic pair-list order so ties resolve exactly like
/// `hungarian`.
pub fn brute_force_match(costs: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (costs.rows, costs.cols);
    let k = m.min(n);
    if k > BRUTE_FORCE_BOUND {
        return Err(Error::OracleSize {
            got: k,
            bound: BRUTE_FORCE_BOUND,
        });
    }

    struct Search<'a> {
        costs: &'a CostMatrix,
        k: usize,
        best: Option<(f64, Vec<(usize, usize)>)>,
        current: Vec<(usize, usize)>,
        col_used: Vec<bool>,
    }

    impl Search<'_> {
        fn run(&mut self, row: usize, acc: f64) {
            let m = self.costs.rows;
            if self.current.len() == self.k {
                // Strictly better wins; the first found (lex-smallest) keeps ties.
                if self.best.as_ref().map_or(true, |(b, _)| acc < *b) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            if row == m {
                return;
            }
            let rows_left = m - row;
            let need = self.k - self.current.len();
            // Matching this row: columns in ascending order.
            for c in 0..self.costs.cols {
                if !self.col_used[c] {
                    self.col_used[c] = true;
                    self.current.push((row, c));
                    self.run(row + 1, acc + self.costs.at(row, c));
                    self.current.pop();
                    self.col_used[c] = false;
                }
            }
            // Leaving this row unmatched, allowed only while enough rows remain.
            if rows_left > need {
                self.run(row + 1, acc);
            }
        }
    }

    let mut search = Search {
        costs,
        k,
        best: None,
        current: Vec::with_capacity(k),
        col_used: vec![false; n],
    };
    search.run(0, 0.0);
    let (_, pairs) = search.best.expect("at least one matching exists");
    Ok(Assignment::from_pairs(costs, pairs))
}

/// Solve a batch of independent instances, in parallel when enabled.
pub fn match_batch(costs: &[CostMatrix]) -> Result<Vec<Assignment>> {
    par::map_indexed(costs.len(), |i| hungarian(&costs[i]))
        .into_iter()
        .collect()
}

/// Sequential twin of [`match_batch`] for the bench comparison.
pub fn match_batch_seq(costs: &[CostMatrix]) -> Result<Vec<Assignment>> {
    par::map_indexed_seq(costs.len(), |i| hungarian(&costs[i]))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
        let mut rng = derive_rng(seed, Stream::ChanceOracle, 77);
        let costs = (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect();
        CostMatrix::new(rows, cols, costs).unwrap()
    }

    #[test]
    fn diagonal_dominance_two_by_two() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn identity_beats_swap() {
        let c = CostMatrix::new(2, 2, vec![0.2, 0.9, 0.1, 0.3]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.total_cost - 0.5).abs() < 1e-15);
        let b = brute_force_match(&c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_cell() {
        let c = CostMatrix::new(1, 1, vec![0.4]).unwrap();
        let a = brute_force_match(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert!((a.total_cost - 0.4).abs() < 1e-15);
        assert_eq!(hungarian(&c).unwrap(), a);
    }

    #[test]
    fn exact_tie_breaks_to_identity() {
        let c = CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);

        let z = CostMatrix::new(3, 3, vec![0.0; 9]).unwrap();
        let a = hungarian(&z).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(brute_force_match(&z).unwrap().pairs, a.pairs);
    }

    #[test]
    fn wide_matrix_picks_min_entry() {
        let c = CostMatrix::new(1, 3, vec![0.7, 0.2, 0.5]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(brute_force_match(&c).unwrap(), a);
    }

    #[test]
    fn tall_matrix_leaves_rows_unmatched() {
        // 3 rows, 1 column: only the cheapest-feasible lex assignment survives.
        let c = CostMatrix::new(3, 1, vec![0.9, 0.1, 0.5]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(brute_force_match(&c).unwrap(), a);
    }

    #[test]
    fn random_square_matches_brute_force_exactly() {
        for trial in 0..200 {
            let c = random_matrix(5, 5, trial);
            let h = hungarian(&c).unwrap();
            let b = brute_force_match(&c).unwrap();
            assert_eq!(h.pairs, b.pairs, "trial {trial}");
            assert_eq!(h.total_cost, b.total_cost, "trial {trial}");
        }
    }

    #[test]
    fn random_rectangular_matches_brute_force() {
        for trial in 0..100 {
            for &(m, n) in &[(3usize, 6usize), (6, 3), (4, 5), (7, 2), (1, 4)] {
                let c = random_matrix(m, n, 1000 + trial * 10 + (m * n) as u64);
                let h = hungarian(&c).unwrap();
                let b = brute_force_match(&c).unwrap();
                assert_eq!(h.pairs, b.pairs, "{m}x{n} trial {trial}");
                assert!((h.total_cost - b.total_cost).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn column_permutation_equivariance() {
        let c = random_matrix(6, 6, 424242);
        let a = hungarian(&c).unwrap();
        // rotate columns left by two
        let perm: Vec<usize> = (0..6).map(|j| (j + 2) % 6).collect();
        let mut permuted = vec![0.0; 36];
        for r in 0..6 {
            for (new_c, &old_c) in perm.iter().enumerate() {
                permuted[r * 6 + new_c] = c.at(r, old_c);
            }
        }
        let cp = CostMatrix::new(6, 6, permuted).unwrap();
        let ap = hungarian(&cp).unwrap();
        assert!((a.total_cost - ap.total_cost).abs() < 1e-12);
        // inverse map: new col j holds old col perm[j]
        for (&(r, c_old), &(rp, c_new)) in a.pairs.iter().zip(&ap.pairs) {
            assert_eq!(r, rp);
            assert_eq!(c_old, perm[c_new]);
        }
    }

    #[test]
    fn oracle_rejects_oversized_instances() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(
            brute_force_match(&c),
            Err(Error::OracleSize { got: 9, bound: 8 })
        ));
    }

    #[test]
    fn empty_matrix_is_an_input_error() {
        assert!(CostMatrix::new(0, 3, vec![]).is_err());
        assert!(CostMatrix::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn batch_matches_sequential_batch() {
        let ms: Vec<CostMatrix> = (0..20).map(|i| random_matrix(4, 4, 9000 + i)).collect();
        assert_eq!(match_batch(&ms).unwrap(), match_batch_seq(&ms).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn hungarian_equals_brute_force_up_to_8(
            m in 1usize..=8,
            n in 1usize..=8,
            seed in 0u64..u64::MAX,
        ) {
            let c = random_matrix(m, n, seed);
            let h = hungarian(&c).unwrap();
            let b = brute_force_match(&c).unwrap();
            prop_assert_eq!(h.pairs, b.pairs);
            prop_assert!((h.total_cost - b.total_cost).abs() < 1e-12);
        }
    }
}
