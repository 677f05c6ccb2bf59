//! Minimum-cost bipartite matching between ground-truth targets and query slots.

use crate::error::MatchError;

/// Costs indexed `[query, target]`, stored row-major by query.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n_queries: usize,
    n_targets: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_queries: usize, n_targets: usize, values: Vec<f64>) -> Result<Self, MatchError> {
        if values.len() != n_queries * n_targets {
            return Err(MatchError::InvalidAssignment(format!(
                "cost matrix has {} entries, expected {n_queries}x{n_targets}",
                values.len()
            )));
        }
        Ok(Self {
            n_queries,
            n_targets,
            values,
        })
    }

    /// Builds from rows indexed by query.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let n_targets = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_targets) {
            return Err(MatchError::InvalidAssignment("ragged cost matrix".into()));
        }
        Self::new(rows.len(), n_targets, rows.concat())
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn at(&self, query: usize, target: usize) -> f64 {
        self.values[query * self.n_targets + target]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n_queries: self.n_queries,
            n_targets: self.n_targets,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Injective map from targets to queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `query_for_target[t]` is the query matched to target `t`.
    pub query_for_target: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query_for_target.iter().copied().enumerate()
    }

    /// Target matched to each query, if any.
    pub fn target_for_query(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for (t, q) in self.pairs() {
            out[q] = Some(t);
        }
        out
    }

    /// Checks the assignment is injective over `n_queries` and covers `n_targets`.
    pub fn validate(&self, n_queries: usize, n_targets: usize) -> Result<(), MatchError> {
        if self.query_for_target.len() != n_targets {
            return Err(MatchError::InvalidAssignment(format!(
                "{} pairs for {n_targets} targets",
                self.query_for_target.len()
            )));
        }
        let mut used = vec![false; n_queries];
        for (t, q) in self.pairs() {
            if q >= n_queries {
                return Err(MatchError::InvalidAssignment(format!(
                    "target {t} mapped to query {q} of {n_queries}"
                )));
            }
            if std::mem::replace(&mut used[q], true) {
                return Err(MatchError::InvalidAssignment(format!("query {q} used twice")));
            }
        }
        Ok(())
    }
}

/// Hungarian algorithm (shortest augmenting paths with dual potentials),
/// `O(m^2 n)` for `m` targets and `n >= m` queries.
///
/// The column scan keeps the first strictly smaller reduced cost, so among
/// equal-cost augmenting choices lower query indices win; targets are
/// inserted in index order.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    let (n, m) = (cost.n_queries, cost.n_targets);
    if m > n {
        return Err(MatchError::TooManyTargets { targets: m, queries: n });
    }
    for q in 0..n {
        for t in 0..m {
            if !cost.at(q, t).is_finite() {
                return Err(MatchError::NonFinite { query: q, target: t });
            }
        }
    }
    if m == 0 {
        return Ok(Assignment {
            query_for_target: vec![],
            total_cost: 0.0,
        });
    }
    // 1-based rows (targets) and columns (queries); index 0 is the virtual column.
    let a = |row: usize, col: usize| cost.at(col - 1, row - 1);
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=m {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let row0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = a(row0, col) - u[row0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut query_for_target = vec![0; m];
    for col in 1..=n {
        if row_of_col[col] != 0 {
            query_for_target[row_of_col[col] - 1] = col - 1;
        }
    }
    let total_cost = query_for_target.iter().enumerate().map(|(t, &q)| cost.at(q, t)).sum();
    Ok(Assignment {
        query_for_target,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over injective target->query maps.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, t: usize, used: &mut Vec<bool>, acc: &mut Vec<usize>, best: &mut f64) {
            if t == cost.n_targets() {
                let c: f64 = acc.iter().enumerate().map(|(t, &q)| cost.at(q, t)).sum();
                if c < *best {
                    *best = c;
                }
                return;
            }
            for q in 0..cost.n_queries() {
                if !used[q] {
                    used[q] = true;
                    acc.push(q);
                    rec(cost, t + 1, used, acc, best);
                    acc.pop();
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.n_queries()], &mut vec![], &mut best);
        best
    }

    #[test]
    fn identity_favoring() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.query_for_target, vec![0, 1, 2]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        // rows are queries: entry(q0,t0)=4, (q0,t1)=1, (q1,t0)=2, (q1,t1)=3
        let c = CostMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.query_for_target, vec![1, 0]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn errors() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(
            hungarian(&c),
            Err(MatchError::TooManyTargets { targets: 2, queries: 1 })
        );
        let c = CostMatrix::from_rows(&[vec![1.0], vec![f64::NAN]]).unwrap();
        assert_eq!(hungarian(&c), Err(MatchError::NonFinite { query: 1, target: 0 }));
    }

    #[test]
    fn empty_targets() {
        let c = CostMatrix::new(4, 0, vec![]).unwrap();
        let a = hungarian(&c).unwrap();
        assert!(a.query_for_target.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn matches_brute_force_on_random_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let vals = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = CostMatrix::new(4, 4, vals).unwrap();
            let a = hungarian(&c).unwrap();
            a.validate(4, 4).unwrap();
            assert_eq!(a.total_cost, brute_force(&c));
        }
    }

    #[test]
    fn matches_brute_force_on_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.gen_range(1..=7);
            let m = rng.gen_range(0..=n);
            let vals = (0..n * m).map(|_| rng.gen_range(0.0..10.0)).collect();
            let c = CostMatrix::new(n, m, vals).unwrap();
            let a = hungarian(&c).unwrap();
            a.validate(n, m).unwrap();
            assert_eq!(a.total_cost, brute_force(&c));
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let vals = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c = CostMatrix::new(6, 5, vals).unwrap();
            let shift = rng.gen_range(-3.0..3.0);
            let a = hungarian(&c).unwrap();
            let b = hungarian(&c.map(|v| v + shift)).unwrap();
            assert_eq!(a.query_for_target, b.query_for_target);
        }
    }

    #[test]
    fn validate_rejects_bad_assignments() {
        let dup = Assignment {
            query_for_target: vec![1, 1],
            total_cost: 0.0,
        };
        assert!(dup.validate(3, 2).is_err());
        let short = Assignment {
            query_for_target: vec![0],
            total_cost: 0.0,
        };
        assert!(short.validate(3, 2).is_err());
        let oob = Assignment {
            query_for_target: vec![5],
            total_cost: 0.0,
        };
        assert!(oob.validate(3, 1).is_err());
    }
}
