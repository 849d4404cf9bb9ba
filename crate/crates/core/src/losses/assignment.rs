//! Minimum-cost assignment between output rows and label rows.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Up to this size the search enumerates every permutation.
pub const EXHAUSTIVE_MAX: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    /// `perm[i]` is the column (label row) assigned to row `i`.
    pub perm: Vec<usize>,
    /// `sum_i cost[i][perm[i]]`, accumulated in row order.
    pub cost: f64,
}

fn check_square(cost: &Matrix) -> Result<usize> {
    if cost.rows() != cost.cols() {
        return Err(Error::shape(
            "optimal_permutation",
            format!("cost matrix is {:?}, must be square", cost.shape()),
        ));
    }
    if !cost.all_finite() {
        return Err(Error::Contract("non-finite assignment cost".into()));
    }
    Ok(cost.rows())
}

fn total(cost: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Exhaustive search for S ≤ 6, Hungarian algorithm above.
pub fn optimal_permutation(cost: &Matrix) -> Result<PermutationResult> {
    let n = check_square(cost)?;
    if n <= EXHAUSTIVE_MAX {
        exhaustive_assignment(cost)
    } else {
        hungarian(cost)
    }
}

/// Enumerates permutations in lexicographic order and keeps the first
/// strict minimum, so ties resolve to the lexicographically smallest.
pub fn exhaustive_assignment(cost: &Matrix) -> Result<PermutationResult> {
    let n = check_square(cost)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = PermutationResult {
        cost: total(cost, &perm),
        perm: perm.clone(),
    };
    while next_permutation(&mut perm) {
        let c = total(cost, &perm);
        if c < best.cost {
            best = PermutationResult {
                perm: perm.clone(),
                cost: c,
            };
        }
    }
    Ok(best)
}

/// Advances to the next permutation in lexicographic order.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// O(n³) Hungarian algorithm with row/column potentials.
pub fn hungarian(cost: &Matrix) -> Result<PermutationResult> {
    let n = check_square(cost)?;
    if n == 0 {
        return Ok(PermutationResult {
            perm: Vec::new(),
            cost: 0.0,
        });
    }
    let inf = f64::INFINITY;
    // 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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

    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(PermutationResult {
        cost: total(cost, &perm),
        perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_cases() {
        let r = optimal_permutation(&Matrix::from_rows(&[[0.0, 9.0], [9.0, 0.0]])).unwrap();
        assert_eq!((r.perm, r.cost), (vec![0, 1], 0.0));
        let r = optimal_permutation(&Matrix::from_rows(&[[9.0, 0.0], [0.0, 9.0]])).unwrap();
        assert_eq!((r.perm, r.cost), (vec![1, 0], 0.0));
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let r = optimal_permutation(&Matrix::filled(3, 3, 1.0)).unwrap();
        assert_eq!(r.perm, vec![0, 1, 2]);
    }

    #[test]
    fn empty_and_non_square() {
        assert_eq!(optimal_permutation(&Matrix::zeros(0, 0)).unwrap().perm, Vec::<usize>::new());
        assert!(optimal_permutation(&Matrix::zeros(2, 3)).is_err());
        assert!(hungarian(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn lexicographic_enumeration_order() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(
            seen,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
    }

    #[test]
    fn large_instances_use_hungarian() {
        // anti-diagonal is free, everything else costs 1
        let n = 8;
        let mut c = Matrix::filled(n, n, 1.0);
        for i in 0..n {
            c[(i, n - 1 - i)] = 0.0;
        }
        let r = optimal_permutation(&c).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.perm, (0..n).rev().collect::<Vec<_>>());
    }
}
