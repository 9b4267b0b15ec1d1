use crate::error::{Error, Result};
use crate::numerics::Scalar;

use super::CostMatrix;

/// Optimal permutation coupling for equal-size uniform measures.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution<T> {
    /// `(1/n) * sum_i C[i][assignment[i]]`.
    pub value: T,
    /// Row `i` is matched to column `assignment[i]`.
    pub assignment: Vec<usize>,
}

/// Largest problem accepted by [`exact_ot_uniform`].
pub const EXACT_MAX_N: usize = 64;

/// Exact OT between two uniform measures of equal size. With uniform
/// weights a permutation coupling is optimal, so this reduces to linear
/// assignment.
pub fn exact_ot_uniform<T: Scalar>(cost: &CostMatrix<T>) -> Result<ExactSolution<T>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape("exact_ot_uniform", format!("needs a square cost, got {}x{}", n, cost.cols())));
    }
    if n > EXACT_MAX_N {
        return Err(Error::Invalid(format!("exact_ot_uniform supports n <= {EXACT_MAX_N}, got {n}")));
    }
    let assignment = hungarian(n, cost.values());
    let total: T = assignment.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(ExactSolution { value: total / T::from_usize(n).unwrap(), assignment })
}

/// Minimum-cost perfect matching on a dense `n x n` row-major cost table.
///
/// Shortest augmenting path with row/column potentials, `O(n^3)`.
pub fn hungarian<T: Scalar>(n: usize, cost: &[T]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    let inf = T::infinity();
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}
