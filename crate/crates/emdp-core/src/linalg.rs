//! Sparse exact linear solving over rationals.
//!
//! The chain-analysis and policy-evaluation systems produced by counter
//! unfoldings are large but banded when unknowns are numbered level-major, so
//! the solver eliminates in natural column order and picks the sparsest pivot
//! row to limit fill-in.

use crate::numeric::Rat;
use num_traits::Zero;
use std::collections::BTreeMap;

pub type Row = BTreeMap<usize, Rat>;

/// Solves `A x = b` for square sparse `A`, returning `None` when singular.
pub fn solve(n: usize, mut rows: Vec<Row>, mut rhs: Vec<Rat>) -> Option<Vec<Rat>> {
    assert_eq!(rows.len(), n);
    assert_eq!(rhs.len(), n);
    // perm[k] = index of the row used as pivot for column k
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let pivot_pos = (k..n)
            .filter(|&p| rows[perm[p]].get(&k).is_some_and(|c| !c.is_zero()))
            .min_by_key(|&p| rows[perm[p]].len())?;
        perm.swap(k, pivot_pos);
        let pivot_row = perm[k];
        let pivot = rows[pivot_row][&k].clone();
        for p in k + 1..n {
            let r = perm[p];
            let Some(coeff) = rows[r].get(&k).cloned() else {
                continue;
            };
            if coeff.is_zero() {
                rows[r].remove(&k);
                continue;
            }
            let factor = coeff / &pivot;
            let updates: Vec<(usize, Rat)> = rows[pivot_row]
                .iter()
                .filter(|(c, _)| **c > k)
                .map(|(c, v)| (*c, v * &factor))
                .collect();
            for (c, delta) in updates {
                let entry = rows[r].entry(c).or_insert_with(Rat::zero);
                *entry -= delta;
                if entry.is_zero() {
                    rows[r].remove(&c);
                }
            }
            rows[r].remove(&k);
            let delta = &rhs[pivot_row] * &factor;
            rhs[r] -= delta;
        }
    }
    let mut x = vec![Rat::zero(); n];
    for k in (0..n).rev() {
        let row = perm[k];
        let mut acc = rhs[row].clone();
        for (c, v) in rows[row].iter().filter(|(c, _)| **c > k) {
            acc -= v * &x[*c];
        }
        x[k] = acc / &rows[row][&k];
    }
    Some(x)
}

/// Convenience builder for rows.
pub fn row(entries: impl IntoIterator<Item = (usize, Rat)>) -> Row {
    entries
        .into_iter()
        .filter(|(_, v)| !v.is_zero())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{rat, rat_int};

    #[test]
    fn solves_dense_system() {
        // 2x + y = 5, x - y = 1  =>  x = 2, y = 1
        let rows = vec![
            row([(0, rat_int(2)), (1, rat_int(1))]),
            row([(0, rat_int(1)), (1, rat_int(-1))]),
        ];
        let x = solve(2, rows, vec![rat_int(5), rat_int(1)]).unwrap();
        assert_eq!(x, vec![rat_int(2), rat_int(1)]);
    }

    #[test]
    fn reports_singular() {
        let rows = vec![
            row([(0, rat_int(1)), (1, rat_int(1))]),
            row([(0, rat_int(2)), (1, rat_int(2))]),
        ];
        assert!(solve(2, rows, vec![rat_int(1), rat_int(2)]).is_none());
    }

    #[test]
    fn solves_with_permuted_pivots() {
        // First column of first row is zero, forcing a swap.
        let rows = vec![
            row([(1, rat_int(3))]),
            row([(0, rat(1, 2))]),
        ];
        let x = solve(2, rows, vec![rat_int(6), rat_int(1)]).unwrap();
        assert_eq!(x, vec![rat_int(2), rat_int(2)]);
    }
}
