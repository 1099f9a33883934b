//! Compressed sparse row storage used by the assembler and the linear solvers.

use serde::{Deserialize, Serialize};

/// Square CSR matrix. `block_size` groups consecutive unknowns that belong
/// to the same grid cell so that orderings can permute whole cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub n: usize,
    pub block_size: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from unsorted triplets, summing duplicates.
    pub fn from_triplets(n: usize, block_size: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            rows[r].push((c, v));
        }
        Self::from_rows(n, block_size, rows)
    }

    pub(crate) fn from_rows(n: usize, block_size: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            block_size: block_size.max(1),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let trip: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, 1, &trip)
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut trip = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, 1, &trip)
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        out
    }

    /// Returns `P A P^T` where `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0usize; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let rows: Vec<Vec<(usize, f64)>> = perm
            .iter()
            .map(|&old| self.row(old).map(|(c, v)| (inv[c], v)).collect())
            .collect();
        Self::from_rows(self.n, self.block_size, rows)
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }

    /// Largest absolute entry of each row.
    pub fn row_max_abs(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).fold(0.0f64, |m, (_, v)| m.max(v.abs())))
            .collect()
    }

    /// True when some row or some column has no stored entries.
    pub fn has_empty_row_or_column(&self) -> bool {
        let mut col_seen = vec![false; self.n];
        for i in 0..self.n {
            if self.row_ptr[i] == self.row_ptr[i + 1] {
                return true;
            }
            for (j, _) in self.row(i) {
                col_seen[j] = true;
            }
        }
        col_seen.iter().any(|s| !s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0), (1, 1, 5.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn permutation_moves_entries() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let p = a.permuted(&[1, 0]);
        assert_eq!(p.to_dense(), vec![vec![4.0, 3.0], vec![2.0, 1.0]]);
    }

    #[test]
    fn empty_column_detected() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(a.has_empty_row_or_column());
        assert!(!CsrMatrix::identity(3).has_empty_row_or_column());
    }
}
