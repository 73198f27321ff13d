//! Minimal compressed-sparse-row matrix for the network penalties.

use std::collections::BTreeMap;

use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Assembles from `(row, col, value)` triplets; duplicates are summed
    /// and explicit zeros dropped.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, T)>,
    ) -> Self {
        let mut rows: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); n_rows];
        for (i, j, v) in triplets {
            assert!(i < n_rows && j < n_cols, "triplet ({i}, {j}) out of bounds");
            *rows[i].entry(j).or_insert_with(T::zero) += v;
        }
        let mut m = Self::zeros(n_rows, n_cols);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row {
                if v != T::zero() {
                    m.indices.push(j);
                    m.data.push(v);
                }
            }
            m.indptr[i + 1] = m.indices.len();
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, T::one())))
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.data[r].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.row(i)
            .find(|(c, _)| *c == j)
            .map_or_else(T::zero, |(_, v)| v)
    }

    pub fn row_sum(&self, i: usize) -> T {
        self.row(i).map(|(_, v)| v).sum()
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(x.len(), self.n_rows);
        (0..self.n_rows)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<T>())
            .sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(
            self.n_cols,
            self.n_rows,
            self.triplets().map(|(i, j, v)| (j, i, v)),
        )
    }

    /// `A^T A`, accumulated row by row of `A`.
    pub fn gram(&self) -> Self {
        let mut trips = Vec::new();
        for i in 0..self.n_rows {
            let row: Vec<(usize, T)> = self.row(i).collect();
            for &(j, a) in &row {
                for &(k, b) in &row {
                    trips.push((j, k, a * b));
                }
            }
        }
        Self::from_triplets(self.n_cols, self.n_cols, trips)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.n_rows == self.n_cols
            && self
                .triplets()
                .all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.n_cols]; self.n_rows];
        for (i, j, v) in self.triplets() {
            out[i][j] = v;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> CsrMatrix<U> {
        CsrMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_drop_zeros() {
        let m = CsrMatrix::<f64>::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.0)]);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn gram_matches_dense_product() {
        let a = CsrMatrix::<f64>::from_triplets(3, 2, [(0, 0, 1.0), (0, 1, 2.0), (2, 1, -1.0)]);
        let g = a.gram().to_dense();
        assert_eq!(g, vec![vec![1.0, 2.0], vec![2.0, 5.0]]);
        assert_eq!(a.transpose().get(1, 2), -1.0);
    }

    #[test]
    fn quad_form_matches_matvec() {
        let a = CsrMatrix::<f64>::from_triplets(2, 2, [(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 3.0)]);
        let x = [1.5, -2.0];
        let ax = a.matvec(&x);
        let direct: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
        assert!((a.quad_form(&x) - direct).abs() < 1e-14);
        assert!(a.is_symmetric(0.0));
    }
}
