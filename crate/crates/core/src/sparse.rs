//! Row-sparse nonnegative `n × s` matrices (CSR layout).

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Row-sparse matrix with nonnegative entries and strictly increasing column
/// indices within each row. Explicit zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCrossMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCrossMatrix {
    /// Build from per-row `(column, value)` lists. Zero entries are skipped;
    /// columns may arrive in any order but must not repeat.
    pub fn from_rows<I>(ncols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(invalid(format!("row {i}: duplicate column {}", w[0].0)));
                }
            }
            for (j, v) in row {
                if j >= ncols {
                    return Err(invalid(format!("row {i}: column {j} out of range {ncols}")));
                }
                if !(v.is_finite() && v >= 0.0) {
                    return Err(invalid(format!("row {i}: entry {v} is not finite and nonnegative")));
                }
                if v > 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self { nrows: indptr.len() - 1, ncols, indptr, indices, values })
    }

    /// Same pattern, new values (must have matching length).
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { values, ..self.clone() }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Column sums, accumulated in row order (bit-reproducible).
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.ncols];
        for (j, v) in self.indices.iter().zip(&self.values) {
            sums[*j] += v;
        }
        sums
    }

    /// Whether every row has at least one (strictly positive) entry.
    pub fn rows_nonempty(&self) -> bool {
        self.indptr.windows(2).all(|w| w[1] > w[0])
    }

    /// `self · x` for `x` of length `ncols`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    /// `selfᵀ · y` for `y` of length `nrows`.
    pub fn tmul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += v * yi;
            }
        }
        out
    }

    /// `self · X` for a dense `ncols × b` block.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let b = x.ncols();
        let mut out = DMatrix::zeros(self.nrows, b);
        for c in 0..b {
            let xc = x.column(c);
            let mut oc = out.column_mut(c);
            for i in 0..self.nrows {
                let (cols, vals) = self.row(i);
                oc[i] = cols.iter().zip(vals).map(|(&j, &v)| v * xc[j]).sum();
            }
        }
        out
    }

    /// `selfᵀ · Y` for a dense `nrows × b` block.
    pub fn tmul_dense(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let b = y.ncols();
        let mut out = DMatrix::zeros(self.ncols, b);
        for c in 0..b {
            let yc = y.column(c);
            let mut oc = out.column_mut(c);
            for i in 0..self.nrows {
                let yi = yc[i];
                let (cols, vals) = self.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    oc[j] += v * yi;
                }
            }
        }
        out
    }

    /// Scale each column `j` by `scale[j]`.
    pub fn scale_columns(&self, scale: &[f64]) -> Self {
        let values = self.indices.iter().zip(&self.values).map(|(&j, &v)| v * scale[j]).collect();
        self.with_values(values)
    }

    /// Scale each row `i` by `scale[i]`.
    pub fn scale_rows(&self, scale: &[f64]) -> Self {
        let mut values = self.values.clone();
        for i in 0..self.nrows {
            for v in &mut values[self.indptr[i]..self.indptr[i + 1]] {
                *v *= scale[i];
            }
        }
        self.with_values(values)
    }

    /// Keep only the columns flagged in `keep`, renumbered in order.
    pub fn retain_columns(&self, keep: &[bool]) -> Self {
        let mut remap = vec![usize::MAX; self.ncols];
        let mut next = 0;
        for (j, &k) in keep.iter().enumerate() {
            if k {
                remap[j] = next;
                next += 1;
            }
        }
        let mut indptr = vec![0];
        let mut indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if keep[j] {
                    indices.push(remap[j]);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { nrows: self.nrows, ncols: next, indptr, indices, values }
    }

    /// Dense copy; for tests and small oracles.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseCrossMatrix {
        SparseCrossMatrix::from_rows(3, vec![vec![(2, 1.0), (0, 2.0)], vec![(1, 0.5)], vec![(1, 0.0), (2, 3.0)]])
            .unwrap()
    }

    #[test]
    fn rows_are_sorted_and_zeros_dropped() {
        let a = sample();
        assert_eq!(a.row(0), (&[0usize, 2][..], &[2.0, 1.0][..]));
        assert_eq!(a.row(2), (&[2usize][..], &[3.0][..]));
        assert_eq!(a.nnz(), 4);
        assert!(a.rows_nonempty());
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(SparseCrossMatrix::from_rows(2, vec![vec![(0, -1.0)]]).is_err());
        assert!(SparseCrossMatrix::from_rows(2, vec![vec![(2, 1.0)]]).is_err());
        assert!(SparseCrossMatrix::from_rows(2, vec![vec![(1, 1.0), (1, 2.0)]]).is_err());
        assert!(SparseCrossMatrix::from_rows(2, vec![vec![(1, f64::NAN)]]).is_err());
    }

    #[test]
    fn products_match_dense() {
        let a = sample();
        let d = a.to_dense();
        let x = [1.0, -2.0, 0.5];
        let y = [0.3, 1.0, -1.0];
        let ax = a.mul_vec(&x);
        let aty = a.tmul_vec(&y);
        let dx = &d * nalgebra::DVector::from_column_slice(&x);
        let dty = d.transpose() * nalgebra::DVector::from_column_slice(&y);
        for i in 0..3 {
            assert!((ax[i] - dx[i]).abs() < 1e-15);
            assert!((aty[i] - dty[i]).abs() < 1e-15);
        }
        let xb = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.0);
        assert!((a.mul_dense(&xb) - &d * &xb).abs().max() < 1e-15);
        assert!((a.tmul_dense(&xb) - d.transpose() * &xb).abs().max() < 1e-15);
        assert_eq!(a.col_sums(), vec![2.0, 0.5, 4.0]);
        assert_eq!(a.row_sums(), vec![3.0, 0.5, 3.0]);
    }

    #[test]
    fn retain_columns_renumbers() {
        let a = sample().retain_columns(&[true, false, true]);
        assert_eq!(a.ncols(), 2);
        assert_eq!(a.row(0), (&[0usize, 1][..], &[2.0, 1.0][..]));
        assert_eq!(a.row(1).0.len(), 0);
        assert!(!a.rows_nonempty());
    }
}
