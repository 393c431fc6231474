//! Compressed sparse row matrices and sparse × dense products.
//!
//! Weights are stored as `f32` (the on-disk precision of graph caches) and
//! widened to `f64` when multiplied against dense embeddings, so a matrix
//! loaded from disk behaves bit-identically to the one that was saved.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed; columns within a row end up sorted.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f32)],
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            if r >= n_rows {
                return Err(Error::IndexOutOfRange { index: r, len: n_rows });
            }
            if c >= n_cols {
                return Err(Error::IndexOutOfRange { index: c, len: n_cols });
            }
            rows[r].push((c as u32, v));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut iter = row.into_iter().peekable();
            while let Some((c, mut v)) = iter.next() {
                while let Some(&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    /// Assembles a matrix from raw CSR arrays, validating their structure.
    pub fn from_raw(
        n_rows: usize,
        n_cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        ensure_dim(n_rows + 1, indptr.len())?;
        ensure_dim(indices.len(), values.len())?;
        if indptr[0] != 0 || *indptr.last().unwrap() != indices.len() {
            return Err(Error::InvalidArgument("indptr does not span indices".into()));
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("indptr is not monotone".into()));
        }
        if let Some(&c) = indices.iter().find(|&&c| c as usize >= n_cols) {
            return Err(Error::IndexOutOfRange {
                index: c as usize,
                len: n_cols,
            });
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Column indices and weights of one row.
    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (start, end) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[start..end], &self.values[start..end])
    }

    /// Stored weight at `(r, c)`, or zero.
    pub fn get(&self, r: usize, c: usize) -> f32 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&(c as u32)) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).1.iter().map(|&v| v as f64).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0f32; self.nnz()];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c as usize];
                indices[slot] = r as u32;
                values[slot] = v;
                next[c as usize] += 1;
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c as usize]] = v as f64;
            }
        }
        out
    }

    /// `self · x` for a dense right-hand side. Rows are computed
    /// independently, so the result does not depend on thread count.
    pub fn matmul(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        ensure_dim(self.n_cols, x.nrows())?;
        let d = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((self.n_rows, d));
        if d == 0 {
            return Ok(out);
        }
        out.as_slice_mut()
            .expect("fresh array")
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(r, dst)| {
                let (cols, vals) = self.row(r);
                for (&c, &w) in cols.iter().zip(vals) {
                    let src = &xs[c as usize * d..(c as usize + 1) * d];
                    let w = w as f64;
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            });
        Ok(out)
    }

    /// Structural and value equality with the transpose.
    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && *self == self.transpose()
    }
}
