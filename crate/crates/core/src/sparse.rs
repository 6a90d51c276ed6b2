//! Compressed sparse row matrices for graph operators (Laplacians, pooling maps).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets. Duplicates are summed; column
    /// order within a row is ascending.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in per_row {
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
        Self { rows, cols, indptr, indices, values }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, &triplets)
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    /// Applies the operator to every `cols`-row block of `x` independently.
    ///
    /// `x` has `batch · cols` rows; the result has `batch · rows` rows.
    pub fn mul_batched(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let width = x.ncols();
        assert_eq!(x.nrows() % self.cols, 0, "batched rows must be a multiple of {}", self.cols);
        let batch = x.nrows() / self.cols;
        let mut out = Array2::zeros((batch * self.rows, width));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("fresh array");
        for b in 0..batch {
            for r in 0..self.rows {
                let orow = &mut os[(b * self.rows + r) * width..(b * self.rows + r + 1) * width];
                for (c, v) in self.row(r) {
                    let xrow = &xs[(b * self.cols + c) * width..(b * self.cols + c + 1) * width];
                    for (o, xv) in orow.iter_mut().zip(xrow) {
                        *o += v * xv;
                    }
                }
            }
        }
        out
    }
}
