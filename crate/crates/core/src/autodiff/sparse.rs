use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Compressed sparse row matrix with a per-row normalisation constant.
///
/// The effective entry `(i, j)` is `values[k] / norm[i]`. Rows without
/// entries carry `norm = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdj {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    norm: Vec<f64>,
}

impl SparseAdj {
    /// Builds from per-row `(col, value)` lists. Columns are sorted and must be unique.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>, norm: Vec<f64>) -> Result<Self> {
        if norm.len() != rows.len() {
            return Err(Error::contract("one normalisation constant per row required"));
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::contract(format!("duplicate column in row {i}")));
            }
            if let Some(&(j, _)) = row.last() {
                if j >= cols {
                    return Err(Error::contract(format!("column {j} out of bounds for {cols} columns")));
                }
                if !(norm[i] > 0.0) {
                    return Err(Error::contract(format!("row {i} has non-positive normalisation")));
                }
            }
            for (j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows: indptr.len() - 1, cols, indptr, indices, values, norm })
    }

    /// Mean aggregation: row `i` averages its neighbours, `c_i = |N_i|`.
    pub fn mean(n: usize, neighbors: impl Fn(usize) -> Vec<usize>) -> Result<Self> {
        let mut rows = Vec::with_capacity(n);
        let mut norm = Vec::with_capacity(n);
        for i in 0..n {
            let nb = neighbors(i);
            norm.push(if nb.is_empty() { 1.0 } else { nb.len() as f64 });
            rows.push(nb.into_iter().map(|j| (j, 1.0)).collect());
        }
        Self::from_rows(n, rows, norm)
    }

    /// Symmetric normalisation with self-loops, `D^-1/2 (A + I) D^-1/2`.
    pub fn gcn(n: usize, neighbors: impl Fn(usize) -> Vec<usize>) -> Result<Self> {
        let lists: Vec<Vec<usize>> = (0..n).map(&neighbors).collect();
        let deg: Vec<f64> = lists.iter().map(|l| l.len() as f64 + 1.0).collect();
        let mut rows = Vec::with_capacity(n);
        for (i, l) in lists.into_iter().enumerate() {
            let mut row: Vec<(usize, f64)> = l.into_iter().map(|j| (j, 1.0 / (deg[i] * deg[j]).sqrt())).collect();
            row.push((i, 1.0 / deg[i]));
            rows.push(row);
        }
        Self::from_rows(n, rows, vec![1.0; n])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn norm(&self) -> &[f64] {
        &self.norm
    }

    /// Effective entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let c = self.norm[i];
        (self.indptr[i]..self.indptr[i + 1]).map(move |k| (self.indices[k], self.values[k] / c))
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                t.set(i, j, v);
            }
        }
        t
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.cols {
            return Err(super::tensor::shape_error("sparse_matmul", [self.rows, self.cols], x.shape()));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows, d);
        for i in 0..self.rows {
            let orow = out.row_mut(i);
            for (j, v) in self.row(i) {
                for (o, &y) in orow.iter_mut().zip(x.row(j)) {
                    *o += v * y;
                }
            }
        }
        Ok(out)
    }

    /// `out += selfᵀ · g`.
    pub(crate) fn t_matmul_acc(&self, g: &Tensor, out: &mut Tensor) {
        for i in 0..self.rows {
            let grow = g.row(i);
            for (j, v) in self.row(i) {
                for (o, &y) in out.row_mut(j).iter_mut().zip(grow) {
                    *o += v * y;
                }
            }
        }
    }
}
