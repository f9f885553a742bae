//! Constant sparse linear maps applied blockwise to batched node features.

use std::sync::Arc;

use super::{Backward, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
struct Csr {
    rows: usize,
    cols: usize,
    ptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl Csr {
    fn transpose(&self) -> Csr {
        let mut ptr = vec![0usize; self.cols + 1];
        for &c in &self.idx {
            ptr[c as usize + 1] += 1;
        }
        for c in 0..self.cols {
            ptr[c + 1] += ptr[c];
        }
        let mut fill = ptr.clone();
        let mut idx = vec![0u32; self.idx.len()];
        let mut val = vec![0.0; self.val.len()];
        for r in 0..self.rows {
            for p in self.ptr[r]..self.ptr[r + 1] {
                let c = self.idx[p] as usize;
                idx[fill[c]] = r as u32;
                val[fill[c]] = self.val[p];
                fill[c] += 1;
            }
        }
        Csr {
            rows: self.cols,
            cols: self.rows,
            ptr,
            idx,
            val,
        }
    }
}

/// A fixed `rows × cols` matrix and its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    fwd: Csr,
    bwd: Csr,
}

impl SparseMap {
    /// Builds the map from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(u32, f64)>]) -> Result<SparseMap> {
        let mut ptr = Vec::with_capacity(rows.len() + 1);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        ptr.push(0);
        for row in rows {
            for &(c, v) in row {
                if c as usize >= cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "sparse_map",
                        left: vec![c as usize],
                        right: vec![cols],
                    });
                }
                idx.push(c);
                val.push(v);
            }
            ptr.push(idx.len());
        }
        let fwd = Csr {
            rows: rows.len(),
            cols,
            ptr,
            idx,
            val,
        };
        let bwd = fwd.transpose();
        Ok(SparseMap { fwd, bwd })
    }

    pub fn rows(&self) -> usize {
        self.fwd.rows
    }

    pub fn cols(&self) -> usize {
        self.fwd.cols
    }

    /// Nonzeros of row `r` as `(column, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.fwd.ptr[r], self.fwd.ptr[r + 1]);
        self.fwd.idx[a..b]
            .iter()
            .zip(&self.fwd.val[a..b])
            .map(|(&c, &v)| (c as usize, v))
    }
}

struct SparseBackward {
    map: Arc<SparseMap>,
    transposed: bool,
}

impl Backward for SparseBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, _p: &[Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(apply_sparse(g, &self.map, !self.transposed).unwrap())]
    }
}

/// Applies the map (or its transpose) to each of the `B` row blocks of `x`.
pub fn apply_sparse(x: &Tensor, map: &Arc<SparseMap>, transposed: bool) -> Result<Tensor> {
    let m = if transposed { &map.bwd } else { &map.fwd };
    let (rows, c) = x.rows_cols("sparse_map")?;
    if m.cols == 0 || rows % m.cols != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "sparse_map",
            left: x.shape().to_vec(),
            right: vec![m.rows, m.cols],
        });
    }
    let batch = rows / m.cols;
    let xd = x.data();
    let mut out = vec![0.0; batch * m.rows * c];
    for b in 0..batch {
        for r in 0..m.rows {
            let dst = &mut out[(b * m.rows + r) * c..(b * m.rows + r + 1) * c];
            for p in m.ptr[r]..m.ptr[r + 1] {
                let col = m.idx[p] as usize;
                let v = m.val[p];
                let src = &xd[(b * m.cols + col) * c..(b * m.cols + col + 1) * c];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![batch * m.rows, c],
        &[x],
        SparseBackward {
            map: map.clone(),
            transposed,
        },
    ))
}
