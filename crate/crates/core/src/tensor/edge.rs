//! Fused message-passing operations for kernel-weighted graph convolution.
//!
//! Three bilinear maps share one edge structure:
//!
//! * `edge_conv(xw, w)`: `y[b,i,c] = Σ_{e: i←j} s_e Σ_k w[e,k] xw[b,j,k·C+c]`
//! * `edge_conv_t(g, w)`: the adjoint of `edge_conv` in its first argument
//! * `edge_weight_grad(xw, g)`: the adjoint of `edge_conv` in its second argument
//!
//! with `s_e = 1 / (K |N(i)|)`. The backward rule of each map is expressed
//! through the other two, so the family is closed under differentiation.

use std::sync::Arc;

use super::{Backward, Result, Tensor, TensorError};

/// Directed edge list with per-target normalization and adjacency in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    n_nodes: usize,
    targets: Vec<u32>,
    sources: Vec<u32>,
    inv_degree: Vec<f64>,
    in_ptr: Vec<usize>,
    in_edges: Vec<u32>,
    out_ptr: Vec<usize>,
    out_edges: Vec<u32>,
}

fn csr(n: usize, keys: &[u32]) -> (Vec<usize>, Vec<u32>) {
    let mut ptr = vec![0usize; n + 1];
    for &k in keys {
        ptr[k as usize + 1] += 1;
    }
    for i in 0..n {
        ptr[i + 1] += ptr[i];
    }
    let mut fill = ptr.clone();
    let mut list = vec![0u32; keys.len()];
    for (e, &k) in keys.iter().enumerate() {
        list[fill[k as usize]] = e as u32;
        fill[k as usize] += 1;
    }
    (ptr, list)
}

impl EdgeIndex {
    /// `edges[e] = (i, j)` means `j ∈ N(i)`: a message flows from `j` into `i`.
    pub fn new(n_nodes: usize, edges: &[(u32, u32)]) -> Result<EdgeIndex> {
        if let Some(&(i, j)) = edges
            .iter()
            .find(|(i, j)| *i as usize >= n_nodes || *j as usize >= n_nodes)
        {
            return Err(TensorError::ShapeMismatch {
                op: "edge_index",
                left: vec![i as usize, j as usize],
                right: vec![n_nodes],
            });
        }
        let targets: Vec<u32> = edges.iter().map(|e| e.0).collect();
        let sources: Vec<u32> = edges.iter().map(|e| e.1).collect();
        let (in_ptr, in_edges) = csr(n_nodes, &targets);
        let (out_ptr, out_edges) = csr(n_nodes, &sources);
        let inv_degree = (0..n_nodes)
            .map(|i| {
                let d = in_ptr[i + 1] - in_ptr[i];
                if d == 0 {
                    0.0
                } else {
                    1.0 / d as f64
                }
            })
            .collect();
        Ok(EdgeIndex {
            n_nodes,
            targets,
            sources,
            inv_degree,
            in_ptr,
            in_edges,
            out_ptr,
            out_edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        (self.targets[e] as usize, self.sources[e] as usize)
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.in_ptr[i + 1] - self.in_ptr[i]
    }

    fn scale(&self, e: usize, kernels: usize) -> f64 {
        self.inv_degree[self.targets[e] as usize] / kernels as f64
    }
}

#[derive(Clone)]
struct Dims {
    index: Arc<EdgeIndex>,
    kernels: usize,
    channels: usize,
}

impl Dims {
    fn batch(&self, rows: usize, op: &'static str) -> Result<usize> {
        let n = self.index.n_nodes;
        if n == 0 || !rows.is_multiple_of(n) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![rows],
                right: vec![n],
            });
        }
        Ok(rows / n)
    }

    fn check(&self, t: &Tensor, cols: usize, op: &'static str) -> Result<usize> {
        let (r, c) = t.rows_cols(op)?;
        if c != cols {
            return Err(TensorError::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![r, cols],
            });
        }
        self.batch(r, op)
    }

    fn check_weights(&self, w: &Tensor, op: &'static str) -> Result<()> {
        if w.shape() != [self.index.n_edges(), self.kernels] {
            return Err(TensorError::ShapeMismatch {
                op,
                left: w.shape().to_vec(),
                right: vec![self.index.n_edges(), self.kernels],
            });
        }
        Ok(())
    }
}

struct ConvBackward(Dims);
struct ConvTBackward(Dims);
struct WeightGradBackward(Dims);

impl Backward for ConvBackward {
    fn backward(&self, _out: &Tensor, g: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let (xw, w) = (&p[0], &p[1]);
        let d = &self.0;
        vec![
            xw.requires_grad()
                .then(|| edge_conv_t(g, w, &d.index, d.kernels, d.channels).unwrap()),
            w.requires_grad()
                .then(|| edge_weight_grad(xw, g, &d.index, d.kernels, d.channels).unwrap()),
        ]
    }
}

impl Backward for ConvTBackward {
    fn backward(&self, _out: &Tensor, gz: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let (g, w) = (&p[0], &p[1]);
        let d = &self.0;
        vec![
            g.requires_grad()
                .then(|| edge_conv(gz, w, &d.index, d.kernels, d.channels).unwrap()),
            w.requires_grad()
                .then(|| edge_weight_grad(gz, g, &d.index, d.kernels, d.channels).unwrap()),
        ]
    }
}

impl Backward for WeightGradBackward {
    fn backward(&self, _out: &Tensor, ge: &Tensor, p: &[Tensor]) -> Vec<Option<Tensor>> {
        let (xw, g) = (&p[0], &p[1]);
        let d = &self.0;
        vec![
            xw.requires_grad()
                .then(|| edge_conv_t(g, ge, &d.index, d.kernels, d.channels).unwrap()),
            g.requires_grad()
                .then(|| edge_conv(xw, ge, &d.index, d.kernels, d.channels).unwrap()),
        ]
    }
}

/// Kernel-weighted mean aggregation: `[B·N, K·C] × [E, K] -> [B·N, C]`.
pub fn edge_conv(
    xw: &Tensor,
    w: &Tensor,
    index: &Arc<EdgeIndex>,
    kernels: usize,
    channels: usize,
) -> Result<Tensor> {
    let d = Dims {
        index: index.clone(),
        kernels,
        channels,
    };
    let batch = d.check(xw, kernels * channels, "edge_conv")?;
    d.check_weights(w, "edge_conv")?;
    let n = index.n_nodes;
    let (kc, c) = (kernels * channels, channels);
    let (x, wd) = (xw.data(), w.data());
    let mut out = vec![0.0; batch * n * c];
    for b in 0..batch {
        for i in 0..n {
            let dst = &mut out[(b * n + i) * c..(b * n + i + 1) * c];
            for &e in &index.in_edges[index.in_ptr[i]..index.in_ptr[i + 1]] {
                let e = e as usize;
                let j = index.sources[e] as usize;
                let s = index.scale(e, kernels);
                let src = &x[(b * n + j) * kc..(b * n + j + 1) * kc];
                for k in 0..kernels {
                    let coef = s * wd[e * kernels + k];
                    for (o, v) in dst.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                        *o += coef * v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![batch * n, c],
        &[xw, w],
        ConvBackward(d),
    ))
}

/// Adjoint of [`edge_conv`] in its feature argument: `[B·N, C] × [E, K] -> [B·N, K·C]`.
pub fn edge_conv_t(
    g: &Tensor,
    w: &Tensor,
    index: &Arc<EdgeIndex>,
    kernels: usize,
    channels: usize,
) -> Result<Tensor> {
    let d = Dims {
        index: index.clone(),
        kernels,
        channels,
    };
    let batch = d.check(g, channels, "edge_conv_t")?;
    d.check_weights(w, "edge_conv_t")?;
    let n = index.n_nodes;
    let (kc, c) = (kernels * channels, channels);
    let (gd, wd) = (g.data(), w.data());
    let mut out = vec![0.0; batch * n * kc];
    for b in 0..batch {
        for j in 0..n {
            let dst = &mut out[(b * n + j) * kc..(b * n + j + 1) * kc];
            for &e in &index.out_edges[index.out_ptr[j]..index.out_ptr[j + 1]] {
                let e = e as usize;
                let i = index.targets[e] as usize;
                let s = index.scale(e, kernels);
                let src = &gd[(b * n + i) * c..(b * n + i + 1) * c];
                for k in 0..kernels {
                    let coef = s * wd[e * kernels + k];
                    for (o, v) in dst[k * c..(k + 1) * c].iter_mut().zip(src) {
                        *o += coef * v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![batch * n, kc],
        &[g, w],
        ConvTBackward(d),
    ))
}

/// Adjoint of [`edge_conv`] in its weight argument: `[B·N, K·C] × [B·N, C] -> [E, K]`.
pub fn edge_weight_grad(
    xw: &Tensor,
    g: &Tensor,
    index: &Arc<EdgeIndex>,
    kernels: usize,
    channels: usize,
) -> Result<Tensor> {
    let d = Dims {
        index: index.clone(),
        kernels,
        channels,
    };
    let batch = d.check(xw, kernels * channels, "edge_weight_grad")?;
    let batch_g = d.check(g, channels, "edge_weight_grad")?;
    if batch != batch_g {
        return Err(TensorError::ShapeMismatch {
            op: "edge_weight_grad",
            left: xw.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    let n = index.n_nodes;
    let (kc, c) = (kernels * channels, channels);
    let (x, gd) = (xw.data(), g.data());
    let n_edges = index.n_edges();
    let mut out = vec![0.0; n_edges * kernels];
    for e in 0..n_edges {
        let i = index.targets[e] as usize;
        let j = index.sources[e] as usize;
        let s = index.scale(e, kernels);
        for b in 0..batch {
            let xs = &x[(b * n + j) * kc..(b * n + j + 1) * kc];
            let gs = &gd[(b * n + i) * c..(b * n + i + 1) * c];
            for k in 0..kernels {
                let dot: f64 = xs[k * c..(k + 1) * c]
                    .iter()
                    .zip(gs)
                    .map(|(a, b)| a * b)
                    .sum();
                out[e * kernels + k] += dot;
            }
        }
        for k in 0..kernels {
            out[e * kernels + k] *= s;
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n_edges, kernels],
        &[xw, g],
        WeightGradBackward(d),
    ))
}
