//! MoNet convolution, k-NN interpolation pooling and the Graph U-Net.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphdata::{GraphLevel, MeshGraph, F_IN, F_OUT};
use crate::rng::{stream, Domain};
use crate::tensor::{apply_sparse, edge_conv, no_record, EdgeIndex, SparseMap, Tensor, TensorError};

/// Distance below which a destination point takes the coinciding source value.
pub const EXACT_MATCH: f64 = 1e-12;
const CHECKPOINT_MAGIC: &[u8; 4] = b"MFP1";

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("pooling needs a non-empty source set")]
    EmptySource,
    #[error("k = {k} invalid for {n} source points")]
    InvalidK { k: usize, n: usize },
    #[error("model needs {need} graph levels, graph has {have}")]
    LevelMismatch { need: usize, have: usize },
    #[error("feature width {got}, layer expects {expected}")]
    Width { got: usize, expected: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, GnnError>;

/// `exp(−½ Σ_d (e_d − μ_d)² / σ_d)`.
pub fn gaussian_weight(e: [f64; 2], mu: [f64; 2], sigma: [f64; 2]) -> f64 {
    let d0 = e[0] - mu[0];
    let d1 = e[1] - mu[1];
    (-0.5 * (d0 * d0 / sigma[0] + d1 * d1 / sigma[1])).exp()
}

/// Inverse-distance weights from the `k` nearest sources of each destination.
/// Rows are destinations, columns sources.
pub fn knn_map(src: &[[f64; 2]], dst: &[[f64; 2]], k: usize) -> Result<SparseMap> {
    if src.is_empty() {
        return Err(GnnError::EmptySource);
    }
    if k == 0 || k > src.len() {
        return Err(GnnError::InvalidK { k, n: src.len() });
    }
    let mut rows = Vec::with_capacity(dst.len());
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(src.len());
    for &y in dst {
        cand.clear();
        cand.extend(src.iter().enumerate().map(|(i, &x)| {
            ((x[0] - y[0]).hypot(x[1] - y[1]), i as u32)
        }));
        let by_dist = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
        }
        cand.sort_by(by_dist);
        if cand[0].0 < EXACT_MATCH {
            rows.push(vec![(cand[0].1, 1.0)]);
            continue;
        }
        let total: f64 = cand.iter().map(|c| 1.0 / c.0).sum();
        rows.push(cand.iter().map(|c| (c.1, 1.0 / c.0 / total)).collect());
    }
    Ok(SparseMap::from_rows(src.len(), &rows)?)
}

/// Interpolates `[B·N_src, C]` features onto `dst_coords`.
pub fn knn_interp_pool(
    src_coords: &[[f64; 2]],
    src_feats: &Tensor,
    dst_coords: &[[f64; 2]],
    k: usize,
) -> Result<Tensor> {
    let map = Arc::new(knn_map(src_coords, dst_coords, k)?);
    Ok(apply_sparse(src_feats, &map, false)?)
}

/// Layer width, depth and kernel count of one U-Net block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub layers: usize,
    pub channels: usize,
    pub kernels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub block: BlockSpec,
    /// Number of pooling steps; the network has `2·depth + 1` blocks.
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block: BlockSpec {
                layers: 2,
                channels: 16,
                kernels: 5,
            },
            depth: 3,
            in_channels: F_IN,
            out_channels: F_OUT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.block;
        if b.layers == 0 || b.channels == 0 || b.kernels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(GnnError::Config("all sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        2 * self.depth + 1
    }

    /// Input width of every MoNet layer in registry order.
    fn layer_inputs(&self) -> Vec<usize> {
        let c = self.block.channels;
        let mut v = Vec::new();
        for b in 0..self.n_blocks() {
            let first = if b == 0 {
                self.in_channels
            } else if b > self.depth {
                2 * c
            } else {
                c
            };
            v.push(first);
            v.extend(std::iter::repeat_n(c, self.block.layers - 1));
        }
        v
    }

    /// `(name, shape)` of every registry entry, in order.
    pub fn registry_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k) = (self.block.channels, self.block.kernels);
        let mut out = Vec::new();
        for (l, fan_in) in self.layer_inputs().into_iter().enumerate() {
            out.push((format!("layer{l}.theta"), vec![fan_in, k * c]));
            for p in ["mu_x", "mu_y", "log_sigma_x", "log_sigma_y"] {
                out.push((format!("layer{l}.{p}"), vec![k]));
            }
        }
        out.push(("readout.weight".into(), vec![c, self.out_channels]));
        out.push(("readout.bias".into(), vec![self.out_channels]));
        out
    }

    pub fn n_layers(&self) -> usize {
        self.n_blocks() * self.block.layers
    }
}

/// Borrowed view of one MoNet layer's parameters. `theta` is
/// `[in, K·out]`: the `K` matrices `Θ_k` side by side.
#[derive(Clone)]
pub struct MoNetLayer {
    pub theta: Tensor,
    pub mu: [Tensor; 2],
    /// Log of the diagonal of `Σ_k`.
    pub log_sigma: [Tensor; 2],
    pub kernels: usize,
    pub out_channels: usize,
}

impl MoNetLayer {
    fn from_registry(params: &[Tensor], layer: usize, kernels: usize, out: usize) -> MoNetLayer {
        let p = &params[5 * layer..5 * layer + 5];
        MoNetLayer {
            theta: p[0].clone(),
            mu: [p[1].clone(), p[2].clone()],
            log_sigma: [p[3].clone(), p[4].clone()],
            kernels,
            out_channels: out,
        }
    }

    /// `[E, K]` kernel weights for edge attributes already divided by the level scale.
    pub fn edge_weights(&self, edge_attr: &[[f64; 2]], scale: f64) -> Result<Tensor> {
        let e = edge_attr.len();
        let k = self.kernels;
        let mut acc: Option<Tensor> = None;
        for d in 0..2 {
            let coord: Vec<f64> = edge_attr
                .iter()
                .flat_map(|a| std::iter::repeat_n(a[d] / scale, k))
                .collect();
            let coord = Tensor::constant(coord, &[e, k])?;
            let diff = coord.sub(&self.mu[d].broadcast_axis(0, e)?)?;
            let inv = self.log_sigma[d].neg().exp().broadcast_axis(0, e)?;
            let term = diff.square().mul(&inv)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.unwrap().scale(-0.5).exp())
    }
}

/// `x'_i = 1/|N(i)| Σ_{j∈N(i)} 1/K Σ_k w_k(e_ij) Θ_k x_j` for a `[B·N, in]` batch.
pub fn monet_conv(
    layer: &MoNetLayer,
    x: &Tensor,
    index: &Arc<EdgeIndex>,
    edge_attr: &[[f64; 2]],
    scale: f64,
) -> Result<Tensor> {
    let expected = layer.theta.shape()[0];
    let got = x.shape().get(1).copied().unwrap_or(0);
    if got != expected {
        return Err(GnnError::Width { got, expected });
    }
    let w = layer.edge_weights(edge_attr, scale)?;
    let xw = x.matmul(&layer.theta)?;
    Ok(edge_conv(&xw, &w, index, layer.kernels, layer.out_channels)?)
}

fn conv_level(layer: &MoNetLayer, x: &Tensor, level: &GraphLevel) -> Result<Tensor> {
    monet_conv(layer, x, level.index(), &level.edge_attr, level.mean_edge_len())
}

/// Predictions `[B·N₀, out]` for a `[B·N₀, in]` input batch on `graph`.
pub fn unet_forward(
    cfg: &ModelConfig,
    params: &[Tensor],
    graph: &MeshGraph,
    input: &Tensor,
) -> Result<Tensor> {
    let need = cfg.depth + 1;
    if graph.n_levels() < need {
        return Err(GnnError::LevelMismatch {
            need,
            have: graph.n_levels(),
        });
    }
    let layout_len = 5 * cfg.n_layers() + 2;
    if params.len() != layout_len {
        return Err(GnnError::Config(format!(
            "registry has {} tensors, config needs {layout_len}",
            params.len()
        )));
    }
    let (c, k, per) = (cfg.block.channels, cfg.block.kernels, cfg.block.layers);
    let mut layer_id = 0;
    let mut run_block = |mut h: Tensor, level: &GraphLevel| -> Result<Tensor> {
        for _ in 0..per {
            let layer = MoNetLayer::from_registry(params, layer_id, k, c);
            h = conv_level(&layer, &h, level)?.elu();
            layer_id += 1;
        }
        Ok(h)
    };
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = input.clone();
    for lvl in 0..cfg.depth {
        h = run_block(h, &graph.levels[lvl])?;
        skips.push(h.clone());
        h = apply_sparse(&h, graph.down(lvl), false)?;
    }
    h = run_block(h, &graph.levels[cfg.depth])?;
    for lvl in (0..cfg.depth).rev() {
        h = apply_sparse(&h, graph.up(lvl), false)?;
        h = h.concat_cols(&skips[lvl])?;
        h = run_block(h, &graph.levels[lvl])?;
    }
    let w = &params[layout_len - 2];
    let b = &params[layout_len - 1];
    let rows = h.shape()[0];
    Ok(h.matmul(w)?.add(&b.broadcast_axis(0, rows)?)?)
}

/// Model configuration plus the flat parameter registry θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphUNet {
    pub config: ModelConfig,
    pub params: Vec<Vec<f64>>,
}

impl GraphUNet {
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.config.registry_layout()
    }

    /// Fresh trainable leaves holding the current values.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout()
            .iter()
            .zip(&self.params)
            .map(|((_, s), v)| Tensor::param(v.clone(), s).expect("registry shape"))
            .collect()
    }

    pub fn set_from(&mut self, tensors: &[Tensor]) {
        for (p, t) in self.params.iter_mut().zip(tensors) {
            p.copy_from_slice(t.data());
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Inference without recording.
    pub fn predict(&self, graph: &MeshGraph, input: &[f64]) -> Result<Vec<f64>> {
        no_record(|| {
            let rows = input.len() / self.config.in_channels;
            let x = Tensor::constant(input.to_vec(), &[rows, self.config.in_channels])?;
            let params: Vec<Tensor> = self
                .layout()
                .iter()
                .zip(&self.params)
                .map(|((_, s), v)| Tensor::constant(v.clone(), s))
                .collect::<std::result::Result<_, _>>()?;
            Ok(unet_forward(&self.config, &params, graph, &x)?.data().to_vec())
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let echo = serde_json::to_vec(&self.config).expect("config serializes");
        buf.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        buf.extend_from_slice(&echo);
        buf.extend_from_slice(&(self.n_scalars() as u64).to_le_bytes());
        for v in self.params.iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        fs::write(path, buf).map_err(|e| ckpt_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<GraphUNet> {
        let buf = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
        if buf.len() < 24 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(ckpt_err(path, "not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(ckpt_err(path, "checksum mismatch".into()));
        }
        let echo_len = u64::from_le_bytes(body[4..12].try_into().unwrap()) as usize;
        let echo = body
            .get(12..12 + echo_len)
            .ok_or_else(|| ckpt_err(path, "truncated".into()))?;
        let config: ModelConfig =
            serde_json::from_slice(echo).map_err(|e| ckpt_err(path, e.to_string()))?;
        config.validate()?;
        let mut pos = 12 + echo_len;
        let n = u64::from_le_bytes(
            body.get(pos..pos + 8)
                .ok_or_else(|| ckpt_err(path, "truncated".into()))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 8;
        let layout = config.registry_layout();
        let expect: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if n != expect || body.len() != pos + 8 * n {
            return Err(ckpt_err(path, format!("{n} values, config needs {expect}")));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (_, s) in &layout {
            let len: usize = s.iter().product();
            params.push(
                body[pos..pos + 8 * len]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            pos += 8 * len;
        }
        Ok(GraphUNet { config, params })
    }
}

fn ckpt_err(path: &Path, msg: String) -> GnnError {
    GnnError::Checkpoint {
        path: path.display().to_string(),
        msg,
    }
}

/// Glorot-uniform matrices, `μ ~ U[−½, ½]`, `log σ = 0`, zero bias. Kernel
/// parameters live in units of each level's mean edge length.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<GraphUNet> {
    config.validate()?;
    let mut rng = stream(seed, Domain::ModelInit, 0);
    let c = config.block.channels;
    let mut params = Vec::new();
    for (name, shape) in config.registry_layout() {
        let len: usize = shape.iter().product();
        let v: Vec<f64> = if name.ends_with("theta") {
            let limit = (6.0 / (shape[0] + c) as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
        } else if name.ends_with("readout.weight") {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
        } else if name.contains(".mu_") {
            (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
        } else {
            vec![0.0; len]
        };
        params.push(v);
    }
    Ok(GraphUNet {
        config: *config,
        params,
    })
}
