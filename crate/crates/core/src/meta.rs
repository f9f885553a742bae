//! MAML with the multi-step loss, meta-test fine-tuning and the supervised baselines.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{unet_forward, GnnError, GraphUNet, ModelConfig};
use crate::graphdata::{Task, F_IN, F_OUT};
use crate::rng::{stream, Domain};
use crate::tensor::{grad_with, no_record, GradOptions, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error("empty index set")]
    EmptyIndices,
    #[error("no tasks to train on")]
    NoTasks,
    #[error("{0} MSL weights for {1} inner steps")]
    WeightLength(usize, usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, task {task}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        task: usize,
    },
}

pub type Result<T> = std::result::Result<T, MetaError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Weight of the test loss after each inner step; empty means uniform.
    pub msl_weights: Vec<f64>,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub second_order: bool,
    /// Global-norm clipping threshold for inner and outer gradients.
    pub clip_norm: f64,
    /// Tasks per meta-update; 0 means all meta-train tasks.
    pub task_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 0.01,
            outer_lr: 5e-4,
            inner_steps: 3,
            msl_weights: Vec::new(),
            epochs: 600,
            lr_decay: 0.5,
            lr_decay_every: 500,
            second_order: true,
            clip_norm: 10.0,
            task_batch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> Vec<f64> {
        if self.msl_weights.is_empty() {
            vec![1.0 / self.inner_steps as f64; self.inner_steps]
        } else {
            self.msl_weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0) || !(self.outer_lr > 0.0) {
            return Err(MetaError::Config("learning rates must be positive".into()));
        }
        if self.inner_steps == 0 {
            return Err(MetaError::Config("inner_steps must be at least 1".into()));
        }
        let w = self.weights();
        if w.len() != self.inner_steps {
            return Err(MetaError::WeightLength(w.len(), self.inner_steps));
        }
        if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MetaError::Config("MSL weights must be nonnegative and sum to 1".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(MetaError::Config("clip_norm, lr_decay and lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// Outer learning rate after step decay.
    pub fn outer_lr_at(&self, epoch: usize) -> f64 {
        self.outer_lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// A differentiable loss over a task's cases.
pub trait Learner: Sync {
    type Task: Sync;
    fn loss(&self, params: &[Tensor], task: &Self::Task, indices: &[usize]) -> Result<Tensor>;
    fn train_indices<'a>(&self, task: &'a Self::Task) -> &'a [usize];
    fn test_indices<'a>(&self, task: &'a Self::Task) -> &'a [usize];
}

/// The Graph U-Net with mean-squared error over nodes and channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetLearner {
    pub config: ModelConfig,
}

impl Learner for UNetLearner {
    type Task = Task;

    fn loss(&self, params: &[Tensor], task: &Task, indices: &[usize]) -> Result<Tensor> {
        task_loss(&self.config, params, task, indices)
    }

    fn train_indices<'a>(&self, task: &'a Task) -> &'a [usize] {
        &task.train
    }

    fn test_indices<'a>(&self, task: &'a Task) -> &'a [usize] {
        &task.test
    }
}

/// Mean squared error over the selected cases, nodes and output channels.
pub fn task_loss(cfg: &ModelConfig, params: &[Tensor], task: &Task, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(MetaError::EmptyIndices);
    }
    let (x, y) = task.batch(indices);
    let rows = indices.len() * task.n_nodes();
    let x = Tensor::constant(x, &[rows, F_IN])?;
    let y = Tensor::constant(y, &[rows, F_OUT])?;
    let pred = unet_forward(cfg, params, &task.graph, &x)?;
    Ok(pred.sub(&y)?.square().mean())
}

pub fn leaves(values: &[Vec<f64>], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    values
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::param(v.clone(), s).expect("registry shape"))
        .collect()
}

/// Gradients with zeros for parameters the loss does not depend on.
fn grad_all(loss: &Tensor, theta: &[Tensor], create_record: bool) -> Result<Vec<Tensor>> {
    Ok(grad_with(
        loss,
        theta,
        GradOptions {
            create_record,
            allow_unused: true,
        },
    )?)
}

fn global_norm<'a>(g: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    g.into_iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn clip_scale(norm: f64, max: f64) -> f64 {
    if norm > max {
        max / norm
    } else {
        1.0
    }
}

/// Parameters after each inner step: `θ^1 … θ^M` (θ^0 is the input).
pub struct AdaptedParams {
    pub theta_steps: Vec<Vec<Tensor>>,
    /// Training loss before each step.
    pub train_losses: Vec<f64>,
}

/// `θ^{k+1} = θ^k − η₁ ∇L(D^tr, θ^k)`. With `second_order` the gradient is
/// itself recorded so the result stays differentiable in θ₀ through it.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    theta0: &[Tensor],
    task: &L::Task,
    cfg: &TrainConfig,
) -> Result<AdaptedParams> {
    let idx = learner.train_indices(task);
    let mut theta = theta0.to_vec();
    let mut theta_steps = Vec::with_capacity(cfg.inner_steps);
    let mut train_losses = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let loss = learner.loss(&theta, task, idx)?;
        train_losses.push(loss.item());
        theta = sgd_step(&loss, &theta, cfg.inner_lr, cfg.clip_norm, cfg.second_order)?;
        theta_steps.push(theta.clone());
    }
    Ok(AdaptedParams {
        theta_steps,
        train_losses,
    })
}

fn sgd_step(loss: &Tensor, theta: &[Tensor], lr: f64, clip: f64, create_record: bool) -> Result<Vec<Tensor>> {
    if !loss.item().is_finite() {
        return Err(MetaError::NonFinite {
            what: "inner loss",
            epoch: 0,
            task: 0,
        });
    }
    let g = grad_all(loss, theta, create_record)?;
    let norm = global_norm(g.iter().map(|t| t.data()));
    let step = lr * clip_scale(norm, clip);
    theta
        .iter()
        .zip(&g)
        .map(|(p, gi)| Ok(p.sub(&gi.scale(step))?))
        .collect()
}

/// `Σ_j w_j L(θ^j, D^test)`, also returning the individual step losses.
pub fn msl_meta_loss<L: Learner>(
    learner: &L,
    adapted: &AdaptedParams,
    task: &L::Task,
    weights: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    if weights.len() != adapted.theta_steps.len() {
        return Err(MetaError::WeightLength(weights.len(), adapted.theta_steps.len()));
    }
    let idx = learner.test_indices(task);
    let mut total: Option<Tensor> = None;
    let mut losses = Vec::with_capacity(weights.len());
    for (theta, &w) in adapted.theta_steps.iter().zip(weights) {
        if w == 0.0 {
            losses.push(no_record(|| learner.loss(theta, task, idx))?.item());
            continue;
        }
        let l = learner.loss(theta, task, idx)?;
        losses.push(l.item());
        let term = l.scale(w);
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok((total.unwrap_or_else(|| Tensor::scalar(0.0)), losses))
}

/// θ₀ and the Adam state of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub theta0: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub epoch: usize,
    pub adam_steps: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl MetaState {
    pub fn new(theta0: Vec<Vec<f64>>, shapes: Vec<Vec<usize>>) -> MetaState {
        let zeros: Vec<Vec<f64>> = theta0.iter().map(|p| vec![0.0; p.len()]).collect();
        MetaState {
            theta0,
            shapes,
            m: zeros.clone(),
            v: zeros,
            epoch: 0,
            adam_steps: 0,
        }
    }

    pub fn from_model(model: &GraphUNet) -> MetaState {
        let shapes = model.layout().into_iter().map(|(_, s)| s).collect();
        MetaState::new(model.params.clone(), shapes)
    }

    /// One Adam step with global-norm clipping.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], lr: f64, clip: f64) {
        let scale = clip_scale(global_norm(grads.iter().map(|g| g.as_slice())), clip);
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in self.theta0.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub task_id: usize,
    pub step: usize,
    pub loss: f64,
    pub rmse: f64,
    pub wall_ms: u128,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,split,task_id,step,loss,rmse,wall_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.split, self.task_id, self.step, self.loss, self.rmse, self.wall_ms
        )
    }
}

/// Gradient of one task's meta-loss with respect to θ₀, plus the test loss
/// at steps `0..=M`.
pub fn task_meta_gradient<L: Learner>(
    learner: &L,
    theta0: &[Vec<f64>],
    shapes: &[Vec<usize>],
    task: &L::Task,
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let theta = leaves(theta0, shapes);
    let step0 = no_record(|| learner.loss(&theta, task, learner.test_indices(task)))?.item();
    let adapted = inner_adapt(learner, &theta, task, cfg)?;
    let (meta_loss, step_losses) = msl_meta_loss(learner, &adapted, task, &cfg.weights())?;
    let g = if meta_loss.requires_grad() {
        grad_all(&meta_loss, &theta, false)?
            .into_iter()
            .map(|t| t.data().to_vec())
            .collect()
    } else {
        theta0.iter().map(|p| vec![0.0; p.len()]).collect()
    };
    let mut losses = vec![step0];
    losses.extend(step_losses);
    Ok((g, losses))
}

fn select_batch(n_tasks: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_tasks).collect();
    if cfg.task_batch == 0 || cfg.task_batch >= n_tasks {
        return order;
    }
    order.shuffle(&mut stream(cfg.seed, Domain::Resample, epoch as u64));
    order.truncate(cfg.task_batch);
    order.sort_unstable();
    order
}

/// One outer update: meta-gradients of the task batch (computed in
/// parallel, summed in task order), then Adam on θ₀.
pub fn meta_epoch<L: Learner>(
    state: &mut MetaState,
    learner: &L,
    tasks: &[&L::Task],
    task_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<LogRow>> {
    if tasks.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let start = Instant::now();
    let epoch = state.epoch;
    let batch = select_batch(tasks.len(), cfg, epoch);
    let results = batch
        .par_iter()
        .map(|&t| {
            task_meta_gradient(learner, &state.theta0, &state.shapes, tasks[t], cfg).map_err(|e| match e {
                MetaError::NonFinite { what, .. } => MetaError::NonFinite {
                    what,
                    epoch,
                    task: task_ids[t],
                },
                e => e,
            })
        })
        .collect::<Vec<_>>();
    let mut total: Vec<Vec<f64>> = state.theta0.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut rows = Vec::new();
    let wall_ms = start.elapsed().as_millis();
    for (&t, r) in batch.iter().zip(results) {
        let (g, losses) = r?;
        let finite = g.iter().flatten().all(|v| v.is_finite());
        if !finite || losses.iter().any(|l| !l.is_finite()) {
            return Err(MetaError::NonFinite {
                what: if finite { "meta loss" } else { "meta-gradient" },
                epoch,
                task: task_ids[t],
            });
        }
        for (acc, gi) in total.iter_mut().zip(&g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        for (step, &loss) in losses.iter().enumerate() {
            rows.push(LogRow {
                epoch,
                split: "meta_train".into(),
                task_id: task_ids[t],
                step,
                loss,
                rmse: loss.sqrt(),
                wall_ms,
            });
        }
    }
    state.adam_step(&total, cfg.outer_lr_at(epoch), cfg.clip_norm);
    state.epoch += 1;
    Ok(rows)
}

/// Meta-test adaptation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTune {
    pub n_examples: usize,
    pub n_updates: usize,
    pub inner_lr: f64,
    pub clip_norm: f64,
}

/// Plain descent on the first `n_examples` training cases, reporting test
/// RMSE before the first update and after each one.
pub fn meta_test_adapt<L: Learner>(
    learner: &L,
    theta0: &[Vec<f64>],
    shapes: &[Vec<usize>],
    task: &L::Task,
    ft: &FineTune,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let train = learner.train_indices(task);
    if ft.n_examples == 0 || ft.n_examples > train.len() {
        return Err(MetaError::Config(format!(
            "n_examples {} outside 1..={}",
            ft.n_examples,
            train.len()
        )));
    }
    let train = &train[..ft.n_examples];
    let test = learner.test_indices(task);
    let mut values = theta0.to_vec();
    let mut curve = Vec::with_capacity(ft.n_updates + 1);
    let rmse = |v: &[Vec<f64>]| -> Result<f64> {
        let l = no_record(|| learner.loss(&leaves(v, shapes), task, test))?.item();
        Ok(l.sqrt())
    };
    curve.push(rmse(&values)?);
    for _ in 0..ft.n_updates {
        let theta = leaves(&values, shapes);
        let loss = learner.loss(&theta, task, train)?;
        let next = sgd_step(&loss, &theta, ft.inner_lr, ft.clip_norm, false)?;
        values = next.iter().map(|t| t.data().to_vec()).collect();
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetaError::NonFinite {
                what: "fine-tuned parameters",
                epoch: 0,
                task: 0,
            });
        }
        curve.push(rmse(&values)?);
    }
    Ok((values, curve))
}

/// Fine-tunes baseline parameters exactly as [`meta_test_adapt`] does.
pub fn finetune_baseline<L: Learner>(
    learner: &L,
    params: &[Vec<f64>],
    shapes: &[Vec<usize>],
    task: &L::Task,
    ft: &FineTune,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    meta_test_adapt(learner, params, shapes, task, ft)
}

/// Gradient of the supervised loss over all of a task's train and test cases.
pub fn baseline_gradient<L: Learner>(
    learner: &L,
    params: &[Vec<f64>],
    shapes: &[Vec<usize>],
    task: &L::Task,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut idx: Vec<usize> = learner.train_indices(task).to_vec();
    idx.extend_from_slice(learner.test_indices(task));
    let theta = leaves(params, shapes);
    let loss = learner.loss(&theta, task, &idx)?;
    let g = grad_all(&loss, &theta, false)?
        .into_iter()
        .map(|t| t.data().to_vec())
        .collect();
    Ok((g, loss.item()))
}

/// One supervised epoch: a single Adam step on the loss pooled over
/// D^tr ∪ D^test of every task. Per-task gradients run in parallel and are
/// combined in task order, weighted by case count.
pub fn baseline_epoch<L: Learner>(
    state: &mut MetaState,
    learner: &L,
    tasks: &[&L::Task],
    task_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<LogRow>> {
    if tasks.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let start = Instant::now();
    let epoch = state.epoch;
    let results = tasks
        .par_iter()
        .map(|t| baseline_gradient(learner, &state.theta0, &state.shapes, t))
        .collect::<Vec<_>>();
    let wall_ms = start.elapsed().as_millis();
    let counts: Vec<f64> = tasks
        .iter()
        .map(|t| (learner.train_indices(t).len() + learner.test_indices(t).len()) as f64)
        .collect();
    let n_total: f64 = counts.iter().sum();
    let mut total: Vec<Vec<f64>> = state.theta0.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut rows = Vec::with_capacity(tasks.len());
    for (t, r) in results.into_iter().enumerate() {
        let (g, loss) = r?;
        if !loss.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetaError::NonFinite {
                what: "baseline loss",
                epoch,
                task: task_ids[t],
            });
        }
        let w = counts[t] / n_total;
        for (acc, gi) in total.iter_mut().zip(&g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += w * b);
        }
        rows.push(LogRow {
            epoch,
            split: "baseline".into(),
            task_id: task_ids[t],
            step: 0,
            loss,
            rmse: loss.sqrt(),
            wall_ms,
        });
    }
    state.adam_step(&total, cfg.outer_lr_at(epoch), cfg.clip_norm);
    state.epoch += 1;
    Ok(rows)
}

/// Runs `cfg.epochs` MAML epochs, handing every log row to `sink`. On error
/// `state` holds the last good parameters.
pub fn train_maml<L: Learner>(
    state: &mut MetaState,
    learner: &L,
    tasks: &[&L::Task],
    task_ids: &[usize],
    cfg: &TrainConfig,
    mut sink: impl FnMut(&[LogRow]),
) -> Result<()> {
    cfg.validate()?;
    while state.epoch < cfg.epochs {
        let rows = meta_epoch(state, learner, tasks, task_ids, cfg)?;
        sink(&rows);
    }
    Ok(())
}

/// Supervised training on the union of every task's cases.
pub fn train_baseline<L: Learner>(
    state: &mut MetaState,
    learner: &L,
    tasks: &[&L::Task],
    task_ids: &[usize],
    cfg: &TrainConfig,
    mut sink: impl FnMut(&[LogRow]),
) -> Result<()> {
    cfg.validate()?;
    while state.epoch < cfg.epochs {
        let rows = baseline_epoch(state, learner, tasks, task_ids, cfg)?;
        sink(&rows);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
