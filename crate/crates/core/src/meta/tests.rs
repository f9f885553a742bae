use super::*;
use crate::airfoil::{sample_conditions, NacaParams, OgridParams};
use crate::gnn::{init_params, BlockSpec};
use crate::graphdata::{build_task, MeshConfig, TaskSet, TaskSpec};
use crate::tensor::grad;
use proptest::prelude::{prop_assert, proptest, ProptestConfig};

/// `y = w·x + b` fitted by MSE; params are `w [1,1]` and `b [1,1]`.
struct LineFit;

struct LineTask {
    xs: Vec<f64>,
    ys: Vec<f64>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl LineTask {
    fn new(slope: f64, offset: f64, train_x: &[f64], test_x: &[f64]) -> LineTask {
        let xs: Vec<f64> = train_x.iter().chain(test_x).copied().collect();
        let ys = xs.iter().map(|x| slope * x + offset + 0.3 * (3.0 * x).sin()).collect();
        LineTask {
            xs,
            ys,
            train: (0..train_x.len()).collect(),
            test: (train_x.len()..train_x.len() + test_x.len()).collect(),
        }
    }
}

impl Learner for LineFit {
    type Task = LineTask;

    fn loss(&self, params: &[Tensor], task: &LineTask, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(MetaError::EmptyIndices);
        }
        let n = indices.len();
        let x = Tensor::constant(indices.iter().map(|&i| task.xs[i]).collect(), &[n, 1])?;
        let y = Tensor::constant(indices.iter().map(|&i| task.ys[i]).collect(), &[n, 1])?;
        let ones = Tensor::constant(vec![1.0; n], &[n, 1])?;
        let pred = x.matmul(&params[0])?.add(&ones.matmul(&params[1])?)?;
        Ok(pred.sub(&y)?.square().mean())
    }

    fn train_indices<'a>(&self, task: &'a LineTask) -> &'a [usize] {
        &task.train
    }

    fn test_indices<'a>(&self, task: &'a LineTask) -> &'a [usize] {
        &task.test
    }
}

fn line_shapes() -> Vec<Vec<usize>> {
    vec![vec![1, 1], vec![1, 1]]
}

fn line_tasks() -> Vec<LineTask> {
    [(1.5, -0.2), (-0.7, 0.4), (0.3, 1.1)]
        .iter()
        .map(|&(a, c)| LineTask::new(a, c, &[-1.0, -0.3, 0.4, 0.9], &[-0.6, 0.1, 0.7]))
        .collect()
}

fn line_grad(w: f64, b: f64, t: &LineTask, idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let (mut gw, mut gb) = (0.0, 0.0);
    for &i in idx {
        let r = w * t.xs[i] + b - t.ys[i];
        gw += 2.0 * r * t.xs[i] / n;
        gb += 2.0 * r / n;
    }
    (gw, gb)
}

fn line_loss(w: f64, b: f64, t: &LineTask, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| (w * t.xs[i] + b - t.ys[i]).powi(2)).sum::<f64>() / idx.len() as f64
}

/// Plain-f64 evaluation of `Σ_i Σ_j w_j L(θ_i^j, D_i^test)`.
fn line_meta_objective(w0: f64, b0: f64, tasks: &[LineTask], cfg: &TrainConfig) -> f64 {
    let weights = cfg.weights();
    let mut total = 0.0;
    for t in tasks {
        let (mut w, mut b) = (w0, b0);
        for &wj in &weights {
            let (gw, gb) = line_grad(w, b, t, &t.train);
            let norm = (gw * gw + gb * gb).sqrt();
            let s = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            w -= cfg.inner_lr * s * gw;
            b -= cfg.inner_lr * s * gb;
            total += wj * line_loss(w, b, t, &t.test);
        }
    }
    total
}

fn line_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        inner_lr: 0.2,
        inner_steps: steps,
        ..TrainConfig::default()
    }
}

fn summed_meta_gradient<L: Learner>(
    learner: &L,
    theta0: &[Vec<f64>],
    shapes: &[Vec<usize>],
    tasks: &[L::Task],
    cfg: &TrainConfig,
) -> Vec<f64> {
    let mut total = vec![0.0; theta0.iter().map(Vec::len).sum()];
    for t in tasks {
        let (g, _) = task_meta_gradient(learner, theta0, shapes, t, cfg).unwrap();
        for (acc, v) in total.iter_mut().zip(g.iter().flatten()) {
            *acc += v;
        }
    }
    total
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let tasks = line_tasks();
    let theta0 = vec![vec![0.4], vec![-0.3]];
    for steps in 1..=3 {
        let cfg = line_cfg(steps);
        let g = summed_meta_gradient(&LineFit, &theta0, &line_shapes(), &tasks, &cfg);
        let h = 1e-5;
        let fd = [
            (line_meta_objective(0.4 + h, -0.3, &tasks, &cfg) - line_meta_objective(0.4 - h, -0.3, &tasks, &cfg))
                / (2.0 * h),
            (line_meta_objective(0.4, -0.3 + h, &tasks, &cfg) - line_meta_objective(0.4, -0.3 - h, &tasks, &cfg))
                / (2.0 * h),
        ];
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() / scale < 1e-4, "M={steps}: {a} vs {b}");
        }
    }
}

#[test]
fn first_order_drops_the_curvature_term() {
    let tasks = line_tasks();
    let theta0 = vec![vec![0.4], vec![-0.3]];
    let second = summed_meta_gradient(&LineFit, &theta0, &line_shapes(), &tasks, &line_cfg(2));
    let first = summed_meta_gradient(
        &LineFit,
        &theta0,
        &line_shapes(),
        &tasks,
        &TrainConfig {
            second_order: false,
            ..line_cfg(2)
        },
    );
    assert!(second.iter().zip(&first).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn orders_agree_without_inner_steps() {
    let tasks = line_tasks();
    let theta0 = vec![vec![0.4], vec![-0.3]];
    let base = TrainConfig {
        inner_lr: 0.0,
        ..line_cfg(3)
    };
    let second = summed_meta_gradient(&LineFit, &theta0, &line_shapes(), &tasks, &base);
    let first = summed_meta_gradient(
        &LineFit,
        &theta0,
        &line_shapes(),
        &tasks,
        &TrainConfig {
            second_order: false,
            ..base
        },
    );
    assert_eq!(second, first);
    // both are the plain test-loss gradient at θ₀
    let mut plain = [0.0; 2];
    for t in &tasks {
        let (gw, gb) = line_grad(0.4, -0.3, t, &t.test);
        plain[0] += gw;
        plain[1] += gb;
    }
    assert!((second[0] - plain[0]).abs() < 1e-12 && (second[1] - plain[1]).abs() < 1e-12);
}

/// Loss `c·θ` with different `c` for the train and test indices.
struct Linear;

struct LinearTask {
    c_train: Vec<f64>,
    c_test: Vec<f64>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Learner for Linear {
    type Task = LinearTask;

    fn loss(&self, params: &[Tensor], task: &LinearTask, indices: &[usize]) -> Result<Tensor> {
        let c = if indices == task.train.as_slice() {
            &task.c_train
        } else {
            &task.c_test
        };
        let c = Tensor::constant(c.clone(), &[1, c.len()])?;
        Ok(c.matmul(&params[0])?.sum().add_scalar(2.0))
    }

    fn train_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.train
    }

    fn test_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.test
    }
}

#[test]
fn orders_agree_for_linear_losses() {
    let tasks = [
        LinearTask {
            c_train: vec![0.5, -1.0, 2.0],
            c_test: vec![1.0, 0.25, -0.5],
            train: vec![0],
            test: vec![1],
        },
        LinearTask {
            c_train: vec![-0.3, 0.8, 0.1],
            c_test: vec![0.2, -0.9, 1.5],
            train: vec![0],
            test: vec![1],
        },
    ];
    let refs: Vec<&LinearTask> = tasks.iter().collect();
    let run = |second_order: bool| {
        let cfg = TrainConfig {
            second_order,
            ..TrainConfig::default()
        };
        let mut s = MetaState::new(vec![vec![0.1, 0.2, 0.3]], vec![vec![3, 1]]);
        for _ in 0..3 {
            meta_epoch(&mut s, &Linear, &refs, &[0, 1], &cfg).unwrap();
        }
        s.theta0
    };
    let (a, b) = (run(true), run(false));
    for (x, y) in a[0].iter().zip(&b[0]) {
        assert!((x - y).abs() < 1e-10);
    }
    assert_ne!(a[0], vec![0.1, 0.2, 0.3]);
}

struct Frozen;

impl Learner for Frozen {
    type Task = LinearTask;

    fn loss(&self, _: &[Tensor], _: &LinearTask, _: &[usize]) -> Result<Tensor> {
        Ok(Tensor::scalar(0.75))
    }

    fn train_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.train
    }

    fn test_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.test
    }
}

#[test]
fn frozen_model_leaves_theta_unchanged() {
    let task = LinearTask {
        c_train: vec![],
        c_test: vec![],
        train: vec![0],
        test: vec![1],
    };
    let theta = vec![vec![0.1, -0.2], vec![3.0]];
    let mut s = MetaState::new(theta.clone(), vec![vec![2], vec![1]]);
    for _ in 0..3 {
        let rows = meta_epoch(&mut s, &Frozen, &[&task], &[0], &TrainConfig::default()).unwrap();
        assert!(rows.iter().all(|r| r.loss == 0.75));
    }
    for (a, b) in s.theta0.iter().flatten().zip(theta.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Loss `Σ(θ − a)²`.
struct Quadratic(f64);

impl Learner for Quadratic {
    type Task = LinearTask;

    fn loss(&self, params: &[Tensor], _: &LinearTask, _: &[usize]) -> Result<Tensor> {
        Ok(params[0].add_scalar(-self.0).square().sum())
    }

    fn train_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.train
    }

    fn test_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.test
    }
}

fn dummy_task() -> LinearTask {
    LinearTask {
        c_train: vec![],
        c_test: vec![],
        train: vec![0],
        test: vec![1],
    }
}

#[test]
fn quadratic_step_closed_form() {
    let cfg = TrainConfig {
        inner_lr: 0.1,
        inner_steps: 1,
        ..TrainConfig::default()
    };
    let theta0 = leaves(&[vec![2.5]], &[vec![1]]);
    let a = inner_adapt(&Quadratic(0.5), &theta0, &dummy_task(), &cfg).unwrap();
    assert_eq!(a.theta_steps.len(), 1);
    let expected = 2.5 - 2.0 * 0.1 * (2.5 - 0.5);
    assert!((a.theta_steps[0][0].item() - expected).abs() < 1e-15);
    assert_eq!(a.train_losses, vec![4.0]);
}

#[test]
fn inner_step_is_clipped() {
    let cfg = TrainConfig {
        inner_lr: 0.1,
        inner_steps: 1,
        clip_norm: 1.0,
        ..TrainConfig::default()
    };
    // gradient 2·(20.5 − 0.5) = 40 is scaled to norm 1
    let theta0 = leaves(&[vec![20.5]], &[vec![1]]);
    let a = inner_adapt(&Quadratic(0.5), &theta0, &dummy_task(), &cfg).unwrap();
    assert!((a.theta_steps[0][0].item() - 20.4).abs() < 1e-12);
}

#[test]
fn zero_inner_rate_keeps_theta() {
    let cfg = TrainConfig {
        inner_lr: 0.0,
        ..TrainConfig::default()
    };
    let theta0 = leaves(&[vec![0.4], vec![-0.3]], &line_shapes());
    let a = inner_adapt(&LineFit, &theta0, &line_tasks()[0], &cfg).unwrap();
    assert_eq!(a.theta_steps.len(), 3);
    for step in &a.theta_steps {
        assert_eq!(step[0].item(), 0.4);
        assert_eq!(step[1].item(), -0.3);
    }
}

#[test]
fn three_steps_match_hand_rolled_descent() {
    let cfg = line_cfg(3);
    for t in &line_tasks() {
        let a = inner_adapt(&LineFit, &leaves(&[vec![0.4], vec![-0.3]], &line_shapes()), t, &cfg).unwrap();
        let (mut w, mut b) = (0.4, -0.3);
        for k in 0..3 {
            let (gw, gb) = line_grad(w, b, t, &t.train);
            w -= cfg.inner_lr * gw;
            b -= cfg.inner_lr * gb;
            assert!((a.theta_steps[k][0].item() - w).abs() < 1e-12);
            assert!((a.theta_steps[k][1].item() - b).abs() < 1e-12);
        }
    }
}

#[test]
fn non_finite_inner_loss_aborts() {
    let theta0 = leaves(&[vec![f64::NAN], vec![0.0]], &line_shapes());
    let r = inner_adapt(&LineFit, &theta0, &line_tasks()[0], &line_cfg(1));
    assert!(matches!(r, Err(MetaError::NonFinite { .. })));
}

/// Test loss equal to the single parameter.
struct Identity;

impl Learner for Identity {
    type Task = LinearTask;

    fn loss(&self, params: &[Tensor], _: &LinearTask, _: &[usize]) -> Result<Tensor> {
        Ok(params[0].sum())
    }

    fn train_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.train
    }

    fn test_indices<'a>(&self, task: &'a LinearTask) -> &'a [usize] {
        &task.test
    }
}

fn steps_with_losses(losses: &[f64]) -> AdaptedParams {
    AdaptedParams {
        theta_steps: losses.iter().map(|&l| leaves(&[vec![l]], &[vec![1]])).collect(),
        train_losses: vec![0.0; losses.len()],
    }
}

#[test]
fn msl_hand_evaluation() {
    let a = steps_with_losses(&[4.0, 2.0, 1.0]);
    let (l, steps) = msl_meta_loss(&Identity, &a, &dummy_task(), &[0.5, 0.3, 0.2]).unwrap();
    assert!((l.item() - 2.8).abs() < 1e-12);
    assert_eq!(steps, vec![4.0, 2.0, 1.0]);
    let (l, _) = msl_meta_loss(&Identity, &a, &dummy_task(), &[0.0, 0.0, 1.0]).unwrap();
    assert_eq!(l.item(), 1.0);
    let a = steps_with_losses(&[0.37; 3]);
    let (l, _) = msl_meta_loss(&Identity, &a, &dummy_task(), &[1.0 / 3.0; 3]).unwrap();
    assert!((l.item() - 0.37).abs() < 1e-12);
}

#[test]
fn msl_rejects_wrong_weight_count() {
    let a = steps_with_losses(&[4.0, 2.0, 1.0]);
    let r = msl_meta_loss(&Identity, &a, &dummy_task(), &[0.5, 0.5]);
    assert!(matches!(r, Err(MetaError::WeightLength(2, 3))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::default().weights(), vec![1.0 / 3.0; 3]);
    let bad = [
        TrainConfig {
            inner_steps: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            outer_lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            msl_weights: vec![0.5, 0.5],
            ..TrainConfig::default()
        },
        TrainConfig {
            msl_weights: vec![0.5, 0.5, 0.5],
            ..TrainConfig::default()
        },
        TrainConfig {
            msl_weights: vec![1.5, -0.5, 0.0],
            ..TrainConfig::default()
        },
    ];
    for c in &bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let c = TrainConfig::default();
    assert_eq!(c.outer_lr_at(0), 5e-4);
    assert_eq!(c.outer_lr_at(499), 5e-4);
    assert_eq!(c.outer_lr_at(500), 2.5e-4);
    assert_eq!(c.outer_lr_at(1000), 1.25e-4);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut s = MetaState::new(vec![vec![1.0, 1.0]], vec![vec![2]]);
    s.adam_step(&[vec![0.5, -3.0]], 0.01, 10.0);
    assert!((s.theta0[0][0] - 0.99).abs() < 1e-9);
    assert!((s.theta0[0][1] - 1.01).abs() < 1e-9);
    assert_eq!(s.adam_steps, 1);
}

#[test]
fn task_batches_are_seeded_subsets() {
    let cfg = TrainConfig {
        task_batch: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = select_batch(10, &cfg, 4);
    assert_eq!(a.len(), 3);
    assert_eq!(a, select_batch(10, &cfg, 4));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(select_batch(5, &TrainConfig::default(), 0), vec![0, 1, 2, 3, 4]);
}

fn fine_tune(n_examples: usize, n_updates: usize, inner_lr: f64) -> FineTune {
    FineTune {
        n_examples,
        n_updates,
        inner_lr,
        clip_norm: 10.0,
    }
}

#[test]
fn fine_tune_curve_contract() {
    let t = &line_tasks()[1];
    let theta0 = vec![vec![0.4], vec![-0.3]];
    let (p, curve) = meta_test_adapt(&LineFit, &theta0, &line_shapes(), t, &fine_tune(4, 0, 0.1)).unwrap();
    assert_eq!(p, theta0);
    assert_eq!(curve, vec![line_loss(0.4, -0.3, t, &t.test).sqrt()]);
    let (_, curve) = meta_test_adapt(&LineFit, &theta0, &line_shapes(), t, &fine_tune(2, 7, 0.1)).unwrap();
    assert_eq!(curve.len(), 8);
    for n in [0, 5] {
        let r = meta_test_adapt(&LineFit, &theta0, &line_shapes(), t, &fine_tune(n, 1, 0.1));
        assert!(matches!(r, Err(MetaError::Config(_))));
    }
}

#[test]
fn fine_tune_uses_leading_examples() {
    let t = &line_tasks()[0];
    let (p, _) = meta_test_adapt(&LineFit, &[vec![0.0], vec![0.0]], &line_shapes(), t, &fine_tune(2, 1, 0.1)).unwrap();
    let (gw, gb) = line_grad(0.0, 0.0, t, &[0, 1]);
    assert!((p[0][0] + 0.1 * gw).abs() < 1e-15);
    assert!((p[1][0] + 0.1 * gb).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convex_fine_tune_curve_is_non_increasing(
        slope in -2.0f64..2.0,
        offset in -1.0f64..1.0,
        w0 in -2.0f64..2.0,
        b0 in -2.0f64..2.0,
    ) {
        // test inputs coincide with the training inputs, so the test loss is
        // a quadratic with the same curvature as the one being descended
        let xs = [-1.0, -0.5, 0.2, 0.8];
        let mut t = LineTask::new(slope, offset, &xs, &xs);
        for (i, x) in xs.iter().enumerate() {
            t.ys[i] = slope * x + offset;
            t.ys[i + xs.len()] = slope * x + offset;
        }
        let (_, curve) =
            meta_test_adapt(&LineFit, &[vec![w0], vec![b0]], &line_shapes(), &t, &fine_tune(4, 10, 0.05)).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
        }
    }
}

// Graph U-Net on a small real task.

fn small_model() -> ModelConfig {
    ModelConfig {
        block: BlockSpec {
            layers: 1,
            channels: 4,
            kernels: 2,
        },
        depth: 2,
        in_channels: 2,
        out_channels: 3,
    }
}

fn small_task(seed: u64, camber: f64) -> Task {
    let mesh = MeshConfig {
        n_per_side: 16,
        ogrid: OgridParams {
            radial_layers: 8,
            outer_radius: 5.0,
            first_layer_height: 0.01,
        },
        coarsenings: 2,
        crop_radius: 2.0,
        k_pool: 4,
    };
    build_task(
        &TaskSpec {
            shape: NacaParams::new(camber, 0.4, 0.12).unwrap(),
            set: TaskSet::Train,
            conditions: sample_conditions(6, seed),
            n_train: 4,
            n_test: 2,
        },
        &mesh,
    )
    .unwrap()
}

fn model_shapes(m: &GraphUNet) -> Vec<Vec<usize>> {
    m.layout().into_iter().map(|(_, s)| s).collect()
}

#[test]
fn task_loss_of_exact_prediction_is_zero() {
    let cfg = small_model();
    let model = init_params(&cfg, 3).unwrap();
    let mut task = small_task(1, 0.02);
    for c in &mut task.cases {
        c.target = model.predict(&task.graph, &c.input).unwrap();
    }
    let l = task_loss(&cfg, &model.tensors(), &task, &[0, 2, 5]).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn task_loss_of_zero_prediction_against_ones() {
    let cfg = small_model();
    let mut model = init_params(&cfg, 3).unwrap();
    model.params.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = 0.0));
    let mut task = small_task(1, 0.02);
    for c in &mut task.cases {
        c.target.iter_mut().for_each(|v| *v = 1.0);
    }
    let l = task_loss(&cfg, &model.tensors(), &task, &[1, 3]).unwrap();
    assert_eq!(l.item(), 1.0);
    assert!(matches!(
        task_loss(&cfg, &model.tensors(), &task, &[]),
        Err(MetaError::EmptyIndices)
    ));
}

#[test]
fn task_loss_matches_naive_loop() {
    let cfg = small_model();
    let model = init_params(&cfg, 8).unwrap();
    let task = small_task(2, 0.04);
    let idx = [0, 3, 4];
    let mut sum = 0.0;
    let mut count = 0usize;
    for &c in &idx {
        let pred = model.predict(&task.graph, &task.cases[c].input).unwrap();
        for (p, y) in pred.iter().zip(&task.cases[c].target) {
            sum += (p - y) * (p - y);
            count += 1;
        }
    }
    assert_eq!(count, idx.len() * task.n_nodes() * F_OUT);
    let l = task_loss(&cfg, &model.tensors(), &task, &idx).unwrap().item();
    assert!((l - sum / count as f64).abs() < 1e-12);
}

#[test]
fn recorded_inner_loop_matches_detached_descent() {
    let cfg = small_model();
    let model = init_params(&cfg, 4).unwrap();
    let shapes = model_shapes(&model);
    let task = small_task(3, 0.02);
    let tc = TrainConfig {
        inner_lr: 0.05,
        ..TrainConfig::default()
    };
    let a = inner_adapt(&UNetLearner { config: cfg }, &model.tensors(), &task, &tc).unwrap();
    let mut values = model.params.clone();
    for k in 0..3 {
        let theta = leaves(&values, &shapes);
        let loss = task_loss(&cfg, &theta, &task, &task.train).unwrap();
        let g = grad(&loss, &theta, false).unwrap();
        let norm = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        let s = if norm > tc.clip_norm { tc.clip_norm / norm } else { 1.0 };
        for (v, gi) in values.iter_mut().zip(&g) {
            v.iter_mut().zip(gi.data()).for_each(|(a, b)| *a -= tc.inner_lr * s * b);
        }
        for (p, v) in a.theta_steps[k].iter().zip(&values) {
            for (x, y) in p.data().iter().zip(v) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn one_hot_weights_give_the_plain_maml_objective() {
    let cfg = small_model();
    let model = init_params(&cfg, 5).unwrap();
    let task = small_task(4, 0.02);
    let learner = UNetLearner { config: cfg };
    let a = inner_adapt(&learner, &model.tensors(), &task, &TrainConfig::default()).unwrap();
    let (l, _) = msl_meta_loss(&learner, &a, &task, &[0.0, 0.0, 1.0]).unwrap();
    let last = task_loss(&cfg, &a.theta_steps[2], &task, &task.test).unwrap();
    assert_eq!(l.item(), last.item());
}

fn run_epochs(threads: usize) -> (MetaState, Vec<LogRow>) {
    let cfg = small_model();
    let model = init_params(&cfg, 6).unwrap();
    let tasks = [small_task(5, 0.0), small_task(6, 0.05), small_task(7, 0.03)];
    let refs: Vec<&Task> = tasks.iter().collect();
    let tc = TrainConfig {
        outer_lr: 1e-2,
        epochs: 3,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut s = MetaState::from_model(&model);
        let mut log = Vec::new();
        train_maml(&mut s, &UNetLearner { config: cfg }, &refs, &[10, 11, 12], &tc, |r| {
            log.extend_from_slice(r)
        })
        .unwrap();
        (s, log)
    })
}

#[test]
fn meta_training_is_deterministic_across_thread_counts() {
    let (a, log) = run_epochs(1);
    let (b, _) = run_epochs(3);
    assert_eq!(a.theta0, b.theta0);
    assert_eq!(a.m, b.m);
    assert_eq!(a.epoch, 3);
    // three tasks, steps 0..=3, three epochs
    assert_eq!(log.len(), 3 * 4 * 3);
    assert_eq!(log[0].task_id, 10);
    let initial = init_params(&small_model(), 6).unwrap();
    assert_ne!(a.theta0, initial.params);
}

#[test]
fn baseline_gradient_with_one_task_is_the_pooled_loss_gradient() {
    let cfg = small_model();
    let model = init_params(&cfg, 7).unwrap();
    let shapes = model_shapes(&model);
    let task = small_task(8, 0.02);
    let learner = UNetLearner { config: cfg };
    let (g, loss) = baseline_gradient(&learner, &model.params, &shapes, &task).unwrap();
    let theta = model.tensors();
    let all: Vec<usize> = (0..6).collect();
    let l = task_loss(&cfg, &theta, &task, &all).unwrap();
    assert_eq!(loss, l.item());
    let expected = grad(&l, &theta, false).unwrap();
    for (a, b) in g.iter().zip(&expected) {
        assert_eq!(a.as_slice(), b.data());
    }
    let mut s = MetaState::from_model(&model);
    let mut manual = s.clone();
    baseline_epoch(&mut s, &learner, &[&task], &[0], &TrainConfig::default()).unwrap();
    manual.adam_step(&g, 5e-4, 10.0);
    assert_eq!(s.theta0, manual.theta0);
    assert_eq!(s.epoch, 1);
}

#[test]
fn log_rows_are_csv() {
    let r = LogRow {
        epoch: 3,
        split: "meta_train".into(),
        task_id: 7,
        step: 2,
        loss: 0.25,
        rmse: 0.5,
        wall_ms: 12,
    };
    assert_eq!(r.csv(), "3,meta_train,7,2,0.25,0.5,12");
    assert_eq!(LogRow::HEADER.split(',').count(), r.csv().split(',').count());
}
