use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use metaflow::airfoil::{naca4_contour, sample_conditions, NacaParams, OgridParams};
use metaflow::gnn::{init_params, BlockSpec, ModelConfig};
use metaflow::graphdata::{build_task, MeshConfig, Task, TaskSet, TaskSpec};
use metaflow::meta::{meta_epoch, task_loss, MetaState, TrainConfig, UNetLearner};
use metaflow::panelflow::solve_panels;
use metaflow::tensor::{grad, Tensor};

fn mesh() -> MeshConfig {
    MeshConfig {
        n_per_side: 16,
        ogrid: OgridParams {
            radial_layers: 8,
            outer_radius: 10.0,
            first_layer_height: 0.01,
        },
        coarsenings: 2,
        crop_radius: 2.0,
        k_pool: 6,
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        block: BlockSpec {
            layers: 1,
            channels: 16,
            kernels: 3,
        },
        depth: 2,
        in_channels: 2,
        out_channels: 3,
    }
}

fn task(seed: u64) -> Task {
    build_task(
        &TaskSpec {
            shape: NacaParams::new(0.04, 0.5, 0.15).unwrap(),
            set: TaskSet::Train,
            conditions: sample_conditions(30, seed),
            n_train: 20,
            n_test: 10,
        },
        &mesh(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = Tensor::param((0..192 * 48).map(|i| (i as f64 * 0.37).sin()).collect(), &[192, 48]).unwrap();
    let b = Tensor::param((0..48 * 16).map(|i| (i as f64 * 0.11).cos()).collect(), &[48, 16]).unwrap();
    c.bench_function("matmul_192x48x16", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn panel(c: &mut Criterion) {
    let contour = naca4_contour(&NacaParams::new(0.04, 0.5, 0.15).unwrap(), 64).unwrap();
    let cond = sample_conditions(1, 0)[0];
    c.bench_function("panel_solve_128", |b| b.iter(|| black_box(solve_panels(&contour, &cond).unwrap())));
}

fn unet(c: &mut Criterion) {
    let cfg = model();
    let m = init_params(&cfg, 0).unwrap();
    let t = task(1);
    c.bench_function("unet_predict", |b| {
        b.iter(|| black_box(m.predict(&t.graph, &t.cases[0].input).unwrap()))
    });
    let idx: Vec<usize> = (0..20).collect();
    c.bench_function("unet_loss_and_gradient_20_cases", |b| {
        b.iter(|| {
            let theta = m.tensors();
            let l = task_loss(&cfg, &theta, &t, &idx).unwrap();
            black_box(grad(&l, &theta, false).unwrap())
        })
    });
}

fn maml(c: &mut Criterion) {
    let cfg = model();
    let learner = UNetLearner { config: cfg };
    let tasks: Vec<Task> = (0..2).map(task).collect();
    let refs: Vec<&Task> = tasks.iter().collect();
    let m = init_params(&cfg, 0).unwrap();
    let mut g = c.benchmark_group("meta_epoch_2_tasks");
    g.sample_size(10);
    for second_order in [false, true] {
        let tc = TrainConfig {
            second_order,
            ..TrainConfig::default()
        };
        let name = if second_order { "second_order" } else { "first_order" };
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut s = MetaState::from_model(&m);
                black_box(meta_epoch(&mut s, &learner, &refs, &[0, 1], &tc).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, panel, unet, maml);
criterion_main!(benches);
