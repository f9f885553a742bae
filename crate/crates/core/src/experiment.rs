//! The end-to-end protocol: dataset generation, MAML and baseline training,
//! evaluation on the three meta-test sets and the sensitivity sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airfoil::{sample_condition, AirfoilError, sample_shape, FlowConditions, OgridParams, ShapeDistribution};
use crate::gnn::{init_params, BlockSpec, GnnError, GraphUNet, ModelConfig};
use crate::graphdata::{build_task, DataError, MeshConfig, MetaDataset, Task, TaskSet, TaskSpec, F_IN, F_OUT};
use crate::meta::{
    finetune_baseline, meta_test_adapt, train_baseline, train_maml, FineTune, LogRow, MetaError, MetaState,
    TrainConfig, UNetLearner,
};
use crate::panelflow::PanelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("could not find a valid {set} shape for slot {slot} after {attempts} attempts")]
    Resample {
        set: &'static str,
        slot: usize,
        attempts: usize,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    /// Process exit code: 2 configuration, 3 numeric failure, 4 IO.
    pub fn exit_code(&self) -> i32 {
        use ExperimentError as E;
        match self {
            E::Config(_) | E::Resample { .. } => 2,
            E::Io { .. } => 4,
            E::Data(d) => match d {
                DataError::Io { .. }
                | DataError::Checksum(_)
                | DataError::Version { .. }
                | DataError::Manifest(_)
                | DataError::Payload { .. } => 4,
                DataError::NonFinite(_) | DataError::Panel(PanelError::Singular) => 3,
                _ => 2,
            },
            E::Meta(m) => match m {
                MetaError::Config(_) | MetaError::WeightLength(..) | MetaError::NoTasks => 2,
                MetaError::Gnn(g) => gnn_code(g),
                _ => 3,
            },
            E::Gnn(g) => gnn_code(g),
        }
    }
}

fn gnn_code(g: &GnnError) -> i32 {
    match g {
        GnnError::Checkpoint { .. } => 4,
        GnnError::Config(_) | GnnError::LevelMismatch { .. } | GnnError::Width { .. } => 2,
        GnnError::Tensor(TensorError::ShapeMismatch { .. }) => 2,
        _ => 3,
    }
}

fn cfg_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

/// Every knob of a run. Presets expand into explicit values before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub n_folds: usize,
    pub train_shapes: usize,
    pub interp_shapes: usize,
    pub ood_shapes: usize,
    pub cases_train: usize,
    pub cases_test: usize,
    pub cases_extra: usize,
    pub eval_cases_train: usize,
    pub eval_cases_test: usize,
    pub mesh: MeshConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_updates: usize,
    pub n_examples: usize,
    pub sweep_updates: usize,
    pub sweep_examples: Vec<usize>,
    pub write_predictions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Preset::Desk)
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if let Some((a, b)) = v.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| cfg_err(format!("{key}: bad range {v}")))?;
        let b: usize = b.trim().parse().map_err(|_| cfg_err(format!("{key}: bad range {v}")))?;
        return (a..=b)
            .map(|i| {
                i.to_string()
                    .parse()
                    .map_err(|_| cfg_err(format!("{key}: bad range {v}")))
            })
            .collect();
    }
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| cfg_err(format!("{key}: bad list item {s:?}"))))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> ExperimentConfig {
        match p {
            Preset::Desk => ExperimentConfig {
                preset: p,
                data_dir: "data".into(),
                out_dir: "runs".into(),
                data_seed: 2024,
                seeds: vec![0, 1, 2],
                folds: vec![0, 1, 2],
                n_folds: 10,
                train_shapes: 12,
                interp_shapes: 6,
                ood_shapes: 6,
                cases_train: 20,
                cases_test: 10,
                cases_extra: 10,
                eval_cases_train: 20,
                eval_cases_test: 10,
                mesh: MeshConfig {
                    n_per_side: 16,
                    ogrid: OgridParams {
                        radial_layers: 8,
                        outer_radius: 10.0,
                        first_layer_height: 0.01,
                    },
                    coarsenings: 2,
                    crop_radius: 2.0,
                    k_pool: 6,
                },
                model: ModelConfig {
                    block: BlockSpec {
                        layers: 1,
                        channels: 16,
                        kernels: 3,
                    },
                    depth: 2,
                    in_channels: F_IN,
                    out_channels: F_OUT,
                },
                // exact second-order meta-gradients cost ~3.5x more per
                // epoch at this size; the paper preset keeps them
                train: TrainConfig {
                    second_order: false,
                    ..TrainConfig::default()
                },
                n_updates: 10,
                n_examples: 20,
                sweep_updates: 10,
                sweep_examples: (1..=20).collect(),
                write_predictions: false,
            },
            Preset::Paper => ExperimentConfig {
                preset: p,
                seeds: vec![0],
                folds: (0..10).collect(),
                train_shapes: 80,
                interp_shapes: 20,
                ood_shapes: 20,
                cases_test: 20,
                eval_cases_test: 30,
                mesh: MeshConfig::default(),
                model: ModelConfig {
                    block: BlockSpec {
                        layers: 2,
                        channels: 48,
                        kernels: 5,
                    },
                    depth: 3,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    epochs: 1000,
                    ..TrainConfig::default()
                },
                ..ExperimentConfig::preset(Preset::Desk)
            },
        }
    }

    /// Applies `key=value` pairs; a `preset` key resets everything first
    /// regardless of where it appears.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<ExperimentConfig> {
        let preset = pairs
            .clone()
            .into_iter()
            .filter(|(k, _)| *k == "preset")
            .last()
            .map(|(_, v)| match v {
                "desk" => Ok(Preset::Desk),
                "paper" => Ok(Preset::Paper),
                other => Err(cfg_err(format!("unknown preset {other:?}"))),
            })
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut c = ExperimentConfig::preset(preset);
        for (k, v) in pairs {
            if k != "preset" {
                c.set(k, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| cfg_err(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "preset" => {
                *self = ExperimentConfig::from_pairs([("preset", v)])?;
            }
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "data_seed" => self.data_seed = num(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "folds" => self.folds = parse_list(key, v)?,
            "n_folds" => self.n_folds = num(key, v)?,
            "train_shapes" => self.train_shapes = num(key, v)?,
            "interp_shapes" => self.interp_shapes = num(key, v)?,
            "ood_shapes" => self.ood_shapes = num(key, v)?,
            "cases_train" => self.cases_train = num(key, v)?,
            "cases_test" => self.cases_test = num(key, v)?,
            "cases_extra" => self.cases_extra = num(key, v)?,
            "eval_cases_train" => self.eval_cases_train = num(key, v)?,
            "eval_cases_test" => self.eval_cases_test = num(key, v)?,
            "n_per_side" => self.mesh.n_per_side = num(key, v)?,
            "radial_layers" => self.mesh.ogrid.radial_layers = num(key, v)?,
            "outer_radius" => self.mesh.ogrid.outer_radius = num(key, v)?,
            "first_layer_height" => self.mesh.ogrid.first_layer_height = num(key, v)?,
            "coarsenings" => self.mesh.coarsenings = num(key, v)?,
            "crop_radius" => self.mesh.crop_radius = num(key, v)?,
            "k_pool" => self.mesh.k_pool = num(key, v)?,
            "layers" => self.model.block.layers = num(key, v)?,
            "channels" => self.model.block.channels = num(key, v)?,
            "kernels" => self.model.block.kernels = num(key, v)?,
            "depth" => self.model.depth = num(key, v)?,
            "inner_lr" => self.train.inner_lr = num(key, v)?,
            "outer_lr" => self.train.outer_lr = num(key, v)?,
            "inner_steps" => self.train.inner_steps = num(key, v)?,
            "msl_weights" => self.train.msl_weights = parse_list(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "lr_decay" => self.train.lr_decay = num(key, v)?,
            "lr_decay_every" => self.train.lr_decay_every = num(key, v)?,
            "second_order" => self.train.second_order = num(key, v)?,
            "clip_norm" => self.train.clip_norm = num(key, v)?,
            "task_batch" => self.train.task_batch = num(key, v)?,
            "n_updates" => self.n_updates = num(key, v)?,
            "n_examples" => self.n_examples = num(key, v)?,
            "sweep_updates" => self.sweep_updates = num(key, v)?,
            "sweep_examples" => self.sweep_examples = parse_list(key, v)?,
            "write_predictions" => self.write_predictions = num(key, v)?,
            _ => return Err(cfg_err(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Fully explicit `key=value` form, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let preset = match self.preset {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        };
        let t = &self.train;
        let m = &self.mesh;
        let b = &self.model.block;
        [
            ("preset", preset.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("folds", join(&self.folds)),
            ("n_folds", self.n_folds.to_string()),
            ("train_shapes", self.train_shapes.to_string()),
            ("interp_shapes", self.interp_shapes.to_string()),
            ("ood_shapes", self.ood_shapes.to_string()),
            ("cases_train", self.cases_train.to_string()),
            ("cases_test", self.cases_test.to_string()),
            ("cases_extra", self.cases_extra.to_string()),
            ("eval_cases_train", self.eval_cases_train.to_string()),
            ("eval_cases_test", self.eval_cases_test.to_string()),
            ("n_per_side", m.n_per_side.to_string()),
            ("radial_layers", m.ogrid.radial_layers.to_string()),
            ("outer_radius", m.ogrid.outer_radius.to_string()),
            ("first_layer_height", m.ogrid.first_layer_height.to_string()),
            ("coarsenings", m.coarsenings.to_string()),
            ("crop_radius", m.crop_radius.to_string()),
            ("k_pool", m.k_pool.to_string()),
            ("layers", b.layers.to_string()),
            ("channels", b.channels.to_string()),
            ("kernels", b.kernels.to_string()),
            ("depth", self.model.depth.to_string()),
            ("inner_lr", t.inner_lr.to_string()),
            ("outer_lr", t.outer_lr.to_string()),
            ("inner_steps", t.inner_steps.to_string()),
            ("msl_weights", join(&t.msl_weights)),
            ("epochs", t.epochs.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("second_order", t.second_order.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("task_batch", t.task_batch.to_string()),
            ("n_updates", self.n_updates.to_string()),
            ("n_examples", self.n_examples.to_string()),
            ("sweep_updates", self.sweep_updates.to_string()),
            ("sweep_examples", join(&self.sweep_examples)),
            ("write_predictions", self.write_predictions.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.model.depth > self.mesh.coarsenings {
            return Err(cfg_err(format!(
                "depth {} needs at least as many coarsenings (have {})",
                self.model.depth, self.mesh.coarsenings
            )));
        }
        let f = 1usize << self.mesh.coarsenings;
        if !self.mesh.ogrid.radial_layers.is_multiple_of(f) || !(2 * self.mesh.n_per_side).is_multiple_of(f) {
            return Err(cfg_err(format!(
                "radial_layers and 2·n_per_side must be divisible by 2^coarsenings = {f}"
            )));
        }
        if self.n_folds == 0 || self.folds.iter().any(|&f| f >= self.n_folds) {
            return Err(cfg_err("folds must lie in 0..n_folds"));
        }
        if self.seeds.is_empty() || self.folds.is_empty() {
            return Err(cfg_err("need at least one seed and one fold"));
        }
        if self.train_shapes == 0 || self.cases_train == 0 || self.cases_test == 0 {
            return Err(cfg_err("training tasks need shapes, train cases and test cases"));
        }
        if self.eval_cases_train == 0 || self.eval_cases_test == 0 {
            return Err(cfg_err("evaluation tasks need train and test cases"));
        }
        let adapt_max = self.cases_train.min(self.eval_cases_train);
        if self.n_examples == 0 || self.n_examples > adapt_max {
            return Err(cfg_err(format!("n_examples must lie in 1..={adapt_max}")));
        }
        if self.sweep_examples.iter().any(|&n| n == 0 || n > adapt_max) {
            return Err(cfg_err(format!("sweep_examples must lie in 1..={adapt_max}")));
        }
        Ok(())
    }

    fn fine_tune(&self, n_examples: usize, n_updates: usize) -> FineTune {
        FineTune {
            n_examples,
            n_updates,
            inner_lr: self.train.inner_lr,
            clip_norm: self.train.clip_norm,
        }
    }
}

// ---------------------------------------------------------------------------
// Generation

const MAX_ATTEMPTS: usize = 64;

fn set_code(set: TaskSet) -> u64 {
    match set {
        TaskSet::Train => 1,
        TaskSet::ShapeInterp => 2,
        TaskSet::Ood => 3,
    }
}

/// Conditions of slot `slot` in `set`; independent of the shape drawn.
pub fn task_conditions(seed: u64, set: TaskSet, slot: usize, n: usize) -> Vec<FlowConditions> {
    (0..n as u64)
        .map(|c| sample_condition(seed, (set_code(set) << 48) | ((slot as u64) << 16) | c))
        .collect()
}

fn build_slot(
    cfg: &ExperimentConfig,
    set: TaskSet,
    slot: usize,
    log: &(dyn Fn(String) + Sync),
) -> Result<Task> {
    let (dist, n_train, n_test, n_extra) = match set {
        TaskSet::Train => (ShapeDistribution::Train, cfg.cases_train, cfg.cases_test, cfg.cases_extra),
        TaskSet::ShapeInterp => (ShapeDistribution::Interp, cfg.eval_cases_train, cfg.eval_cases_test, 0),
        TaskSet::Ood => (ShapeDistribution::Ood, cfg.eval_cases_train, cfg.eval_cases_test, 0),
    };
    let conditions = task_conditions(cfg.data_seed, set, slot, n_train + n_test + n_extra);
    for attempt in 0..MAX_ATTEMPTS {
        let shape = sample_shape(dist, cfg.data_seed, slot as u64 + ((attempt as u64) << 32));
        let spec = TaskSpec {
            shape,
            set,
            conditions: conditions.clone(),
            n_train,
            n_test,
        };
        match build_task(&spec, &cfg.mesh) {
            Ok(t) => return Ok(t),
            Err(
                e @ (DataError::Airfoil(AirfoilError::DegenerateCell { .. } | AirfoilError::InvalidMesh(_))
                | DataError::Panel(_)
                | DataError::NonFinite(_)
                | DataError::TooFewNodes(_)),
            ) => {
                log(format!(
                    "{} slot {slot}: resampling shape {:.4}/{:.4}/{:.4} ({e})",
                    set.name(),
                    shape.camber,
                    shape.camber_position,
                    shape.thickness
                ));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(ExperimentError::Resample {
        set: set.name(),
        slot,
        attempts: MAX_ATTEMPTS,
    })
}

/// Builds every task of the configured meta-dataset. Shapes whose mesh or
/// flow solution fails are redrawn and reported through `log`.
pub fn generate(cfg: &ExperimentConfig, log: &(dyn Fn(String) + Sync)) -> Result<MetaDataset> {
    cfg.validate()?;
    let slots: Vec<(TaskSet, usize)> = [
        (TaskSet::Train, cfg.train_shapes),
        (TaskSet::ShapeInterp, cfg.interp_shapes),
        (TaskSet::Ood, cfg.ood_shapes),
    ]
    .iter()
    .flat_map(|&(s, n)| (0..n).map(move |i| (s, i)))
    .collect();
    let tasks = slots
        .par_iter()
        .map(|&(set, slot)| build_slot(cfg, set, slot, log))
        .collect::<Result<Vec<_>>>()?;
    let echo: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
    Ok(MetaDataset::new(
        tasks,
        cfg.folds[0],
        cfg.n_folds,
        cfg.data_seed,
        cfg.mesh,
        echo,
    ))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Maml,
    Baseline,
    BaselineFt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Maml, Method::Baseline, Method::BaselineFt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Maml => "maml",
            Method::Baseline => "baseline",
            Method::BaselineFt => "baseline_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "maml" => Ok(Method::Maml),
            "baseline" => Ok(Method::Baseline),
            "baseline_ft" => Ok(Method::BaselineFt),
            _ => Err(cfg_err(format!("unknown method {s:?}"))),
        }
    }

    /// The checkpoint a method's evaluation starts from.
    pub fn trained_as(self) -> Method {
        match self {
            Method::BaselineFt => Method::Baseline,
            m => m,
        }
    }
}

/// Checkpoint file name for one training run.
pub fn checkpoint_name(method: Method, seed: u64, fold: usize) -> String {
    format!("{}_s{seed}_f{fold}.ckpt", method.trained_as().name())
}

pub fn log_name(method: Method, seed: u64, fold: usize) -> String {
    format!("{}_s{seed}_f{fold}_log.csv", method.trained_as().name())
}

/// Result of one training run. On a numeric failure `model` holds the last
/// good parameters and `error` the cause.
pub struct TrainOutcome {
    pub model: GraphUNet,
    pub error: Option<MetaError>,
}

/// Trains `method` on the meta-train tasks of `fold`, starting from the
/// initialization drawn with `seed`.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &MetaDataset,
    method: Method,
    seed: u64,
    fold: usize,
    sink: impl FnMut(&[LogRow]),
) -> Result<TrainOutcome> {
    if method == Method::BaselineFt {
        return Err(cfg_err("baseline_ft is evaluated from the baseline checkpoint"));
    }
    let model = init_params(&cfg.model, seed)?;
    let (ids, _) = data.fold_partition(fold);
    if ids.is_empty() {
        return Err(MetaError::NoTasks.into());
    }
    let tasks: Vec<&Task> = ids.iter().map(|&i| &data.tasks[i]).collect();
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let learner = UNetLearner { config: cfg.model };
    let mut state = MetaState::from_model(&model);
    let r = match method {
        Method::Maml => train_maml(&mut state, &learner, &tasks, &ids, &tc, sink),
        _ => train_baseline(&mut state, &learner, &tasks, &ids, &tc, sink),
    };
    let model = GraphUNet {
        config: cfg.model,
        params: state.theta0,
    };
    match r {
        Ok(()) => Ok(TrainOutcome { model, error: None }),
        Err(e @ (MetaError::NonFinite { .. } | MetaError::Tensor(_))) => Ok(TrainOutcome { model, error: Some(e) }),
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// The three meta-test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    FlowInterp,
    ShapeInterp,
    Ood,
}

impl EvalSet {
    pub const ALL: [EvalSet; 3] = [EvalSet::FlowInterp, EvalSet::ShapeInterp, EvalSet::Ood];

    pub fn name(self) -> &'static str {
        match self {
            EvalSet::FlowInterp => "flow_interp",
            EvalSet::ShapeInterp => "shape_interp",
            EvalSet::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Result<EvalSet> {
        EvalSet::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| cfg_err(format!("unknown set {s:?}")))
    }
}

/// Tasks of `set` for `fold`. Flow interpolation reuses the fold's
/// meta-train shapes with their held-back conditions as test cases.
pub fn eval_tasks(data: &MetaDataset, set: EvalSet, fold: usize) -> Vec<(usize, Task)> {
    match set {
        EvalSet::FlowInterp => data
            .fold_partition(fold)
            .0
            .into_iter()
            .filter(|&i| !data.tasks[i].extra.is_empty())
            .map(|i| (i, data.tasks[i].flow_interp_view()))
            .collect(),
        EvalSet::ShapeInterp | EvalSet::Ood => {
            let want = if set == EvalSet::Ood {
                TaskSet::Ood
            } else {
                TaskSet::ShapeInterp
            };
            data.tasks
                .iter()
                .enumerate()
                .filter(|(_, t)| t.set == want)
                .map(|(i, t)| (i, t.clone()))
                .collect()
        }
    }
}

/// Test RMSE of one adapted model on one task, after each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub set: EvalSet,
    pub method: Method,
    pub seed: u64,
    pub fold: usize,
    pub task_id: usize,
    pub n_examples: usize,
    /// RMSE before adaptation and after each update; the baseline has one entry.
    pub curve: Vec<f64>,
}

impl TaskEval {
    pub fn rmse(&self) -> f64 {
        *self.curve.last().expect("non-empty curve")
    }
}

/// Per-node prediction of an adapted model on a test case.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePrediction {
    pub set: EvalSet,
    pub method: Method,
    pub seed: u64,
    pub fold: usize,
    pub task_id: usize,
    pub case: usize,
    pub node: usize,
    pub pred: [f64; 3],
    pub truth: [f64; 3],
}

impl NodePrediction {
    pub const HEADER: &'static str =
        "set,method,seed,fold,task_id,case,node,pred_u,pred_v,pred_p,true_u,true_v,true_p";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.set.name(),
            self.method.name(),
            self.seed,
            self.fold,
            self.task_id,
            self.case,
            self.node,
            self.pred[0],
            self.pred[1],
            self.pred[2],
            self.truth[0],
            self.truth[1],
            self.truth[2]
        )
    }
}

/// Adapts `start` to one task with `method` and returns its curve and the
/// adapted parameters.
pub fn adapt_task(
    method: Method,
    start: &GraphUNet,
    task: &Task,
    ft: &FineTune,
) -> Result<(GraphUNet, Vec<f64>)> {
    let learner = UNetLearner { config: start.config };
    let shapes: Vec<Vec<usize>> = start.layout().into_iter().map(|(_, s)| s).collect();
    let (params, curve) = match method {
        Method::Maml => meta_test_adapt(&learner, &start.params, &shapes, task, ft)?,
        Method::BaselineFt => finetune_baseline(&learner, &start.params, &shapes, task, ft)?,
        Method::Baseline => {
            let no_updates = FineTune { n_updates: 0, ..*ft };
            finetune_baseline(&learner, &start.params, &shapes, task, &no_updates)?
        }
    };
    Ok((
        GraphUNet {
            config: start.config,
            params,
        },
        curve,
    ))
}

fn node_predictions(
    adapted: &GraphUNet,
    task: &Task,
    key: (EvalSet, Method, u64, usize, usize),
) -> Result<Vec<NodePrediction>> {
    let (set, method, seed, fold, task_id) = key;
    let mut out = Vec::new();
    for &c in &task.test {
        let case = &task.cases[c];
        let pred = adapted.predict(&task.graph, &case.input)?;
        for node in 0..task.n_nodes() {
            let p = &pred[node * F_OUT..node * F_OUT + 3];
            let t = &case.target[node * F_OUT..node * F_OUT + 3];
            out.push(NodePrediction {
                set,
                method,
                seed,
                fold,
                task_id,
                case: c,
                node,
                pred: [p[0], p[1], p[2]],
                truth: [t[0], t[1], t[2]],
            });
        }
    }
    Ok(out)
}

/// Trained parameters keyed by `(method, seed, fold)`; `BaselineFt` is
/// looked up under `Baseline`.
pub type Checkpoints = BTreeMap<(Method, u64, usize), GraphUNet>;

fn checkpoint(models: &Checkpoints, method: Method, seed: u64, fold: usize) -> Result<&GraphUNet> {
    models.get(&(method.trained_as(), seed, fold)).ok_or_else(|| {
        ExperimentError::Io {
            path: PathBuf::from(checkpoint_name(method, seed, fold)),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing checkpoint"),
        }
    })
}

/// Evaluates every `(set, method, seed, fold, task)` with `n_examples`
/// adaptation cases and `n_updates` updates.
pub fn evaluate_runs(
    cfg: &ExperimentConfig,
    data: &MetaDataset,
    models: &Checkpoints,
    n_examples: usize,
    n_updates: usize,
    mut predictions: Option<&mut dyn FnMut(&NodePrediction)>,
) -> Result<Vec<TaskEval>> {
    let mut sets: BTreeMap<(EvalSet, usize), Vec<(usize, Task)>> = BTreeMap::new();
    for &fold in &cfg.folds {
        for set in EvalSet::ALL {
            sets.insert((set, fold), eval_tasks(data, set, fold));
        }
    }
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for &fold in &cfg.folds {
            for set in EvalSet::ALL {
                for method in Method::ALL {
                    let start = checkpoint(models, method, seed, fold)?;
                    for (id, task) in &sets[&(set, fold)] {
                        jobs.push((set, method, seed, fold, *id, start, task));
                    }
                }
            }
        }
    }
    let want_preds = predictions.is_some();
    let ft = cfg.fine_tune(n_examples, n_updates);
    let results = jobs
        .par_iter()
        .map(|(set, method, seed, fold, id, start, task)| {
            let (adapted, curve) = adapt_task(*method, start, task, &ft)?;
            let preds = if want_preds {
                node_predictions(&adapted, task, (*set, *method, *seed, *fold, *id))?
            } else {
                Vec::new()
            };
            Ok((
                TaskEval {
                    set: *set,
                    method: *method,
                    seed: *seed,
                    fold: *fold,
                    task_id: *id,
                    n_examples,
                    curve,
                },
                preds,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut evals = Vec::with_capacity(results.len());
    for (e, preds) in results {
        if let Some(sink) = predictions.as_mut() {
            preds.iter().for_each(sink);
        }
        evals.push(e);
    }
    Ok(evals)
}

/// Mean over tasks of the final RMSE, per `(set, method, seed, fold)`.
pub fn run_means(evals: &[TaskEval]) -> BTreeMap<(EvalSet, Method, u64, usize), f64> {
    let mut acc: BTreeMap<(EvalSet, Method, u64, usize), (f64, usize)> = BTreeMap::new();
    for e in evals {
        let a = acc.entry((e.set, e.method, e.seed, e.fold)).or_default();
        a.0 += e.rmse();
        a.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub set: EvalSet,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    /// Per-run values in `(seed, fold)` order.
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub set: EvalSet,
    pub method: Method,
    /// Two-sided exact signed-rank p-value of MAML against `method`.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<Cell>,
    pub comparisons: Vec<Comparison>,
    pub n_examples: usize,
    pub n_updates: usize,
    pub dataset_hash: String,
    pub config: Vec<(String, String)>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Two-sided exact Wilcoxon signed-rank p-value for paired samples. Zero
/// differences are dropped and tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> f64 {
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    assert!(n <= 30, "exact enumeration limited to 30 pairs");
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    // doubled ranks stay integral under ties
    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        ranks2[i..=j].iter_mut().for_each(|r| *r = r2);
        i = j + 1;
    }
    let total: u64 = ranks2.iter().sum();
    let w_obs: u64 = d.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    // distribution of the positive-rank sum by dynamic programming
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    for &r in &ranks2 {
        for s in (r as usize..=total as usize).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let dev = |w: u64| (2.0 * w as f64 - total as f64).abs();
    let obs = dev(w_obs);
    let extreme: f64 = counts
        .iter()
        .enumerate()
        .filter(|(w, _)| dev(*w as u64) >= obs - 1e-9)
        .map(|(_, c)| c)
        .sum();
    (extreme / 2f64.powi(n as i32)).min(1.0)
}

pub fn build_report(
    cfg: &ExperimentConfig,
    evals: &[TaskEval],
    dataset_hash: String,
    n_examples: usize,
    n_updates: usize,
) -> Report {
    let means = run_means(evals);
    let runs = |set: EvalSet, method: Method| -> Vec<f64> {
        means
            .iter()
            .filter(|((s, m, _, _), _)| *s == set && *m == method)
            .map(|(_, v)| *v)
            .collect()
    };
    let mut cells = Vec::new();
    let mut comparisons = Vec::new();
    for set in EvalSet::ALL {
        for method in Method::ALL {
            let r = runs(set, method);
            if r.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&r);
            cells.push(Cell {
                set,
                method,
                mean,
                std,
                runs: r,
            });
        }
        let maml = runs(set, Method::Maml);
        for method in [Method::Baseline, Method::BaselineFt] {
            let other = runs(set, method);
            if !maml.is_empty() && maml.len() == other.len() {
                comparisons.push(Comparison {
                    set,
                    method,
                    p_value: wilcoxon_signed_rank(&maml, &other),
                });
            }
        }
    }
    Report {
        cells,
        comparisons,
        n_examples,
        n_updates,
        dataset_hash,
        config: cfg.to_pairs(),
    }
}

impl Report {
    pub fn cell(&self, set: EvalSet, method: Method) -> Option<&Cell> {
        self.cells.iter().find(|c| c.set == set && c.method == method)
    }

    pub const CSV_HEADER: &'static str = "set,method,mean_rmse,std_rmse,runs,p_value_vs_maml";

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let p = self
                .comparisons
                .iter()
                .find(|x| x.set == c.set && x.method == c.method)
                .map(|x| format!("{:.6}", x.p_value))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{},{}",
                c.set.name(),
                c.method.name(),
                c.mean,
                c.std,
                c.runs.len(),
                p
            );
        }
        s
    }

    /// Plain-text table with one row per set and one column per method.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "RMSE after {} updates with {} examples (mean ± std over runs)",
            self.n_updates, self.n_examples
        );
        let _ = writeln!(s, "dataset {}", self.dataset_hash);
        let _ = writeln!(s, "{:<14}{:>24}{:>24}{:>24}", "set", "maml", "baseline", "baseline_ft");
        for set in EvalSet::ALL {
            let _ = write!(s, "{:<14}", set.name());
            for method in Method::ALL {
                match self.cell(set, method) {
                    Some(c) => {
                        let _ = write!(s, "{:>24}", format!("{:.4e} ± {:.2e}", c.mean, c.std));
                    }
                    None => {
                        let _ = write!(s, "{:>24}", "-");
                    }
                }
            }
            s.push('\n');
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "signed-rank p (maml vs {}) on {}: {:.4}",
                c.method.name(),
                c.set.name(),
                c.p_value
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    GradientUpdates,
    NExamples,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "gradient_updates" => Ok(SweepAxis::GradientUpdates),
            "n_examples" => Ok(SweepAxis::NExamples),
            _ => Err(cfg_err(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub set: EvalSet,
    pub method: Method,
    pub axis_value: usize,
    pub seed: u64,
    pub fold: usize,
    pub rmse: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "set,method,axis_value,seed,fold,rmse";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:e}",
            self.set.name(),
            self.method.name(),
            self.axis_value,
            self.seed,
            self.fold,
            self.rmse
        )
    }
}

/// Mean-over-tasks RMSE along one axis: updates `0..=sweep_updates` with
/// `n_examples` cases, or each size in `grid` with `n_updates` updates.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &MetaDataset,
    models: &Checkpoints,
    axis: SweepAxis,
    grid: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    match axis {
        SweepAxis::GradientUpdates => {
            let max = grid.iter().copied().max().unwrap_or(cfg.sweep_updates);
            let evals = evaluate_runs(cfg, data, models, cfg.n_examples, max, None)?;
            let mut acc: BTreeMap<(EvalSet, Method, u64, usize), Vec<&TaskEval>> = BTreeMap::new();
            for e in &evals {
                acc.entry((e.set, e.method, e.seed, e.fold)).or_default().push(e);
            }
            for ((set, method, seed, fold), es) in acc {
                for &k in grid {
                    let rmse = es.iter().map(|e| e.curve[k.min(e.curve.len() - 1)]).sum::<f64>() / es.len() as f64;
                    rows.push(SweepRow {
                        set,
                        method,
                        axis_value: k,
                        seed,
                        fold,
                        rmse,
                    });
                }
            }
        }
        SweepAxis::NExamples => {
            for &n in grid {
                let evals = evaluate_runs(cfg, data, models, n, cfg.n_updates, None)?;
                for ((set, method, seed, fold), rmse) in run_means(&evals) {
                    rows.push(SweepRow {
                        set,
                        method,
                        axis_value: n,
                        seed,
                        fold,
                        rmse,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.set, a.method, a.seed, a.fold, a.axis_value).cmp(&(b.set, b.method, b.seed, b.fold, b.axis_value))
    });
    Ok(rows)
}

/// Median of a non-empty slice.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
