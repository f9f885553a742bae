//! Mesh graphs, flow cases, tasks and the on-disk dataset format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::airfoil::{
    build_ogrid_with, coarsen, naca4_contour, AirfoilError, FlowConditions, MeshHierarchy,
    NacaParams, OgridParams, MID_CHORD,
};
use crate::gnn::knn_map;
use crate::panelflow::{evaluate_field, normalize_fields, solve_panels, FlowField, PanelError, PanelSolution};
use crate::tensor::{EdgeIndex, SparseMap};

pub const FORMAT_VERSION: u32 = 1;
const PAYLOAD_MAGIC: &[u8; 4] = b"MFG1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Input channels per node (freestream components).
pub const F_IN: usize = 2;
/// Output channels per node (normalized velocity and pressure).
pub const F_OUT: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("unsupported dataset format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed payload {file}: {msg}")]
    Payload { file: PathBuf, msg: String },
    #[error("cropping keeps only {0} nodes (need at least 10)")]
    TooFewNodes(usize),
    #[error("crop radius {radius} exceeds the mesh outer radius {outer}")]
    CropRadius { radius: f64, outer: f64 },
    #[error("non-finite value in flow solution at node {0}")]
    NonFinite(usize),
    #[error("task needs more than {n_train} cases, has {cases}")]
    InsufficientCases { n_train: usize, cases: usize },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error(transparent)]
    Airfoil(#[from] AirfoilError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One resolution level: nodes at cell centroids, directed edges `(i, j)`
/// meaning `j ∈ N(i)`, and edge attributes `c_j − c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLevel {
    pub coords: Vec<[f64; 2]>,
    pub edges: Vec<(u32, u32)>,
    pub edge_attr: Vec<[f64; 2]>,
    index: Arc<EdgeIndex>,
    mean_edge_len: f64,
}

impl GraphLevel {
    pub fn new(coords: Vec<[f64; 2]>, edges: Vec<(u32, u32)>) -> Result<GraphLevel> {
        let edge_attr = edges
            .iter()
            .map(|&(i, j)| {
                let (ci, cj) = (coords[i as usize], coords[j as usize]);
                [cj[0] - ci[0], cj[1] - ci[1]]
            })
            .collect();
        GraphLevel::with_attrs(coords, edges, edge_attr)
    }

    fn with_attrs(
        coords: Vec<[f64; 2]>,
        edges: Vec<(u32, u32)>,
        edge_attr: Vec<[f64; 2]>,
    ) -> Result<GraphLevel> {
        let index = EdgeIndex::new(coords.len(), &edges)
            .map_err(|e| DataError::Graph(e.to_string()))?;
        let mean_edge_len = if edge_attr.is_empty() {
            1.0
        } else {
            edge_attr.iter().map(|e| e[0].hypot(e[1])).sum::<f64>() / edge_attr.len() as f64
        };
        Ok(GraphLevel {
            coords,
            edges,
            edge_attr,
            index: Arc::new(index),
            mean_edge_len,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn index(&self) -> &Arc<EdgeIndex> {
        &self.index
    }

    pub fn mean_edge_len(&self) -> f64 {
        self.mean_edge_len
    }
}

/// Graph hierarchy with parent links and k-NN interpolation maps between levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGraph {
    pub levels: Vec<GraphLevel>,
    /// `parents[k][i]`: node of level `k+1` that contains node `i` of level `k`.
    pub parents: Vec<Vec<u32>>,
    pub k_pool: usize,
    /// Level `k` to level `k+1` (rows are coarse nodes).
    down: Vec<Arc<SparseMap>>,
    /// Level `k+1` to level `k` (rows are fine nodes).
    up: Vec<Arc<SparseMap>>,
}

impl MeshGraph {
    pub fn new(levels: Vec<GraphLevel>, parents: Vec<Vec<u32>>, k_pool: usize) -> Result<MeshGraph> {
        if levels.is_empty() || parents.len() + 1 != levels.len() {
            return Err(DataError::Graph(format!(
                "{} levels need {} parent maps, got {}",
                levels.len(),
                levels.len().saturating_sub(1),
                parents.len()
            )));
        }
        for (k, p) in parents.iter().enumerate() {
            let n_coarse = levels[k + 1].n_nodes() as u32;
            if p.len() != levels[k].n_nodes() || p.iter().any(|&c| c >= n_coarse) {
                return Err(DataError::Graph(format!("parent map {k} is inconsistent")));
            }
        }
        let mut down = Vec::new();
        let mut up = Vec::new();
        for k in 0..levels.len() - 1 {
            let (fine, coarse) = (&levels[k].coords, &levels[k + 1].coords);
            let map = |src: &[[f64; 2]], dst: &[[f64; 2]]| {
                knn_map(src, dst, k_pool.min(src.len()))
                    .map(Arc::new)
                    .map_err(|e| DataError::Graph(e.to_string()))
            };
            down.push(map(fine, coarse)?);
            up.push(map(coarse, fine)?);
        }
        Ok(MeshGraph {
            levels,
            parents,
            k_pool,
            down,
            up,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.levels[0].n_nodes()
    }

    pub fn down(&self, level: usize) -> &Arc<SparseMap> {
        &self.down[level]
    }

    pub fn up(&self, level: usize) -> &Arc<SparseMap> {
        &self.up[level]
    }
}

/// Centroid graph of every level with shared-edge adjacency.
pub fn mesh_to_graph(h: &MeshHierarchy, k_pool: usize) -> Result<MeshGraph> {
    let mut levels = Vec::with_capacity(h.levels.len());
    let mut parents = Vec::new();
    for l in &h.levels {
        let edges = l
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().map(move |&j| (i as u32, j)))
            .collect();
        levels.push(GraphLevel::new(l.centroids.clone(), edges)?);
        if let Some(p) = &l.parent {
            parents.push(p.clone());
        }
    }
    MeshGraph::new(levels, parents, k_pool)
}

/// Keeps level-0 nodes within `radius` of mid-chord and, on coarser levels,
/// every node with at least one kept child. Returns the cropped graph and
/// the kept original node ids per level.
pub fn crop_graph(g: &MeshGraph, radius: f64) -> Result<(MeshGraph, Vec<Vec<u32>>)> {
    let mut keep: Vec<Vec<bool>> = Vec::with_capacity(g.n_levels());
    keep.push(
        g.levels[0]
            .coords
            .iter()
            .map(|&c| crate::airfoil::dist(c, MID_CHORD) <= radius)
            .collect(),
    );
    let n0 = keep[0].iter().filter(|&&k| k).count();
    if n0 < 10 {
        return Err(DataError::TooFewNodes(n0));
    }
    for k in 0..g.n_levels() - 1 {
        let mut next = vec![false; g.levels[k + 1].n_nodes()];
        for (i, &p) in g.parents[k].iter().enumerate() {
            if keep[k][i] {
                next[p as usize] = true;
            }
        }
        keep.push(next);
    }
    let kept: Vec<Vec<u32>> = keep
        .iter()
        .map(|m| (0..m.len() as u32).filter(|&i| m[i as usize]).collect())
        .collect();
    let remap: Vec<Vec<Option<u32>>> = keep
        .iter()
        .map(|m| {
            let mut next = 0u32;
            m.iter()
                .map(|&k| {
                    k.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        })
        .collect();
    let mut levels = Vec::with_capacity(g.n_levels());
    for (k, l) in g.levels.iter().enumerate() {
        let coords = kept[k].iter().map(|&i| l.coords[i as usize]).collect();
        let (edges, attrs) = l
            .edges
            .iter()
            .zip(&l.edge_attr)
            .filter_map(|(&(i, j), &a)| {
                Some(((remap[k][i as usize]?, remap[k][j as usize]?), a))
            })
            .unzip();
        levels.push(GraphLevel::with_attrs(coords, edges, attrs)?);
    }
    let parents = (0..g.n_levels() - 1)
        .map(|k| {
            kept[k]
                .iter()
                .map(|&i| remap[k + 1][g.parents[k][i as usize] as usize].unwrap())
                .collect()
        })
        .collect();
    Ok((MeshGraph::new(levels, parents, g.k_pool)?, kept))
}

/// Crops the graph and a level-0 field consistently.
pub fn crop_domain(
    g: &MeshGraph,
    fields: &FlowField,
    radius: f64,
    outer_radius: f64,
) -> Result<(MeshGraph, FlowField)> {
    if radius > outer_radius {
        return Err(DataError::CropRadius {
            radius,
            outer: outer_radius,
        });
    }
    let (cropped, kept) = crop_graph(g, radius)?;
    let f = FlowField {
        velocity: kept[0].iter().map(|&i| fields.velocity[i as usize]).collect(),
        pressure: kept[0].iter().map(|&i| fields.pressure[i as usize]).collect(),
    };
    Ok((cropped, f))
}

/// One flow condition on a task's graph: `input` is `n × 2`, `target` is `n × 3`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub conditions: FlowConditions,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Builds a case from an already evaluated level-0 field.
pub fn case_from_field(cond: FlowConditions, u0: [f64; 2], field: &FlowField) -> Result<Case> {
    let n = field.velocity.len();
    let norm = normalize_fields(field, u0)?;
    let mut target = Vec::with_capacity(n * F_OUT);
    for i in 0..n {
        let row = [norm.velocity[i][0], norm.velocity[i][1], norm.pressure[i]];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        target.extend_from_slice(&row);
    }
    let input = (0..n).flat_map(|_| u0).collect();
    Ok(Case {
        conditions: cond,
        input,
        target,
    })
}

/// Evaluates the panel solution at the level-0 nodes of `g`.
pub fn build_case(g: &MeshGraph, cond: FlowConditions, sol: &PanelSolution) -> Result<Case> {
    let field = evaluate_field(sol, &g.levels[0].coords)?;
    case_from_field(cond, sol.u0, &field)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSet {
    Train,
    ShapeInterp,
    Ood,
}

impl TaskSet {
    pub fn name(self) -> &'static str {
        match self {
            TaskSet::Train => "train",
            TaskSet::ShapeInterp => "shape_interp",
            TaskSet::Ood => "ood",
        }
    }
}

/// One airfoil: a graph shared by all of its cases, and a split of the cases.
/// `extra` holds the held-back conditions used for flow interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub shape: NacaParams,
    pub set: TaskSet,
    pub graph: Arc<MeshGraph>,
    pub cases: Vec<Case>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub extra: Vec<usize>,
}

impl Task {
    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Stacked inputs and targets of the selected cases (`B·n × 2`, `B·n × 3`).
    pub fn batch(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(indices.len() * self.n_nodes() * F_IN);
        let mut y = Vec::with_capacity(indices.len() * self.n_nodes() * F_OUT);
        for &c in indices {
            x.extend_from_slice(&self.cases[c].input);
            y.extend_from_slice(&self.cases[c].target);
        }
        (x, y)
    }

    /// Same task with the held-back conditions as its test split.
    pub fn flow_interp_view(&self) -> Task {
        Task {
            test: self.extra.clone(),
            extra: Vec::new(),
            ..self.clone()
        }
    }
}

/// Mesh and preprocessing settings shared by every task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub n_per_side: usize,
    pub ogrid: OgridParams,
    /// Number of coarsening steps (levels − 1).
    pub coarsenings: usize,
    pub crop_radius: f64,
    pub k_pool: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            n_per_side: 32,
            ogrid: OgridParams::default(),
            coarsenings: 3,
            crop_radius: 2.0,
            k_pool: 6,
        }
    }
}

/// Cropped graph for one airfoil shape.
pub fn shape_graph(shape: &NacaParams, mesh: &MeshConfig) -> Result<(crate::airfoil::AirfoilContour, MeshGraph)> {
    let contour = naca4_contour(shape, mesh.n_per_side)?;
    let h = coarsen(&build_ogrid_with(&contour, &mesh.ogrid)?, mesh.coarsenings)?;
    let g = mesh_to_graph(&h, mesh.k_pool)?;
    if mesh.crop_radius > h.outer_radius {
        return Err(DataError::CropRadius {
            radius: mesh.crop_radius,
            outer: h.outer_radius,
        });
    }
    let (g, _) = crop_graph(&g, mesh.crop_radius)?;
    Ok((contour, g))
}

/// What to generate for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub shape: NacaParams,
    pub set: TaskSet,
    pub conditions: Vec<FlowConditions>,
    pub n_train: usize,
    /// Cases after the first `n_train + n_test` go to `extra`.
    pub n_test: usize,
}

pub fn build_task(spec: &TaskSpec, mesh: &MeshConfig) -> Result<Task> {
    let n = spec.conditions.len();
    if spec.n_train == 0 || spec.n_train >= n || spec.n_train + spec.n_test > n {
        return Err(DataError::InsufficientCases {
            n_train: spec.n_train,
            cases: n,
        });
    }
    let (contour, graph) = shape_graph(&spec.shape, mesh)?;
    let cases = spec
        .conditions
        .iter()
        .map(|c| build_case(&graph, *c, &solve_panels(&contour, c)?))
        .collect::<Result<Vec<_>>>()?;
    let split = spec.n_train + spec.n_test;
    Ok(Task {
        shape: spec.shape,
        set: spec.set,
        graph: Arc::new(graph),
        cases,
        train: (0..spec.n_train).collect(),
        test: (spec.n_train..split).collect(),
        extra: (split..n).collect(),
    })
}

/// All tasks plus a shape-level k-fold partition of the training tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub tasks: Vec<Task>,
    pub fold: usize,
    pub n_folds: usize,
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
    pub seed: u64,
    pub mesh: MeshConfig,
    pub config: BTreeMap<String, String>,
}

impl MetaDataset {
    pub fn new(
        tasks: Vec<Task>,
        fold: usize,
        n_folds: usize,
        seed: u64,
        mesh: MeshConfig,
        config: BTreeMap<String, String>,
    ) -> MetaDataset {
        let mut d = MetaDataset {
            tasks,
            fold,
            n_folds,
            meta_train: Vec::new(),
            meta_test: Vec::new(),
            seed,
            mesh,
            config,
        };
        d.set_fold(fold);
        d
    }

    /// Training task number `r` is held out when `r % n_folds == fold`.
    pub fn set_fold(&mut self, fold: usize) {
        let (train, test) = self.fold_partition(fold);
        self.fold = fold;
        self.meta_train = train;
        self.meta_test = test;
    }

    /// `(meta_train, meta_test)` task indices for `fold`.
    pub fn fold_partition(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut meta_train = Vec::new();
        let mut meta_test = Vec::new();
        let train = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.set == TaskSet::Train);
        for (r, (i, _)) in train.enumerate() {
            if r % self.n_folds.max(1) == fold {
                meta_test.push(i);
            } else {
                meta_train.push(i);
            }
        }
        (meta_train, meta_test)
    }

    pub fn tasks_in(&self, set: TaskSet) -> Vec<&Task> {
        self.tasks.iter().filter(|t| t.set == set).collect()
    }

    pub fn total_cases(&self) -> usize {
        self.tasks.iter().map(|t| t.cases.len()).sum()
    }
}

/// Generates every task (in parallel) and partitions by `fold`.
pub fn assemble_meta_dataset(
    specs: &[TaskSpec],
    mesh: &MeshConfig,
    fold: usize,
    seed: u64,
    config: BTreeMap<String, String>,
) -> Result<MetaDataset> {
    let tasks = specs
        .par_iter()
        .map(|s| build_task(s, mesh))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaDataset::new(tasks, fold, 10, seed, *mesh, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestCase {
    aoa: f64,
    mach: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestLevel {
    nodes: usize,
    edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestTask {
    id: usize,
    set: TaskSet,
    shape: NacaParams,
    levels: Vec<ManifestLevel>,
    cases: Vec<ManifestCase>,
    train: Vec<usize>,
    test: Vec<usize>,
    extra: Vec<usize>,
    payload: String,
    crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    fold: usize,
    n_folds: usize,
    mesh: MeshConfig,
    config: BTreeMap<String, String>,
    total_cases: usize,
    tasks: Vec<ManifestTask>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Payload {
                file: self.file.to_path_buf(),
                msg: "unexpected end of data".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn pairs(&mut self, n: usize) -> Result<Vec<[f64; 2]>> {
        (0..n).map(|_| Ok([self.f64()?, self.f64()?])).collect()
    }
}

fn encode_task(t: &Task) -> Vec<u8> {
    let g = &t.graph;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(PAYLOAD_MAGIC);
    w.u64(g.n_levels());
    w.u64(t.cases.len());
    w.u64(g.k_pool);
    for l in &g.levels {
        w.u64(l.n_nodes());
        w.u64(l.n_edges());
    }
    for v in [t.shape.camber, t.shape.camber_position, t.shape.thickness] {
        w.f64(v);
    }
    for c in &t.cases {
        w.f64(c.conditions.aoa_deg);
        w.f64(c.conditions.mach);
    }
    for l in &g.levels {
        l.coords.iter().flatten().for_each(|&v| w.f64(v));
    }
    for l in &g.levels {
        for &(i, j) in &l.edges {
            w.u32(i);
            w.u32(j);
        }
    }
    for l in &g.levels {
        l.edge_attr.iter().flatten().for_each(|&v| w.f64(v));
    }
    for p in &g.parents {
        p.iter().for_each(|&v| w.u32(v));
    }
    for c in &t.cases {
        c.input.iter().for_each(|&v| w.f64(v));
    }
    for c in &t.cases {
        c.target.iter().for_each(|&v| w.f64(v));
    }
    w.0
}

fn decode_task(buf: &[u8], file: &Path, m: &ManifestTask) -> Result<Task> {
    let bad = |msg: String| DataError::Payload {
        file: file.to_path_buf(),
        msg,
    };
    let mut r = Reader { buf, pos: 0, file };
    if r.take(4)? != PAYLOAD_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let n_levels = r.u64()?;
    let n_cases = r.u64()?;
    let k_pool = r.u64()?;
    if n_levels == 0 || n_levels > 64 || n_cases != m.cases.len() {
        return Err(bad(format!("header: {n_levels} levels, {n_cases} cases")));
    }
    let mut dims = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        dims.push((r.u64()?, r.u64()?));
    }
    let expect: Vec<(usize, usize)> = m.levels.iter().map(|l| (l.nodes, l.edges)).collect();
    if dims != expect {
        return Err(bad("level sizes disagree with the manifest".into()));
    }
    let s = r.f64s(3)?;
    let shape = NacaParams {
        camber: s[0],
        camber_position: s[1],
        thickness: s[2],
    };
    let conds = (0..n_cases)
        .map(|_| {
            Ok(FlowConditions {
                aoa_deg: r.f64()?,
                mach: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let coords = dims
        .iter()
        .map(|&(n, _)| r.pairs(n))
        .collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::with_capacity(n_levels);
    for &(_, e) in &dims {
        edges.push((0..e).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?);
    }
    let attrs = dims
        .iter()
        .map(|&(_, e)| r.pairs(e))
        .collect::<Result<Vec<_>>>()?;
    let mut parents = Vec::with_capacity(n_levels - 1);
    for &(n, _) in &dims[..n_levels - 1] {
        parents.push((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
    }
    let n0 = dims[0].0;
    let inputs = (0..n_cases)
        .map(|_| r.f64s(n0 * F_IN))
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..n_cases)
        .map(|_| r.f64s(n0 * F_OUT))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let levels = coords
        .into_iter()
        .zip(edges)
        .zip(attrs)
        .map(|((c, e), a)| GraphLevel::with_attrs(c, e, a))
        .collect::<Result<Vec<_>>>()?;
    let graph = MeshGraph::new(levels, parents, k_pool)?;
    let cases = conds
        .into_iter()
        .zip(inputs.into_iter().zip(targets))
        .map(|(conditions, (input, target))| Case {
            conditions,
            input,
            target,
        })
        .collect();
    let all = m.train.iter().chain(&m.test).chain(&m.extra);
    if all.clone().any(|&i| i >= n_cases) {
        return Err(DataError::Manifest(format!("task {} split index out of range", m.id)));
    }
    Ok(Task {
        shape,
        set: m.set,
        graph: Arc::new(graph),
        cases,
        train: m.train.clone(),
        test: m.test.clone(),
        extra: m.extra.clone(),
    })
}

fn payload_name(i: usize) -> String {
    format!("task_{i:04}.bin")
}

/// Writes one payload per task, then the manifest.
pub fn save_dataset(d: &MetaDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries = d
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let bytes = encode_task(t);
            let name = payload_name(i);
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            Ok(ManifestTask {
                id: i,
                set: t.set,
                shape: t.shape,
                levels: t
                    .graph
                    .levels
                    .iter()
                    .map(|l| ManifestLevel {
                        nodes: l.n_nodes(),
                        edges: l.n_edges(),
                    })
                    .collect(),
                cases: t
                    .cases
                    .iter()
                    .map(|c| ManifestCase {
                        aoa: c.conditions.aoa_deg,
                        mach: c.conditions.mach,
                    })
                    .collect(),
                train: t.train.clone(),
                test: t.test.clone(),
                extra: t.extra.clone(),
                payload: name,
                crc32: format!("{:08x}", crc32fast::hash(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: "metaflow-dataset".into(),
        version: FORMAT_VERSION,
        seed: d.seed,
        fold: d.fold,
        n_folds: d.n_folds,
        mesh: d.mesh,
        config: d.config.clone(),
        total_cases: d.total_cases(),
        tasks: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

fn read_manifest(dir: &Path) -> Result<(Manifest, Vec<u8>)> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| DataError::Manifest(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(DataError::Version { found: v as u32 }),
        None => return Err(DataError::Manifest("missing version".into())),
    }
    let m: Manifest =
        serde_json::from_value(value).map_err(|e| DataError::Manifest(e.to_string()))?;
    let sum: usize = m.tasks.iter().map(|t| t.cases.len()).sum();
    if sum != m.total_cases {
        return Err(DataError::Manifest(format!(
            "total_cases {} but tasks list {sum}",
            m.total_cases
        )));
    }
    Ok((m, bytes))
}

pub fn load_dataset(dir: &Path) -> Result<MetaDataset> {
    let (m, _) = read_manifest(dir)?;
    let tasks = m
        .tasks
        .par_iter()
        .map(|t| {
            let path = dir.join(&t.payload);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if format!("{:08x}", crc32fast::hash(&bytes)) != t.crc32 {
                return Err(DataError::Checksum(path));
            }
            decode_task(&bytes, &path, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaDataset::new(
        tasks, m.fold, m.n_folds, m.seed, m.mesh, m.config,
    ))
}

/// SHA-256 of the manifest (which pins every payload by checksum).
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let (_, bytes) = read_manifest(dir)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Short summary of a dataset directory without reading payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub version: u32,
    pub seed: u64,
    pub fold: usize,
    pub tasks_per_set: BTreeMap<TaskSet, usize>,
    pub cases_per_set: BTreeMap<TaskSet, usize>,
    pub total_cases: usize,
    pub level_nodes: Vec<(usize, usize)>,
}

pub fn summarize_dataset(dir: &Path) -> Result<DatasetSummary> {
    let (m, _) = read_manifest(dir)?;
    let mut tasks_per_set = BTreeMap::new();
    let mut cases_per_set = BTreeMap::new();
    for t in &m.tasks {
        *tasks_per_set.entry(t.set).or_insert(0) += 1;
        *cases_per_set.entry(t.set).or_insert(0) += t.cases.len();
    }
    let nl = m.tasks.iter().map(|t| t.levels.len()).max().unwrap_or(0);
    let level_nodes = (0..nl)
        .map(|k| {
            let counts = m.tasks.iter().filter_map(|t| t.levels.get(k).map(|l| l.nodes));
            (counts.clone().min().unwrap_or(0), counts.max().unwrap_or(0))
        })
        .collect();
    Ok(DatasetSummary {
        version: m.version,
        seed: m.seed,
        fold: m.fold,
        tasks_per_set,
        cases_per_set,
        total_cases: m.total_cases,
        level_nodes,
    })
}

/// One row per level-0 node per case.
pub fn export_csv(d: &MetaDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "task,case,level,node,x,y,aoa,mach,u0x,u0y,ubar_x,ubar_y,pbar")?;
        for (ti, t) in d.tasks.iter().enumerate() {
            let coords = &t.graph.levels[0].coords;
            for (ci, c) in t.cases.iter().enumerate() {
                for (n, xy) in coords.iter().enumerate() {
                    let x = &c.input[n * F_IN..(n + 1) * F_IN];
                    let y = &c.target[n * F_OUT..(n + 1) * F_OUT];
                    writeln!(
                        out,
                        "{ti},{ci},0,{n},{},{},{},{},{},{},{},{},{}",
                        xy[0],
                        xy[1],
                        c.conditions.aoa_deg,
                        c.conditions.mach,
                        x[0],
                        x[1],
                        y[0],
                        y[1],
                        y[2]
                    )?;
                }
            }
        }
        out.flush()
    };
    write().map_err(io_err(path))
}
