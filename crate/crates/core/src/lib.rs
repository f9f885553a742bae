//! Meta-learned graph surrogates for airfoil flow.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: reverse-mode autodiff with differentiable backward passes
//! * [`airfoil`]: NACA 4-digit contours, O-grid meshes and parameter sampling
//! * [`panelflow`]: linear-vortex panel solver used as ground truth
//! * [`graphdata`]: mesh graphs, tasks, meta-datasets and their file format
//! * [`gnn`]: MoNet convolution, k-NN pooling and the Graph U-Net
//! * [`meta`]: MAML with multi-step loss, fine-tuning and the supervised baseline
//! * [`experiment`]: the end-to-end protocol behind the `metaflow` CLI

pub mod airfoil;
pub mod experiment;
pub mod gnn;
pub mod graphdata;
pub mod meta;
pub mod panelflow;
pub mod rng;
pub mod tensor;

pub use airfoil::{AirfoilContour, FlowConditions, MeshHierarchy, NacaParams, ShapeDistribution};
pub use experiment::{ExperimentConfig, ExperimentError};
pub use gnn::{GraphUNet, ModelConfig};
pub use graphdata::{MeshGraph, MetaDataset, Task};
pub use meta::{MetaState, TrainConfig};
pub use panelflow::{FlowField, PanelSolution};
pub use tensor::Tensor;
