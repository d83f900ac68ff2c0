//! Multimodal graph condensation with modality-decoupled gradient matching and
//! structural damping.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide dense
//! and sparse matrices with a reverse-mode tape that supports gradients of
//! gradients; [`graph`] and [`dataset`] hold graph structure and the on-disk
//! format; [`models`] implements the GNN classifiers; [`condense`] is the
//! bilevel condensation loop; [`eval`] and [`diagnostics`] measure results.

pub mod autodiff;
pub mod condense;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod graph;
pub mod models;
pub mod store;
pub mod tensor;

pub use autodiff::{DifferentiableExpr, Tape, Var};
pub use condense::{condense, CondenseConfig, CondenseError, GradientField, MetricsLog, Mode, SyntheticGraph};
pub use dataset::{generate_synthetic, load_dataset, save_dataset, ModalitySplit, MultimodalGraph, SynthGenParams};
pub use error::{AutodiffError, DatasetError, GraphError, ModelError, ShapeError};
pub use eval::{EvalConfig, EvalError, EvalReport};
pub use graph::{dirichlet_energy, DenseAdjacency, SparseAdjacency};
pub use models::{Architecture, ModelParams};
pub use store::{load_condensed, save_condensed};
pub use tensor::{CsrMatrix, Tensor};
