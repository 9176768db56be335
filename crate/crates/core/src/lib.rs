//! Sparse and dendritic neural networks on a small reverse-mode autograd core.
//!
//! Everything is 64-bit and single-threaded per model; experiment drivers live
//! in [`harness`].

pub mod autograd;
pub mod datasets;
pub mod dendrite;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optimize;
pub mod sparsity;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use datasets::{LabeledSet, TaskStream};
pub use dendrite::{ContextKind, ContextSpec, DendriteBank};
pub use error::{Error, Result};
pub use nn::{Activation, ArchitectureSpec, LayerSpec, Model, Parameter, PresetOptions};
pub use optimize::{Optimizer, OptimizerConfig, OptimizerKind};
pub use sparsity::{InitSnapshot, PruneSchedule, SparsityMask};
pub use tensor::Tensor;
