//! Exact infinite-width NTK ensembles, finite-width deep ensembles and
//! equivariance diagnostics under group-orbit data augmentation.

pub mod config;
pub mod dynamics;
pub mod ensemble;
pub mod groups;
pub mod kernels;
pub mod metrics;
pub mod netspec;
pub mod pipeline;
pub mod tasks;
pub mod verify;

pub use kernels::{compute_kernel, gram, ConvPadding, GramSystem, KernelEngine, KernelError, KernelPair};
pub use netspec::{Activation, LayerSpec, NetworkSpec, Shape, SpecError};
