//! Structured channel pruning for model-based deep-learning reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autodiff`]: a small dense tensor engine with
//!   reverse-mode differentiation.
//! * [`model`]: declarative CNN graphs, cost counting and weight files.
//! * [`prune`]: dependency analysis, layer groups, group-ℓ1 scoring and the
//!   physical rewrite of a network.
//! * [`physics`]: MRI and super-resolution measurement operators.
//! * [`solvers`]: plug-and-play, unrolled and equilibrium reconstruction.
//! * [`finetune`]: supervised, teacher-student and self-supervised recovery.
//! * [`bench`]: synthetic data, metrics and the experiment harness.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod finetune;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod physics;
pub mod prune;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::Mode;
pub use tensor::{DType, Tensor};
