//! Fixed-point inference engine for ternary MatMul-free language models.
//!
//! [`fxp`] and [`kernels`] hold the integer arithmetic, [`layers`] composes
//! them into the recurrent model, [`oracle`] is an independent floating-point
//! reference, [`container`] reads and writes the MMFL model format, and
//! [`perfmodel`] projects throughput and energy for chip deployments.

pub mod container;
pub mod fxp;
pub mod kernels;
pub mod layers;
pub mod oracle;
pub mod perfmodel;
pub mod quantizer;

pub use container::{load, save, ContainerError, ModelConfig};
pub use kernels::{FxTensor, OpCounters, TernaryMatrix};
pub use layers::{Mode, Model, Sampler, Session};
