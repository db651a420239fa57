//! Weight standardization and batch-channel normalization, built on a small
//! deterministic reverse-mode tape, with the diagnostics needed to check the
//! smoothness and channel-statistics claims behind those reparameterizations
//! at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors, the autodiff tape, convolution kernels, and
//!   finite-difference oracles;
//! * [`reparam`] — weight standardization and its competitors (weight norm,
//!   centered weight norm, projected gradient steps);
//! * [`norm`] — activation normalization (batch, channel/group, fixed-stats,
//!   batch-channel in large-batch and micro-batch estimator forms);
//! * [`diagnostics`] — statistics spread, gradient-identity residuals,
//!   Hessian probes, and underrepresentation rates, all pure readers;
//! * [`model`] / [`train`] — small reference architectures and a seeded
//!   training loop with gradient accumulation;
//! * [`data`], [`config`], [`checkpoint`], [`metrics`] — dataset loading,
//!   flat config files, binary checkpoints, and CSV/JSON metrics;
//! * [`verify`] — the gradient/Hessian/identity verification suites the CLI
//!   and the acceptance tests share.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod guide;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod reparam;
pub mod seeds;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Grouping, Precision, Tape, Tensor, TensorId};
