//! Deterministic CPU training engine with per-neuron equilibrium tracking
//! and selective freezing of weight-gradient computation.
//!
//! The crate is organized around six pieces:
//! * [`tensor`], [`ops`], [`autodiff`]: dense tensors, primitive kernels,
//!   and reverse-mode differentiation with per-neuron gradient gating;
//! * [`model`]: layer specs, desk-scale reference architectures, neuron
//!   enumeration, and checkpoints;
//! * [`tracker`]: output-signature extraction, cosine-similarity velocity,
//!   and the equilibrium freeze rule;
//! * [`train`], [`optim`], [`schedule`], [`policy`]: the epoch loop with
//!   gated SGD/Adam updates, step decay, and freezing policies (equilibrium,
//!   stochastic, none, replay);
//! * [`flops`]: the analytic backward-pass cost model;
//! * [`config`], [`data`], [`metrics`], [`plot`], [`runner`]: the experiment
//!   harness.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
