//! Desk-scale multimodal training toolkit.
//!
//! Three pieces fit together here:
//!
//! * a minimal deterministic f64 tensor core with reverse-mode
//!   differentiation and the layers of small Conv-BN-ReLU classifiers
//!   ([`tensor`], [`ops`], [`tape`], [`optim`], [`metrics`]);
//! * BatchNorm health tooling: exact forward/backward ([`batchnorm`]),
//!   abnormal-parameter and dead-channel diagnostics with controlled
//!   pathology injection ([`diagnostics`]), and the adaptive
//!   re-initialization wrapper that blends each original BN layer with a
//!   freshly initialized one;
//! * two-stage fusion tuning for paired-modality classifiers: uni-modal
//!   fine-tuning with per-sample confidence recording, a confidence-driven
//!   input masking schedule, joint fine-tuning, baselines and variants,
//!   and linear probing ([`fusion`]), all on deterministic synthetic
//!   paired-modality data ([`data`]).
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! the `mmtune` binary drives the same library through subcommands.

pub mod batchnorm;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
