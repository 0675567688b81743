//! Learnable dynamic graphs for multivariate time-series classification.
//!
//! The model slices each series into equal time windows, learns one
//! graph per window from node-embedding products with top-k
//! sparsification and cross-window information propagation, pairs every
//! graph with an LSTM window embedding and a gradient-driven importance
//! matrix, and feeds the assembled stack through a GIN-based variational
//! graph autoencoder and a convolutional temporal pooling layer into a
//! multi-label classifier. Training combines classification, focal,
//! contrastive, smoothness, structural, and reconstruction losses.
//!
//! Everything runs on a small self-contained `f64` tensor engine with
//! reverse-mode automatic differentiation, so every gradient used for
//! optimization or interpretability can be verified by finite
//! differences.
//!
//! See the `examples/` directory for one runnable example per major
//! capability, and the `timegraph` binary for the batch workflows
//! (synthetic cohorts, training, evaluation, explanation, ablations,
//! out-of-distribution runs).

pub mod assemble;
pub mod checkpoint;
pub mod config;
pub mod augment;
pub mod data;
pub mod error;
pub mod graph;
pub mod interpret;
pub mod losses;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod tensor;
pub mod train;
pub mod vgae;

pub use error::{Error, Result};
pub use tensor::{grad_check, forward_op, Gradients, Op, RngState, SeededRng, Tape, Tensor};
