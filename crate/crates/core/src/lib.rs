//! Spatio-temporal traffic forecasting with a graph teacher distilled into a
//! graph-less MLP student.
//!
//! The crate bundles a small reverse-mode autodiff engine, graph utilities,
//! windowed traffic data, both models, the distillation objective and
//! training loops, and an evaluation and latency harness.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod student;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Forecaster, Mode, ParamSet};
pub use tensor::Tensor;
