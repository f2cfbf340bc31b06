//! BatchFormer laboratory: a batch-axis transformer encoder with a shared
//! classifier, built on a small reverse-mode autodiff engine, plus a
//! synthetic long-tailed benchmark and a cross-sample gradient probe.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batchformer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use batchformer::{batchformer_forward, BatchFormerModel, ModelConfig};
pub use config::LabConfig;
pub use error::{LabError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub use train::{evaluate, train, RunRecord, TrainConfig};
