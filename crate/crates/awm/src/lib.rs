//! Active weighted mapping (AWM) for residual networks.
//!
//! A self-contained f64 training stack: a minimal reverse-mode tensor
//! engine, AWM-augmented ResNet and DenseNet graphs for CIFAR-sized
//! inputs, an alternating-freeze SGD trainer, and PCA+LDA analytics over
//! the per-image branch weights the mapping units infer.

pub mod analytics;
pub mod autodiff;
pub mod awm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod net;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod testing;
pub mod train;

pub use autodiff::{Param, ParamGroup, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
