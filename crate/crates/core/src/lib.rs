//! Multi-modal causal spatio-temporal prediction.

pub mod align;
pub mod autodiff;
pub mod bench;
pub mod backdoor;
pub mod causal_graph;
pub mod checkpoint;
pub mod data;
pub mod datagen;
pub mod dataset_io;
pub mod dual;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod ops;
pub mod sted;
pub mod tensor;
pub mod train;

pub use autodiff::{GradResult, Graph, ParamStore, Var};
pub use error::{CstpError, Result};
pub use tensor::Tensor;
