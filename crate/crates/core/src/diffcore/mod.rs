//! Reverse-mode differentiation over a small 1D layer set.

pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod serialize;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{GraphBuilder, Mode, ModelGraph, Node, NodeId, NodeInfo, Op, ParamRole};
pub use kernels::{ConvGeometry, Padding};
pub use layers::{BatchNorm1d, Conv1d, InstanceNorm1d, Linear};
pub use loss::mse;
pub use optim::{Adam, AdamConfig};
pub use serialize::{load_graph, save_graph};
pub use tensor::Tensor;
