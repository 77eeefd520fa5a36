//! Dense tensors and a reverse-mode differentiation tape sized for 5-D
//! `(batch, channel, time, lat, lon)` convolutional networks.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod parallel;
pub mod scalar;
pub mod tensor;

pub use conv::ConvSpec;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{BatchStats, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{dims5, Tensor};
