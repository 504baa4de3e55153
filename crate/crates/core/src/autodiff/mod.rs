//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{gradcheck, BlockReport, GradcheckOptions, GradcheckReport};
pub use graph::{Axis2d, Graph, Var};
