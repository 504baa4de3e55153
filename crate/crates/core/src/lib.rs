//! Text-gated infrared/visible image fusion cascaded with a referring
//! segmentation head, trained jointly on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod fusion;
pub mod ris;
pub mod losses;
pub mod optim;
pub mod model;
pub mod data;
pub mod metrics;
pub mod train;
pub mod report;
pub mod checks;

pub use error::{Error, Result};
pub use tensor::Tensor;
