//! Semi-supervised segmentation engine.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
mod conv;
pub mod error;
mod fpenv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{Image, LabelMap, Shape, Tensor};
