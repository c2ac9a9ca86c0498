//! Visual prompt tuning for frozen desk-scale models: a tape-based autodiff
//! engine, small convolutional backbones, prompt templates with output
//! transforms, the tuning/baseline training loops, synthetic shifted
//! datasets, and distribution analysis (Fréchet distance, diversity,
//! correlations).

pub mod analysis;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod parallel;
pub mod prompt;
pub mod svg;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
