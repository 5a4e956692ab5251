//! Lightweight crack segmentation built on a from-scratch f64 autodiff
//! engine: reduce/depthwise/pointwise/expand convolution blocks, a
//! multi-scale deformable-attention encoder, staircase cascaded fusion,
//! an analytical cost profiler and the usual segmentation metric suite.

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod lde;
pub mod lrds;
pub mod mfe;
pub mod model;
pub mod par;
pub mod profiler;
pub mod scfm;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{backward, gradient_check, GradCheckOptions, Gradients, Tensor};
