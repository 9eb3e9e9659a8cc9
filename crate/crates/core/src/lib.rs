//! Depthwise over-parameterized convolution.
//!
//! A conventional convolution kernel `W` is paired with a depthwise kernel `D`
//! applied to each input patch first. The pair can run in two equivalent ways:
//! transform the patch with `D` and convolve with `W` (feature composition), or
//! fold `D` into `W` once and run a single ordinary convolution (kernel
//! composition). Folding at export time gives an inference model with exactly
//! the cost of the plain layer.
//!
//! Modules:
//! - [`tensor`]: dense row-major arrays and patch extraction
//! - [`conv`]: reference conventional, depthwise and grouped convolution
//! - [`doconv`]: over-parameterized layers, folding, initialization, cost model
//! - [`train`]: gradients, finite-difference checking, SGD and a small CNN trainer
//! - [`io`]: IDX datasets and the `DOCV` model format

pub mod conv;
pub mod doconv;
pub mod error;
pub mod io;
pub mod tensor;
pub mod train;

pub use conv::{ConvGeometry, ConvKernel, DepthwiseKernel};
pub use doconv::{
    ComposeMode, DoConvParams, DoKind, FoldedKernel, MaccReport, ResidualInit,
};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
