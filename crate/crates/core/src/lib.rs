//! Multiscale decomposable-mixing forecaster with a frozen transformer backbone.
//!
//! The pipeline downsamples a look-back window into several temporal scales,
//! embeds each scale, mixes seasonal and trend components across scales, runs
//! the result (prefixed by a prompt embedding) through a frozen transformer and
//! decodes the forecast with a trainable linear head. The [`ntk`] module
//! measures how the number of scales changes the empirical neural tangent kernel.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod forecaster;
pub mod multiscale;
pub mod ntk;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Param, ParamStore};
pub use tensor::{Padding, Pooling, Tensor};
