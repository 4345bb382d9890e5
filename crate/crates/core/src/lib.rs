//! Invertible image rescaling with dual latent variables.
//!
//! An invertible network maps an HR image `x` and a sampled downscaling latent
//! `w` to an LR image `y` and an upscaling latent `z`. Upscaling runs the same
//! network backwards from `y` and a chosen `z_hat`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inn;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use checkpoint::{Checkpoint, LatentFile};
pub use data::{Corpus, ImageRGB, Plane};
pub use error::{Error, Result};
pub use graph::{Eager, Graph, ParamId, ParamStore, Parameter, Tape, Var};
pub use inn::{sample_latent, LatentMode, LatentSpec, ModelConfig, RescaleModel};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::MetricReport;
pub use tensor::{DType, Element, Shape, Tensor};
pub use trainer::{TrainConfig, Trainer};
