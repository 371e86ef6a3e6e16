//! Infrared and visible image fusion with a three-branch decomposition
//! (detail, base and graph features) trained in two stages.
//!
//! The crate is organised bottom-up: [`imaging`] handles I/O and layout,
//! [`encoder`], [`graph`] and [`fusion`] hold the network parts assembled by
//! [`model::SmfNet`], [`losses`] and [`metrics`] score outputs, and [`train`]
//! runs the two-stage pipeline.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod imaging;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sobel;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{Aggregate, FeatureTriplet};
pub use imaging::{ChannelLayout, ImageTensor, OriginalDims, PatchSpec};
pub use losses::{LossReport, LossSwitches, LossWeights};
pub use metrics::{MetricsReport, MetricsTable, SsimReduction};
pub use model::{Ablation, ModelConfig, SmfNet};
pub use params::Params;
pub use train::{Checkpoint, Fuser, PairedDataset, Stage, TrainConfig};

pub use candle_core::{DType, Device, Tensor};
