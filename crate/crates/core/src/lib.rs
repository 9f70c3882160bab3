//! Semi-supervised binary segmentation with transformation-consistent
//! self-ensembling.
//!
//! A small encoder-decoder network is trained on a few labeled images and many
//! unlabeled ones. Besides cross-entropy on the labeled images, the network is
//! asked to agree with itself: the prediction for a rotated or flipped input
//! must match the rotated or flipped prediction for the original input, under
//! independent noise and dropout draws.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod trainer;
pub mod transform;

pub use data::{Batch, DatasetSplit, Sample};
pub use error::{Error, Result};
pub use grid::Grid;
pub use metrics::{ConfusionCounts, MetricReport, Scores};
pub use model::{ModelConfig, SegModel};
pub use objective::{LossBreakdown, ScheduleConfig};
pub use trainer::{RegularizationScope, TrainConfig, TrainHistory, Trainer};
pub use transform::TransformOp;
