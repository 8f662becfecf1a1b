//! Self-supervised anomaly segmentation on top of a frozen segmentation
//! network: synthetic outlier pasting, score-driven mask refinement and a
//! small two-channel head trained with a classification loss and an
//! energy-margin loss.

pub mod ablation;
pub mod error;
pub mod estimators;
pub mod head;
pub mod io;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod patch;
pub mod refine;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use estimators::{ScoreMap, Scorer};
pub use head::{HeadConfig, HeadParams};
pub use metrics::EvalResult;
pub use refine::{PixelPartition, RefineOptions, ThresholdMode};
pub use tensor::{ImageRgb, LabelMap, Tensor, IGNORE};
pub use trainer::{TrainConfig, TrainLog};
pub use world::{Dataset, FrozenModel, SceneSpec};
