//! Semi-supervised semantic segmentation with two cross-supervised branches,
//! discriminator-based local pseudo-label filtering, dynamic region-loss
//! correction and ensembling inference.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! bottom of this file pin the common instantiations.

pub mod ablation;
pub mod config;
pub mod data;
pub mod drlc;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod region_filter;
pub mod run;
pub mod scalar;
pub mod trainer;
pub mod viz;

pub use config::{AblationSpec, DatasetSpec, PartitionSpec, RunConfig, SeedStream, Toggles, TrainConfig};
pub use data::{LabelMap, LabelRatio, Sample, IGNORE};
pub use drlc::{combine_decision_maps, weight_mask, CombinedDecisionMap, RegionCase};
pub use error::{Error, Result};
pub use eval::{ensemble_predict, evaluate, miou, ConfusionMatrix, EnsembleConfig, EvalReport};
pub use losses::{LossParts, LossProfile, LossWeights};
pub use models::{Discriminator, ModelConfig, Networks, SegmentationBranch};
pub use region_filter::{select_pseudo_labels, to_prediction_label, upsample_decision, FilterMask};
pub use run::{run_training, FinalEval, RunOptions, RunOutcome};
pub use scalar::Scalar;
pub use ndarray;
pub use trainer::{lr_schedule, train_step, Checkpoint, LossReport, StepConfig, TrainState};

pub type Networks32 = Networks<f32>;
pub type Networks64 = Networks<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
pub type SegmentationBranch32 = SegmentationBranch<f32>;
pub type SegmentationBranch64 = SegmentationBranch<f64>;
pub type Discriminator32 = Discriminator<f32>;
pub type Discriminator64 = Discriminator<f64>;
