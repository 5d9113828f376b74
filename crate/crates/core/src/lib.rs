//! Hierarchy-aware losses, triplet metric learning and coherent path
//! inference for fault intensity diagnosis, with the supporting signal
//! pipeline and a small training engine.

pub mod grouptriplet;
pub mod hierarchy;
pub mod hkloss;
pub mod inference;
pub mod signal;
pub mod trainer;

pub use grouptriplet::{DistanceMeasure, Embedding, Triplet};
pub use hierarchy::{HierLabel, LabelTree, NodeId, TreeError, WeightScheme};
pub use hkloss::{Aggregation, LossResult, ScoreVector};
pub use inference::{MetricsReport, PathPrediction};
pub use signal::{FeatureSpec, SignalStream, Spectrogram, WindowFn};
pub use trainer::{Network, Objective, Sample, TrainConfig, TrainHistory};
