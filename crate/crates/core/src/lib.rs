//! Decoupled multimodal fusion for discrete-time survival prediction.
//!
//! Two token modalities are attention-pooled, split into specific, shared and
//! explored features, randomly interleaved, fused by a dense mixture of
//! experts and mapped to per-bin hazards.

// `!(x >= 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod datasets;
pub mod decoupling;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe;
pub mod nn;
pub mod reorganize;
pub mod survival;
pub mod train;

pub use config::{Ablation, TrainConfig};
pub use datasets::{Cohort, PatientRecord, SynthConfig};
pub use decoupling::{DecoupledBundle, DistanceMetric};
pub use error::{Error, Result};
pub use eval::{KmCurve, LogRank, MetricRow, RiskRecord};
pub use model::{ForwardOutput, Mode, ModelParams, Pipeline};
pub use moe::GateWeights;
pub use train::{CvReport, TrainHistory};
