//! Uncertainty-aware QoS regression over natural-language feature descriptions.
//!
//! The pipeline is:
//!
//! 1. [`corpus`] loads user/service metadata tables and a QoS matrix and
//!    splits the observed cells by density.
//! 2. [`templater`] renders every (user, service) pair as a sentence and
//!    emits JSONL [`FeatureExample`]s.
//! 3. [`tokenizer`] and [`backbone`] turn a feature string into a
//!    `[BOS] user [SEP] service [EOS]` sequence and run a small transformer
//!    encoder that exposes every block output.
//! 4. [`fusion`] averages the top-K block outputs, sums mean/max/attention
//!    pooling and regresses a Gaussian `(mu, log_var)`.
//! 5. [`trainer`] optimizes the joint NLL + lambda * MAE objective with
//!    gradual layer unfreezing and global gradient clipping.
//! 6. [`uncertainty`] aggregates Monte-Carlo dropout passes and fits a
//!    variance temperature on held-out data.
//! 7. [`eval`] computes MAE/RMSE and the uncertainty diagnostics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod stats;
pub mod synthetic;
pub mod templater;
pub mod tokenizer;
pub mod trainer;
pub mod uncertainty;

pub use backbone::{Backbone, BackboneDescriptor, EncoderConfig, LayerStates, Mode, TinyBackbone};
pub use corpus::{DatasetSplit, Metric, QosRecord, ServiceMeta, UserMeta};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use fusion::{FusionConfig, GaussianPrediction, Head, HeadKind, Pooling};
pub use model::QosModel;
pub use templater::FeatureExample;
pub use tokenizer::{TokenSequence, Tokenizer};
pub use trainer::{TrainConfig, TrainLog, UnfreezeSchedule};
pub use uncertainty::{CalibrationState, McConfig, UncertainPrediction};
