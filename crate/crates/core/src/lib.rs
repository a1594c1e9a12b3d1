//! Session-based next-item recommendation with head/tail calibration.
//!
//! A sequence encoder is pretrained with cross entropy, then cloned and
//! fine-tuned on sessions that contain tail items. During fine-tuning a small
//! feed-forward head learns to predict the head/tail mix of the model's own
//! top-N list, and the encoder is pushed so that this prediction matches the
//! mix observed in the ongoing session.
//!
//! Modules follow the pipeline: [`corpus`] prepares data, [`numerics`]
//! provides tensors and autodiff, [`backbone`] and [`calibration`] define the
//! model and its losses, [`curriculum`] orchestrates training and routing,
//! and [`metrics`] scores recommendation lists.

pub mod backbone;
pub mod calibration;
pub mod cli;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
