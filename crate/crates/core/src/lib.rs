//! # freqboot
//!
//! Non-contrastive self-supervised representation learning for multichannel
//! time series. Two augmented views of each window pass through an online and
//! a target network that share a large-kernel convolutional encoder design.
//! Each network carries two projection heads: a dilated causal TCN head that
//! bootstraps slow, low-frequency structure and an MLP head that bootstraps
//! short, high-frequency structure. The online network learns to predict the
//! target's projections; the target follows the online weights by an
//! exponential moving average.
//!
//! Modules:
//!
//! - [`data`]: dataset format, splitting, label subsampling, synthetic data
//! - [`augment`]: jitter / segment permutation / channel-pair rotation views
//! - [`nn`]: encoder, heads, predictors, online/target state and EMA
//! - [`objective`]: normalized regression losses and their weighting
//! - [`trainer`]: pretraining loop, optimizer, checkpoints
//! - [`eval`]: linear probe, semi-supervised fine-tuning, baselines, metrics
//! - [`config`]: experiment configuration and dataset presets
//! - [`cli`]: command-line front end

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
