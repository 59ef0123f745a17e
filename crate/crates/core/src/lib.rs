//! Hierarchical sequential generative models for coordinated multi-agent
//! trajectories.
//!
//! The crate is organised around the pipeline it supports:
//!
//! * [`dataset`]: trajectory containers, normalization, the on-disk dataset
//!   format and the Boids synthetic generator.
//! * [`labeling`]: programmatic labeling functions producing weak
//!   macro-intent labels.
//! * [`models`]: VRNN building blocks, the macro-intent model, the
//!   hierarchical model and the baselines, plus checkpoints.
//! * [`training`]: Adam, gradient clipping and the training loop.
//! * [`evaluation`]: burn-in rollouts with macro-intent grounding and the
//!   quantitative analyses (domain statistics, closest-neighbor histograms).

pub mod dataset;
pub mod evaluation;
pub mod labeling;
pub mod models;
pub mod nn;
pub mod training;

pub use dataset::{Dataset, Domain, NormStats, Split, Trajectory};
pub use labeling::MacroIntentSequence;
pub use models::{Model, ModelCheckpoint, ModelConfig, Variant};
