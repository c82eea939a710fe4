//! Mixture-of-modality-experts transformers for rodent sleep staging.
//!
//! The crate trains and runs small transformer classifiers over paired
//! EEG/EMG recordings. Three pathways (EEG-only, EMG-only, and a mixed
//! pathway over the concatenated token streams) share one multi-head
//! attention per layer while routing tokens to modality-specific expert
//! feed-forward blocks. The mixed pathway teaches the single-modality
//! pathways through self-distillation, so one trained artifact serves both
//! multi-channel and single-channel recordings.
//!
//! Module map:
//!
//! * [`tensor`] — f64 tensors and tape-based reverse-mode autodiff.
//! * [`params`] — named parameter storage shared by the model stacks.
//! * [`signal`] — recording containers, preprocessing, synthetic data.
//! * [`mome`] — expert routing and the shared-attention transformer layer.
//! * [`model`] — epoch and sequence classifiers, checkpoints, inference.
//! * [`train`] — losses, AdamW, the training loop, evaluation metrics.
//! * [`config`] — flat key/value run configuration.
//! * [`run`] — high-level commands backing the CLI and FFI surface.

pub mod config;
pub mod model;
pub mod mome;
pub mod params;
pub mod run;
pub mod signal;
pub mod tensor;
pub mod train;
