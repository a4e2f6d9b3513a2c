//! Learnable wavelet front-end, frequency-guided masked pretraining and
//! downstream fusion for multi-channel physiological signals.

pub mod kernel;
pub mod signal;
pub mod wavelet;
pub mod masking;
pub mod model;
pub mod checkpoint;
pub mod config;
pub mod fusion;
pub mod train;
pub mod synth;
