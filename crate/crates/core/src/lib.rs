//! Relative transfer function (RTF) experiment toolkit.
//!
//! The crate simulates shoebox-room impulse responses, turns microphone
//! pairs into RTFs and their ILD/IPD feature vectors, and fits four
//! pose-to-RTF regressors: the free-field model, linear interpolation,
//! piecewise-affine least squares and a multilayer perceptron.

pub mod dataset;
mod error;
pub mod eval;
pub mod nn;
pub mod persist;
pub mod regressors;
pub mod room_sim;
pub mod rtf;
pub mod signal;

pub use error::{Error, Result};
pub use room_sim::{AirSignal, MicArray, Pose, RoomSpec, Vec3};
pub use rtf::{FeatureVector, RtfVector};

/// STFT size used throughout.
pub const FFT_SIZE: usize = 1024;
/// One-sided bin count of a [`FFT_SIZE`]-point transform.
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
/// Target vector length: `[ild | sin ipd | cos ipd]`.
pub const FEATURE_DIM: usize = 3 * N_BINS;
