//! Data-free quantization of a small grid detector.
//!
//! The pipeline: train a full-precision detector on a synthetic shapes
//! dataset, invert the frozen detector into a calibration set of images
//! whose labels are resampled from the detector's own predictions, then
//! train a low-bit student against the full-precision teacher on that
//! calibration set. No real training images are needed after the teacher
//! exists.
//!
//! Everything is f64, single threaded, and deterministic: the same seeds
//! produce bit-identical tensors, checkpoints, and metric logs.

pub mod ckpt;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod synthesis;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
