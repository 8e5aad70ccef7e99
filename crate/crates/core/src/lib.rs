//! Cross-modal transformer for furnace anomaly detection from a thermal video
//! clip and a three-phase electrode current window.
//!
//! The crate is self-contained: tensors, a reverse-mode autodiff tape, the
//! model, training, a synthetic data generator, annotation helpers and metrics.

pub mod annotate;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod pgm;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod tokenization;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{HeadsMode, MhcaMode, Modality, Model, ModelConfig, Preset};
pub use real::Real;
pub use tensor::Tensor;
