//! Core library for the CT denoising framework.
//!
//! Everything numerical lives here: a small dense tensor type, hand-written
//! convolutional layers with manual backpropagation, the Adam optimizer, the
//! HRNet and UNet model graphs, a parallel-beam CT simulator that produces
//! paired low-dose / normal-dose slices, image-quality metrics, and the
//! Fourier-domain noise decomposition used to analyze what a trained model
//! actually removed.
//!
//! Images are stored in "stored HU" units throughout: air = 0, water = 1000
//! (i.e. Hounsfield units shifted by +1000 so that typical tissue values are
//! non-negative).

pub mod dataset;
pub mod error;
pub mod fft;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod noise_analysis;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Shape4, Tensor};
