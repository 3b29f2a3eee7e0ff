//! CIGDTN: complex image-generative diffusion transformer network for
//! audio denoising.
//!
//! Noisy audio is mapped to a complex STFT spectrogram, the real and
//! imaginary parts are processed as images by two diffusion-transformer
//! streams with adaptive-layer-norm conditioning and sparse attention
//! diffusion, and the predicted spectrogram is resampled and inverted back
//! to audio. Everything is generic over the scalar type: tests and
//! numerical oracles run at f64, training may run at f32.

pub mod attention;
pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod training;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Concrete aliases for the two supported scalar types.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AudioClip32 = dsp::AudioClip<f32>;
pub type AudioClip64 = dsp::AudioClip<f64>;
pub type GradTape32 = autodiff::GradTape<f32>;
pub type GradTape64 = autodiff::GradTape<f64>;
