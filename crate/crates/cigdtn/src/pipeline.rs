//! The inference path shared by denoising, evaluation, and tests:
//! STFT → resize to model space → forward → resize back → inverse STFT →
//! trim to the input length.

use crate::dsp::{istft, resize_from_model, resize_to_model, stft, AudioClip, StftConfig};
use crate::error::Result;
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denoise one clip with a trained model.
pub fn denoise_clip<T: Scalar>(
    params: &ModelParams<T>,
    stft_cfg: &StftConfig<T>,
    clip: &AudioClip<T>,
) -> Result<AudioClip<T>> {
    let spec = stft(clip, stft_cfg)?;
    let (re_g, im_g) = resize_to_model(&spec, params.config.image_side);
    let (pred_re, pred_im) = params.forward(&re_g, &im_g)?;
    let pred_spec = resize_from_model(&pred_re, &pred_im, &spec)?;
    istft(&pred_spec, clip.len())
}

/// The same path with the model replaced by the identity on the resized
/// grids. Measures how much the resize + inverse round trip alone costs;
/// used as the bypass oracle in evaluation tests.
pub fn spectrogram_roundtrip<T: Scalar>(
    clip: &AudioClip<T>,
    stft_cfg: &StftConfig<T>,
    side: usize,
) -> Result<AudioClip<T>> {
    let spec = stft(clip, stft_cfg)?;
    let (re_g, im_g): (Tensor<T>, Tensor<T>) = resize_to_model(&spec, side);
    let back = resize_from_model(&re_g, &im_g, &spec)?;
    istft(&back, clip.len())
}
