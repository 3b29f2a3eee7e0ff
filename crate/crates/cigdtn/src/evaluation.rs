//! Quantitative scoring of denoised audio, centered on the
//! signal-to-distortion ratio.

use crate::dsp::{AudioClip, StftConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pipeline::denoise_clip;
use crate::scalar::Scalar;

/// Cap applied to SDR for exact matches, avoiding infinities in reports.
pub const SDR_CAP_DB: f64 = 100.0;

/// Plain energy-ratio signal-to-distortion ratio in dB:
/// `10·log10(‖x‖² / ‖x - x̂‖²)`, capped at +100 dB.
pub fn sdr<T: Scalar>(reference: &AudioClip<T>, estimate: &AudioClip<T>) -> Result<T> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            op: "sdr",
            lhs: vec![reference.len()],
            rhs: vec![estimate.len()],
        });
    }
    let signal = reference.energy();
    if signal <= T::zero() {
        return Err(Error::InvalidArgument(
            "sdr undefined for a zero-energy reference".into(),
        ));
    }
    let mut err = T::zero();
    for (&x, &y) in reference.samples.iter().zip(&estimate.samples) {
        err += (x - y) * (x - y);
    }
    let cap = T::of(SDR_CAP_DB);
    if err == T::zero() {
        return Ok(cap);
    }
    Ok((T::of(10.0) * (signal / err).log10()).min(cap))
}

/// One evaluation pair, already decoded.
#[derive(Debug, Clone)]
pub struct EvalItem<T> {
    pub name: String,
    pub clean: AudioClip<T>,
    pub noisy: AudioClip<T>,
}

/// Per-clip SDRs plus summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<T> {
    pub per_clip: Vec<(String, T)>,
    pub mean_sdr: T,
    pub clip_count: usize,
    pub skipped: usize,
    pub config_fingerprint: String,
}

impl<T: Scalar> EvalReport<T> {
    /// Tab-separated lines (clip name, SDR) plus a trailing mean line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, sdr) in &self.per_clip {
            out.push_str(&format!("{name}\t{sdr:e}\n"));
        }
        out.push_str(&format!(
            "mean\t{:e}\tclips\t{}\tskipped\t{}\tconfig\t{}\n",
            self.mean_sdr, self.clip_count, self.skipped, self.config_fingerprint
        ));
        out
    }
}

/// Score every pair with an arbitrary denoiser. Items are scored in
/// name-sorted order; pairs whose denoising fails are skipped and counted.
pub fn evaluate_with<T: Scalar, F>(
    items: &[EvalItem<T>],
    fingerprint: &str,
    mut denoise: F,
) -> Result<EvalReport<T>>
where
    F: FnMut(&AudioClip<T>) -> Result<AudioClip<T>>,
{
    let mut sorted: Vec<&EvalItem<T>> = items.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut per_clip = Vec::new();
    let mut skipped = 0usize;
    for item in sorted {
        match denoise(&item.noisy).and_then(|est| sdr(&item.clean, &est)) {
            Ok(score) => per_clip.push((item.name.clone(), score)),
            Err(err) => {
                eprintln!("warning: skipping clip {}: {err}", item.name);
                skipped += 1;
            }
        }
    }
    if per_clip.is_empty() {
        return Err(Error::Dataset("no clip could be evaluated".into()));
    }
    let mut sum = T::zero();
    for (_, s) in &per_clip {
        sum += *s;
    }
    let mean_sdr = sum / T::of_usize(per_clip.len());
    Ok(EvalReport {
        clip_count: per_clip.len(),
        per_clip,
        mean_sdr,
        skipped,
        config_fingerprint: fingerprint.to_string(),
    })
}

/// Score a trained model over a dataset: STFT → forward → resize back →
/// inverse STFT → trim → SDR per clip. Deterministic.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    stft_cfg: &StftConfig<T>,
    items: &[EvalItem<T>],
    fingerprint: &str,
) -> Result<EvalReport<T>> {
    evaluate_with(items, fingerprint, |noisy| {
        denoise_clip(params, stft_cfg, noisy)
    })
}
