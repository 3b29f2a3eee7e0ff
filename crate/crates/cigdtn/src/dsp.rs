//! Audio ↔ complex-spectrogram conversion.
//!
//! The STFT uses a Hamming analysis window zero-padded to the FFT size and
//! a per-clip hop of `floor(len / 256)`. The inverse is weighted
//! overlap-add with synthesis normalization by the accumulated squared
//! window, so the per-clip hop rule does not need to satisfy any exact
//! overlap constraint. Bilinear resize fixes the model's spatial input;
//! it is exact on constants and invertible enough for round-trip use.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mono audio samples with a sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        AudioClip { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> T {
        let mut e = T::zero();
        for &s in &self.samples {
            e += s * s;
        }
        e
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    context: "audio clip".into(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AudioClip<U> {
        AudioClip {
            samples: self.samples.iter().map(|&s| U::of(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Analysis/synthesis configuration: window length, FFT size, and the
/// Hamming coefficients. The hop is derived per clip, not stored here.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig<T> {
    pub window_length: usize,
    pub fft_size: usize,
    pub window: Vec<T>,
}

impl<T: Scalar> StftConfig<T> {
    pub fn hamming(window_length: usize, fft_size: usize) -> Result<Self> {
        if window_length < 2 {
            return Err(Error::InvalidArgument("window length must be >= 2".into()));
        }
        if window_length > fft_size {
            return Err(Error::InvalidArgument(format!(
                "window length {window_length} exceeds fft size {fft_size}"
            )));
        }
        let n = T::of_usize(window_length - 1);
        let window = (0..window_length)
            .map(|i| {
                T::of(0.54) - T::of(0.46) * (T::of(2.0 * std::f64::consts::PI) * T::of_usize(i) / n).cos()
            })
            .collect();
        Ok(StftConfig {
            window_length,
            fft_size,
            window,
        })
    }

    /// Paper-default analysis setup: 500-point Hamming window, FFT 512.
    pub fn default_config() -> Self {
        Self::hamming(500, 512).expect("static sizes are valid")
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Paired real/imaginary grids `[freq_bins × time_frames]` with the
/// metadata needed to invert them.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
    pub source_length: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub config: StftConfig<T>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn freq_bins(&self) -> usize {
        self.re.rows()
    }

    pub fn frames(&self) -> usize {
        self.re.cols()
    }
}

/// Per-clip hop: `floor(len / 256)`, at least 1 for any valid clip.
pub fn hop_for<T: Scalar>(clip: &AudioClip<T>) -> Result<usize> {
    if clip.len() < 256 {
        return Err(Error::InvalidArgument(format!(
            "clip of {} samples is shorter than 256; hop rule undefined",
            clip.len()
        )));
    }
    Ok(clip.len() / 256)
}

fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    (len - window) / hop + 1
}

/// Forward STFT: frame `t`, bin `k` holds
/// `Σ_n w[n]·x[t·hop+n]·e^{-2πikn/fft_size}` for bins `0..=fft_size/2`.
pub fn stft<T: Scalar>(clip: &AudioClip<T>, cfg: &StftConfig<T>) -> Result<ComplexSpectrogram<T>> {
    clip.check_finite()?;
    let hop = hop_for(clip)?;
    if clip.len() < cfg.window_length {
        return Err(Error::InvalidArgument(format!(
            "clip of {} samples is shorter than the {}-sample window",
            clip.len(),
            cfg.window_length
        )));
    }
    let frames = frame_count(clip.len(), cfg.window_length, hop);
    let bins = cfg.freq_bins();
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut re = Tensor::zeros(vec![bins, frames]);
    let mut im = Tensor::zeros(vec![bins, frames]);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_size];
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = if n < cfg.window_length {
                cfg.window[n] * clip.samples[start + n]
            } else {
                T::zero()
            };
            *slot = Complex::new(x, T::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            re.set2(k, t, buf[k].re);
            im.set2(k, t, buf[k].im);
        }
    }
    Ok(ComplexSpectrogram {
        re,
        im,
        source_length: clip.len(),
        sample_rate: clip.sample_rate,
        hop,
        config: cfg.clone(),
    })
}

/// Accumulated squared synthesis window over `out_len` samples.
pub(crate) fn synthesis_norm<T: Scalar>(
    window: &[T],
    hop: usize,
    frames: usize,
    out_len: usize,
) -> Vec<T> {
    let mut norm = vec![T::zero(); out_len];
    for t in 0..frames {
        let start = t * hop;
        for (n, &w) in window.iter().enumerate() {
            if start + n < out_len {
                norm[start + n] += w * w;
            }
        }
    }
    norm
}

pub(crate) fn invert_norm<T: Scalar>(norm: &[T]) -> Result<Vec<T>> {
    let tiny = T::of(1e-8);
    if !norm.iter().any(|&v| v > tiny) {
        return Err(Error::InvalidArgument(
            "degenerate overlap-add normalization: window overlap is all zero".into(),
        ));
    }
    Ok(norm
        .iter()
        .map(|&v| if v > tiny { v.recip() } else { T::zero() })
        .collect())
}

/// Inverse STFT by weighted overlap-add. Samples past the last frame's
/// window (never covered by analysis) come out as zero.
pub fn istft<T: Scalar>(spec: &ComplexSpectrogram<T>, target_length: usize) -> Result<AudioClip<T>> {
    let cfg = &spec.config;
    let bins = cfg.freq_bins();
    if spec.re.shape() != spec.im.shape() || spec.freq_bins() != bins {
        return Err(Error::ShapeMismatch {
            op: "istft",
            lhs: spec.re.shape().to_vec(),
            rhs: spec.im.shape().to_vec(),
        });
    }
    let frames = spec.frames();
    let hop = spec.hop;
    let mut planner = FftPlanner::<T>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let scale = T::of_usize(cfg.fft_size).recip();
    let mut out = vec![T::zero(); target_length];
    let norm = synthesis_norm(&cfg.window, hop, frames, target_length);
    let inv = invert_norm(&norm)?;
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_size];
    for t in 0..frames {
        for k in 0..bins {
            buf[k] = Complex::new(spec.re.at2(k, t), spec.im.at2(k, t));
        }
        for k in bins..cfg.fft_size {
            let src = buf[cfg.fft_size - k];
            buf[k] = Complex::new(src.re, -src.im);
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for (n, &w) in cfg.window.iter().enumerate() {
            if start + n < target_length {
                out[start + n] += buf[n].re * scale * w;
            }
        }
    }
    for (o, &g) in out.iter_mut().zip(inv.iter()) {
        *o = *o * g;
    }
    Ok(AudioClip::new(out, spec.sample_rate))
}

/// Sparse linear interpolation map (bilinear resize expressed as a fixed
/// linear operator). Rows index output pixels; each row holds up to four
/// (input index, weight) pairs.
#[derive(Debug, Clone)]
pub struct InterpMap<T> {
    pub in_shape: (usize, usize),
    pub out_shape: (usize, usize),
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<T>,
}

fn axis_coords<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, T::zero());
            }
            let pos = T::of_usize(o) * T::of_usize(in_len - 1) / T::of_usize(out_len - 1);
            let i0f = pos.floor();
            let i0 = (i0f.as_f64() as usize).min(in_len - 1);
            let f = pos - i0f;
            if f == T::zero() || i0 + 1 >= in_len {
                (i0, i0, T::zero())
            } else {
                (i0, i0 + 1, f)
            }
        })
        .collect()
}

impl<T: Scalar> InterpMap<T> {
    pub fn bilinear(in_shape: (usize, usize), out_shape: (usize, usize)) -> Self {
        let ys = axis_coords::<T>(in_shape.0, out_shape.0);
        let xs = axis_coords::<T>(in_shape.1, out_shape.1);
        let mut row_ptr = Vec::with_capacity(out_shape.0 * out_shape.1 + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        let w_in = in_shape.1;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let mut push = |r: usize, c: usize, w: T| {
                    if w != T::zero() {
                        cols.push(r * w_in + c);
                        weights.push(w);
                    }
                };
                let (wy0, wy1) = (T::one() - fy, fy);
                let (wx0, wx1) = (T::one() - fx, fx);
                push(y0, x0, wy0 * wx0);
                if x1 != x0 {
                    push(y0, x1, wy0 * wx1);
                }
                if y1 != y0 {
                    push(y1, x0, wy1 * wx0);
                    if x1 != x0 {
                        push(y1, x1, wy1 * wx1);
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        InterpMap {
            in_shape,
            out_shape,
            row_ptr,
            cols,
            weights,
        }
    }

    pub fn out_numel(&self) -> usize {
        self.out_shape.0 * self.out_shape.1
    }

    pub fn in_numel(&self) -> usize {
        self.in_shape.0 * self.in_shape.1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.numel() != self.in_numel() {
            return Err(Error::ShapeMismatch {
                op: "interp_apply",
                lhs: vec![self.in_shape.0, self.in_shape.1],
                rhs: x.shape().to_vec(),
            });
        }
        let data = x.data();
        let mut out = vec![T::zero(); self.out_numel()];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, w) in self.row(i) {
                acc += w * data[j];
            }
            *o = acc;
        }
        Tensor::new(vec![self.out_shape.0, self.out_shape.1], out)
    }
}

/// Bilinear resample of a grid, computed with the lerp form so constants
/// survive exactly and same-size resizes are the identity.
pub fn resize_grid<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (in_h, in_w) = (x.rows(), x.cols());
    let ys = axis_coords::<T>(in_h, out_h);
    let xs = axis_coords::<T>(in_w, out_w);
    let mut out = Tensor::zeros(vec![out_h, out_w]);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let a00 = x.at2(y0, x0);
            let a01 = x.at2(y0, x1);
            let a10 = x.at2(y1, x0);
            let a11 = x.at2(y1, x1);
            let top = a00 + fx * (a01 - a00);
            let bottom = a10 + fx * (a11 - a10);
            out.set2(oy, ox, top + fy * (bottom - top));
        }
    }
    out
}

/// Resize both parts of a spectrogram to the model's square input.
pub fn resize_to_model<T: Scalar>(spec: &ComplexSpectrogram<T>, side: usize) -> (Tensor<T>, Tensor<T>) {
    (
        resize_grid(&spec.re, side, side),
        resize_grid(&spec.im, side, side),
    )
}

/// Resize model-space grids back onto the original spectrogram lattice,
/// borrowing the shape and STFT metadata from `template`.
pub fn resize_from_model<T: Scalar>(
    re: &Tensor<T>,
    im: &Tensor<T>,
    template: &ComplexSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    if re.shape() != im.shape() {
        return Err(Error::ShapeMismatch {
            op: "resize_from_model",
            lhs: re.shape().to_vec(),
            rhs: im.shape().to_vec(),
        });
    }
    let (f, t) = (template.freq_bins(), template.frames());
    Ok(ComplexSpectrogram {
        re: resize_grid(re, f, t),
        im: resize_grid(im, f, t),
        source_length: template.source_length,
        sample_rate: template.sample_rate,
        hop: template.hop,
        config: template.config.clone(),
    })
}

/// Constants for running the inverse STFT on a gradient tape: inverse-DFT
/// matrices, the zero-extended synthesis window, and the precomputed
/// overlap normalization. The whole inverse is linear in the spectrogram,
/// so it tapes exactly.
#[derive(Debug, Clone)]
pub struct IstftPlan<T> {
    pub idft_cos: Tensor<T>,
    pub idft_sin: Tensor<T>,
    pub syn_window: Tensor<T>,
    pub inv_norm: Tensor<T>,
    pub hop: usize,
    pub frames: usize,
    pub target_len: usize,
}

impl<T: Scalar> IstftPlan<T> {
    pub fn new(cfg: &StftConfig<T>, frames: usize, hop: usize, target_len: usize) -> Result<Self> {
        let n = cfg.fft_size;
        let bins = cfg.freq_bins();
        let inv_n = T::of_usize(n).recip();
        let mut idft_cos = Tensor::zeros(vec![bins, n]);
        let mut idft_sin = Tensor::zeros(vec![bins, n]);
        for k in 0..bins {
            // Hermitian-symmetric reconstruction: interior bins count twice,
            // DC and Nyquist once. The sine row is exactly zero at both,
            // which keeps stray imaginary parts there inert, matching the
            // take-real-part convention of the direct inverse FFT.
            let edge = k == 0 || k == n - k;
            let mult = if edge { T::one() } else { T::of(2.0) };
            for t in 0..n {
                let angle = 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                idft_cos.set2(k, t, mult * inv_n * T::of(angle.cos()));
                let s = if edge { T::zero() } else { -(mult * inv_n * T::of(angle.sin())) };
                idft_sin.set2(k, t, s);
            }
        }
        let mut syn = vec![T::zero(); n];
        syn[..cfg.window_length].copy_from_slice(&cfg.window);
        let norm = synthesis_norm(&cfg.window, hop, frames, target_len);
        let inv = invert_norm(&norm)?;
        Ok(IstftPlan {
            idft_cos,
            idft_sin,
            syn_window: Tensor::new(vec![1, n], syn)?,
            inv_norm: Tensor::new(vec![target_len], inv)?,
            hop,
            frames,
            target_len,
        })
    }
}

/// Differentiable inverse STFT: transpose to frame-major, inverse-DFT by
/// matmul, window, overlap-add, normalize. `re` and `im` are
/// `[freq_bins × frames]` tape buffers.
pub fn istft_on_tape<T: Scalar>(
    tape: &mut crate::autodiff::GradTape<T>,
    re: crate::autodiff::BufId,
    im: crate::autodiff::BufId,
    plan: &IstftPlan<T>,
) -> Result<crate::autodiff::BufId> {
    let cos_id = tape.leaf(plan.idft_cos.clone());
    let sin_id = tape.leaf(plan.idft_sin.clone());
    let win_id = tape.leaf(plan.syn_window.clone());
    let norm_id = tape.leaf(plan.inv_norm.clone());
    let re_t = tape.transpose(re)?;
    let im_t = tape.transpose(im)?;
    let a = tape.matmul(re_t, cos_id)?;
    let b = tape.matmul(im_t, sin_id)?;
    let frames = tape.add(a, b)?;
    let windowed = tape.row_scale(frames, win_id)?;
    let ola = tape.overlap_add(windowed, plan.hop, plan.target_len)?;
    tape.mul(ola, norm_id)
}

/// `clean + g·noise` with `g` chosen so the clean-to-scaled-noise energy
/// ratio equals `snr_db`.
pub fn mix_at_snr<T: Scalar>(
    clean: &AudioClip<T>,
    noise: &AudioClip<T>,
    snr_db: T,
) -> Result<AudioClip<T>> {
    if clean.len() != noise.len() || clean.sample_rate != noise.sample_rate {
        return Err(Error::ShapeMismatch {
            op: "mix_at_snr",
            lhs: vec![clean.len(), clean.sample_rate as usize],
            rhs: vec![noise.len(), noise.sample_rate as usize],
        });
    }
    let e_clean = clean.energy();
    let e_noise = noise.energy();
    if e_noise <= T::zero() {
        return Err(Error::InvalidArgument(
            "cannot mix against zero-energy noise".into(),
        ));
    }
    let g = (e_clean / (e_noise * T::of(10.0).powf(snr_db / T::of(10.0)))).sqrt();
    let samples = clean
        .samples
        .iter()
        .zip(noise.samples.iter())
        .map(|(&c, &n)| c + g * n)
        .collect();
    Ok(AudioClip::new(samples, clean.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_clip(seed: u64, len: usize) -> AudioClip<f64> {
        let mut rng = substream(seed, "clip");
        AudioClip::new((0..len).map(|_| rng.gen_range(-0.8..0.8)).collect(), 16000)
    }

    #[test]
    fn hop_rule() {
        assert_eq!(hop_for(&rand_clip(0, 51200)).unwrap(), 200);
        assert_eq!(hop_for(&rand_clip(0, 256)).unwrap(), 1);
        assert_eq!(hop_for(&rand_clip(0, 999)).unwrap(), 3);
        assert!(hop_for(&rand_clip(0, 255)).is_err());
    }

    #[test]
    fn hop_monotone_in_length() {
        let mut prev = 0;
        for len in (256..4096).step_by(97) {
            let h = hop_for(&rand_clip(1, len)).unwrap();
            assert!(h >= prev);
            prev = h;
        }
    }

    #[test]
    fn stft_zero_clip_is_zero() {
        let clip = AudioClip::new(vec![0.0f64; 4096], 16000);
        let spec = stft(&clip, &StftConfig::default_config()).unwrap();
        assert_eq!(spec.re.max_abs(), 0.0);
        assert_eq!(spec.im.max_abs(), 0.0);
    }

    #[test]
    fn stft_sinusoid_concentrates_energy() {
        let cfg = StftConfig::default_config();
        let len = 51200;
        let k0 = 64usize;
        let samples: Vec<f64> = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * k0 as f64 * n as f64 / cfg.fft_size as f64).sin())
            .collect();
        let spec = stft(&AudioClip::new(samples, 16000), &cfg).unwrap();
        let t = 3;
        let peak = (spec.re.at2(k0, t).powi(2) + spec.im.at2(k0, t).powi(2)).sqrt();
        for k in 0..spec.freq_bins() {
            if (k as i64 - k0 as i64).abs() < 3 {
                continue;
            }
            let mag = (spec.re.at2(k, t).powi(2) + spec.im.at2(k, t).powi(2)).sqrt();
            let db = 20.0 * (mag / peak).log10();
            assert!(db < -30.0, "bin {k}: {db} dB relative to peak");
        }
    }

    #[test]
    fn stft_frame0_matches_naive_dft() {
        let cfg = StftConfig::default_config();
        let clip = rand_clip(7, 2048);
        let spec = stft(&clip, &cfg).unwrap();
        for k in 0..spec.freq_bins() {
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..cfg.window_length {
                let angle = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.fft_size as f64;
                let x = cfg.window[n] * clip.samples[n];
                re += x * angle.cos();
                im += x * angle.sin();
            }
            assert!((spec.re.at2(k, 0) - re).abs() < 1e-9, "bin {k} re");
            assert!((spec.im.at2(k, 0) - im).abs() < 1e-9, "bin {k} im");
        }
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default_config();
        let x = rand_clip(8, 4096);
        let y = rand_clip(9, 4096);
        let (a, b) = (0.7, -1.3);
        let mixed = AudioClip::new(
            x.samples
                .iter()
                .zip(&y.samples)
                .map(|(&u, &v)| a * u + b * v)
                .collect(),
            16000,
        );
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        let sm = stft(&mixed, &cfg).unwrap();
        let combo = sx.re.scale(a).add(&sy.re.scale(b)).unwrap();
        assert!(sm.re.sub(&combo).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn istft_zero_spec_is_zero() {
        let cfg = StftConfig::default_config();
        let spec = stft(&AudioClip::new(vec![0.0f64; 4096], 16000), &cfg).unwrap();
        let clip = istft(&spec, 4096).unwrap();
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    fn roundtrip_snr(clip: &AudioClip<f64>, cfg: &StftConfig<f64>) -> f64 {
        let spec = stft(clip, cfg).unwrap();
        let rec = istft(&spec, clip.len()).unwrap();
        let lo = cfg.window_length;
        let hi = clip.len() - cfg.window_length;
        let mut sig = 0.0;
        let mut err = 0.0;
        for i in lo..hi {
            sig += clip.samples[i] * clip.samples[i];
            err += (clip.samples[i] - rec.samples[i]).powi(2);
        }
        10.0 * (sig / err.max(1e-300)).log10()
    }

    #[test]
    fn istft_roundtrip_snr() {
        let cfg = StftConfig::default_config();
        let clip = rand_clip(10, 51200);
        let snr = roundtrip_snr(&clip, &cfg);
        assert!(snr > 60.0, "round-trip SNR {snr} dB");
    }

    #[test]
    fn istft_roundtrip_impulse_peak_preserved() {
        let cfg = StftConfig::default_config();
        let mut samples = vec![0.0f64; 8192];
        samples[4096] = 1.0;
        let clip = AudioClip::new(samples, 16000);
        let spec = stft(&clip, &cfg).unwrap();
        let rec = istft(&spec, 8192).unwrap();
        let argmax = rec
            .samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 4096);
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let mut rng = substream(11, "rs");
        let x = Tensor::new(vec![16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(resize_grid(&x, 16, 16), x);
    }

    #[test]
    fn resize_preserves_constants_exactly() {
        let x = Tensor::<f64>::filled(vec![13, 29], 0.3721);
        let y = resize_grid(&x, 256, 256);
        assert!(y.data().iter().all(|&v| v == 0.3721));
    }

    #[test]
    fn resize_corners_exact() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = resize_grid(&x, 64, 64);
        assert_eq!(y.at2(0, 0), 0.0);
        assert_eq!(y.at2(0, 63), 1.0);
        assert_eq!(y.at2(63, 0), 2.0);
        assert_eq!(y.at2(63, 63), 3.0);
    }

    #[test]
    fn resize_roundtrip_smooth_grid() {
        // Low-order polynomial over a 130x200 grid.
        let (h, w) = (130usize, 200usize);
        let mut x = Tensor::<f64>::zeros(vec![h, w]);
        for i in 0..h {
            for j in 0..w {
                let u = i as f64 / (h - 1) as f64;
                let v = j as f64 / (w - 1) as f64;
                x.set2(i, j, 0.3 + 0.5 * u - 0.7 * v + 0.4 * u * v);
            }
        }
        let down = resize_grid(&x, 256, 256);
        let back = resize_grid(&down, h, w);
        let range = 2.0; // value range is well within ±1
        assert!(back.sub(&x).unwrap().max_abs() < 1e-2 * range);
        let mean_err = (back.mean() - x.mean()).abs() / x.mean().abs();
        assert!(mean_err < 0.01);
    }

    #[test]
    fn interp_map_matches_lerp_resize() {
        let mut rng = substream(12, "im");
        let x = Tensor::new(vec![33, 57], (0..33 * 57).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let map = InterpMap::<f64>::bilinear((33, 57), (32, 32));
        let a = map.apply(&x).unwrap();
        let b = resize_grid(&x, 32, 32);
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn mix_at_snr_self_noise_gain() {
        let clip = rand_clip(13, 1024);
        let snr = 14.0;
        let mixed = mix_at_snr(&clip, &clip, snr).unwrap();
        let g = 10.0f64.powf(-snr / 20.0);
        for (m, c) in mixed.samples.iter().zip(&clip.samples) {
            assert!((m - c * (1.0 + g)).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_at_snr_zero_db_equal_energy() {
        let clean = rand_clip(14, 2048);
        let noise = rand_clip(15, 2048);
        let mixed = mix_at_snr(&clean, &noise, 0.0).unwrap();
        let added = AudioClip::new(
            mixed
                .samples
                .iter()
                .zip(&clean.samples)
                .map(|(&m, &c)| m - c)
                .collect::<Vec<_>>(),
            16000,
        );
        assert!((added.energy() / clean.energy() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mix_at_snr_measured() {
        let clean = rand_clip(16, 4096);
        let noise = rand_clip(17, 4096);
        let snr = 20.0;
        let mixed = mix_at_snr(&clean, &noise, snr).unwrap();
        let noise_part: f64 = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(&m, &c)| (m - c).powi(2))
            .sum();
        let measured = 10.0 * (clean.energy() / noise_part).log10();
        assert!((measured - snr).abs() < 1e-6);
    }

    #[test]
    fn mix_rejects_zero_noise() {
        let clean = rand_clip(18, 512);
        let silence = AudioClip::new(vec![0.0; 512], 16000);
        assert!(mix_at_snr(&clean, &silence, 10.0).is_err());
    }

    #[test]
    fn taped_istft_matches_direct_istft() {
        // Two independent inverse routes: rustfft per frame vs inverse-DFT
        // matrices on the tape.
        let cfg = StftConfig::hamming(128, 128).unwrap();
        let clip = rand_clip(19, 2048);
        let spec = stft(&clip, &cfg).unwrap();
        let direct = istft(&spec, clip.len()).unwrap();

        let plan = IstftPlan::new(&cfg, spec.frames(), spec.hop, clip.len()).unwrap();
        let mut tape = crate::autodiff::GradTape::new();
        let re = tape.leaf(spec.re.clone());
        let im = tape.leaf(spec.im.clone());
        let out = istft_on_tape(&mut tape, re, im, &plan).unwrap();
        let taped = tape.value(out);
        for (a, b) in direct.samples.iter().zip(taped.data()) {
            assert!((a - b).abs() < 1e-9, "routes disagree: {a} vs {b}");
        }
    }

    #[test]
    fn taped_istft_gradients_pass_fd_check() {
        let cfg = StftConfig::hamming(32, 32).unwrap();
        let clip = rand_clip(20, 300);
        let spec = stft(&clip, &cfg).unwrap();
        let (bins, frames) = (spec.freq_bins(), spec.frames());
        let plan = IstftPlan::new(&cfg, frames, spec.hop, clip.len()).unwrap();
        let numel = bins * frames;
        // Pack re and im into one probe tensor.
        let mut packed = Vec::with_capacity(2 * numel);
        packed.extend_from_slice(spec.re.data());
        packed.extend_from_slice(spec.im.data());
        let x = Tensor::new(vec![2 * numel], packed).unwrap();
        let err = crate::autodiff::grad_check(
            &move |t, id| {
                let re = t.slice(id, 0, vec![bins, frames])?;
                let im = t.slice(id, numel, vec![bins, frames])?;
                let y = istft_on_tape(t, re, im, &plan)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            // The loss is exactly quadratic in the spectrogram, so the
            // central difference has no truncation error and a larger step
            // only reduces cancellation noise.
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "istft gradient error {err}");
    }
}

