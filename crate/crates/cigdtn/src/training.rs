//! Objective function, optimizer, and the training loop.
//!
//! Each step runs, per batch element: forward on the resized noisy
//! spectrogram images, the three-part image loss against the clean images,
//! a differentiable resize + inverse STFT of the prediction, the L1
//! reconstruction loss against the clean waveform, and the convex blend of
//! the two — then one AdamW update. All L1 terms are means so the blend
//! weights scale-comparable quantities.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::{BufId, GradTape};
use crate::dsp::{
    istft_on_tape, resize_to_model, stft, AudioClip, ComplexSpectrogram, InterpMap, IstftPlan,
    StftConfig,
};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelParams};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The loss components of one step (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub real_image_l1: T,
    pub imag_image_l1: T,
    pub noise_l1: T,
    pub image_total: T,
    pub recon_l1: T,
    pub blend_weight: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// The seven fields in trace order.
    pub fn fields(&self) -> [T; 7] {
        [
            self.real_image_l1,
            self.imag_image_l1,
            self.noise_l1,
            self.image_total,
            self.recon_l1,
            self.blend_weight,
            self.total,
        ]
    }
}

/// Mean absolute error between two grids.
fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    Ok(a.sub(b)?.map(|v| v.abs()).mean())
}

/// The three image-loss terms: per-channel L1 against the clean images and
/// the L1 of the complex noise-estimation error. The noise term compares
/// `noisy - clean` against `noisy - pred` entrywise as complex moduli.
pub fn image_loss<T: Scalar>(
    pred_real: &Tensor<T>,
    pred_imag: &Tensor<T>,
    clean_real: &Tensor<T>,
    clean_imag: &Tensor<T>,
    noisy_real: &Tensor<T>,
    noisy_imag: &Tensor<T>,
) -> Result<(T, T, T)> {
    for (a, b) in [
        (pred_real, clean_real),
        (pred_imag, clean_imag),
        (noisy_real, clean_real),
        (noisy_imag, clean_imag),
    ] {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "image_loss",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let real_l1 = mae(pred_real, clean_real)?;
    let imag_l1 = mae(pred_imag, clean_imag)?;
    // ε = noisy - clean, ε̂ = noisy - pred, per-entry modulus of ε - ε̂.
    let dr = noisy_real.sub(clean_real)?.sub(&noisy_real.sub(pred_real)?)?;
    let di = noisy_imag.sub(clean_imag)?.sub(&noisy_imag.sub(pred_imag)?)?;
    let noise_l1 = dr
        .hadamard(&dr)?
        .add(&di.hadamard(&di)?)?
        .map(|v| v.sqrt())
        .mean();
    Ok((real_l1, imag_l1, noise_l1))
}

/// Mean absolute sample difference between two equal-length clips.
pub fn recon_loss<T: Scalar>(estimate: &AudioClip<T>, reference: &AudioClip<T>) -> Result<T> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: vec![estimate.len()],
            rhs: vec![reference.len()],
        });
    }
    let mut acc = T::zero();
    for (&a, &b) in estimate.samples.iter().zip(&reference.samples) {
        acc += (a - b).abs();
    }
    Ok(acc / T::of_usize(estimate.len().max(1)))
}

/// Convex blend of the image and reconstruction losses.
pub fn total_loss<T: Scalar>(image_total: T, recon: T, blend: T) -> Result<T> {
    if blend < T::zero() || blend > T::one() {
        return Err(Error::InvalidArgument(format!(
            "loss blend weight must lie in [0, 1], got {blend}"
        )));
    }
    Ok(blend * image_total + (T::one() - blend) * recon)
}

/// One training example with everything precomputed that does not depend
/// on the parameters: resized clean/noisy grids, the resize-back map, and
/// the inverse-STFT plan.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub name: String,
    pub clean: AudioClip<T>,
    pub noisy: AudioClip<T>,
    pub noisy_spec: ComplexSpectrogram<T>,
    pub noisy_grids: (Tensor<T>, Tensor<T>),
    pub clean_grids: (Tensor<T>, Tensor<T>),
    pub resize_back: Arc<InterpMap<T>>,
    pub istft_plan: IstftPlan<T>,
}

/// Precompute the model-facing views of one clean/noisy pair.
pub fn prepare_item<T: Scalar>(
    name: &str,
    clean: AudioClip<T>,
    noisy: AudioClip<T>,
    stft_cfg: &StftConfig<T>,
    side: usize,
) -> Result<TrainItem<T>> {
    if clean.len() != noisy.len() || clean.sample_rate != noisy.sample_rate {
        return Err(Error::Dataset(format!(
            "pair {name}: clean and noisy clips disagree in length or rate"
        )));
    }
    let noisy_spec = stft(&noisy, stft_cfg)?;
    let clean_spec = stft(&clean, stft_cfg)?;
    let noisy_grids = resize_to_model(&noisy_spec, side);
    let clean_grids = resize_to_model(&clean_spec, side);
    let resize_back = Arc::new(InterpMap::bilinear(
        (side, side),
        (noisy_spec.freq_bins(), noisy_spec.frames()),
    ));
    let istft_plan = IstftPlan::new(
        stft_cfg,
        noisy_spec.frames(),
        noisy_spec.hop,
        clean.len(),
    )?;
    Ok(TrainItem {
        name: name.to_string(),
        clean,
        noisy,
        noisy_spec,
        noisy_grids,
        clean_grids,
        resize_back,
        istft_plan,
    })
}

/// Loss component buffers for one batch, all scalars on the tape.
pub struct LossBufs {
    pub real_image_l1: BufId,
    pub imag_image_l1: BufId,
    pub noise_l1: BufId,
    pub image_total: BufId,
    pub recon_l1: BufId,
    pub total: BufId,
}

/// Build the full differentiable loss for a batch of items. This is the
/// single code path used by training, the end-to-end gradient check, and
/// the divergence checks.
pub fn build_batch_loss<T: Scalar>(
    tape: &mut GradTape<T>,
    bound: &BoundModel,
    items: &[&TrainItem<T>],
    blend: T,
) -> Result<LossBufs> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if blend < T::zero() || blend > T::one() {
        return Err(Error::InvalidArgument(format!(
            "loss blend weight must lie in [0, 1], got {blend}"
        )));
    }
    let mut sums: Option<[BufId; 5]> = None;
    for item in items {
        let noisy_re = tape.leaf(item.noisy_grids.0.clone());
        let noisy_im = tape.leaf(item.noisy_grids.1.clone());
        let clean_re = tape.leaf(item.clean_grids.0.clone());
        let clean_im = tape.leaf(item.clean_grids.1.clone());

        let (pred_re, pred_im) = bound.forward(tape, noisy_re, noisy_im)?;

        let d_re = tape.sub(pred_re, clean_re)?;
        let abs_re = tape.abs(d_re);
        let real_l1 = tape.mean_all(abs_re);
        let d_im = tape.sub(pred_im, clean_im)?;
        let abs_im = tape.abs(d_im);
        let imag_l1 = tape.mean_all(abs_im);

        // ε - ε̂ = (noisy - clean) - (noisy - pred), entrywise modulus.
        let eps_re = tape.sub(noisy_re, clean_re)?;
        let eps_hat_re = tape.sub(noisy_re, pred_re)?;
        let nr = tape.sub(eps_re, eps_hat_re)?;
        let eps_im = tape.sub(noisy_im, clean_im)?;
        let eps_hat_im = tape.sub(noisy_im, pred_im)?;
        let ni = tape.sub(eps_im, eps_hat_im)?;
        let modulus = tape.hypot(nr, ni)?;
        let noise_l1 = tape.mean_all(modulus);

        let re_ft = tape.interp(pred_re, Arc::clone(&item.resize_back))?;
        let im_ft = tape.interp(pred_im, Arc::clone(&item.resize_back))?;
        let rec = istft_on_tape(tape, re_ft, im_ft, &item.istft_plan)?;
        let reference = tape.leaf(Tensor::new(
            vec![item.clean.len()],
            item.clean.samples.clone(),
        )?);
        let d_rec = tape.sub(rec, reference)?;
        let abs_rec = tape.abs(d_rec);
        let recon_l1 = tape.mean_all(abs_rec);

        let i1 = tape.add(real_l1, imag_l1)?;
        let image_total = tape.add(i1, noise_l1)?;

        let parts = [real_l1, imag_l1, noise_l1, image_total, recon_l1];
        sums = Some(match sums {
            None => parts,
            Some(prev) => {
                let mut next = prev;
                for (n, p) in next.iter_mut().zip(parts) {
                    *n = tape.add(*n, p)?;
                }
                next
            }
        });
    }
    let inv_b = T::of_usize(items.len()).recip();
    let [r, i, n, it, rec] = sums.expect("non-empty batch");
    let real_image_l1 = tape.scale(r, inv_b);
    let imag_image_l1 = tape.scale(i, inv_b);
    let noise_l1 = tape.scale(n, inv_b);
    let image_total = tape.scale(it, inv_b);
    let recon_l1 = tape.scale(rec, inv_b);
    let img_part = tape.scale(image_total, blend);
    let rec_part = tape.scale(recon_l1, T::one() - blend);
    let total = tape.add(img_part, rec_part)?;
    Ok(LossBufs {
        real_image_l1,
        imag_image_l1,
        noise_l1,
        image_total,
        recon_l1,
        total,
    })
}

/// AdamW hyperparameters. Defaults: constant learning rate 1e-4, no weight
/// decay, β₁ 0.9, β₂ 0.999, ε 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig<T> {
    pub learning_rate: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamWConfig<T> {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: T::of(1e-4),
            weight_decay: T::zero(),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer. Moment buffers mirror
/// parameter shapes and are created lazily per parameter name.
pub struct AdamW<T> {
    pub cfg: AdamWConfig<T>,
    step: usize,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig<T>) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over all named parameters. Aborts without touching any
    /// parameter if a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &HashMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            g.check_finite(&format!("gradient of {name}"))?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = T::one() - c.beta1.powi(t);
        let bc2 = T::one() - c.beta2.powi(t);
        for (name, param) in params.named_mut() {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); param.numel()], vec![T::zero(); param.numel()]));
            for ((p, &g), (m_i, v_i)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m_i = c.beta1 * *m_i + (T::one() - c.beta1) * g;
                *v_i = c.beta2 * *v_i + (T::one() - c.beta2) * g * g;
                let m_hat = *m_i / bc1;
                let v_hat = *v_i / bc2;
                *p = *p
                    - c.learning_rate * c.weight_decay * *p
                    - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut HashMap<String, Tensor<T>>, max_norm: T) -> T {
    let mut sq = T::zero();
    for g in grads.values() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Training-loop configuration.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig<T> {
    pub optimizer: AdamWConfig<T>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<T>,
    /// Blend weight α for image vs reconstruction loss.
    pub loss_blend: T,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            epochs: 100,
            grad_clip: Some(T::one()),
            loss_blend: T::of(0.5),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceStep<T> {
    pub step: usize,
    pub loss: LossBreakdown<T>,
    pub wall_ms: u128,
}

impl<T: Scalar> TraceStep<T> {
    /// Tab-separated trace line: step, the seven loss fields, wall ms.
    pub fn to_line(&self) -> String {
        let f = self.loss.fields();
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}",
            self.step, f[0], f[1], f[2], f[3], f[4], f[5], f[6], self.wall_ms
        )
    }
}

pub struct TrainOutput<T> {
    pub params: ModelParams<T>,
    pub trace: Vec<TraceStep<T>>,
}

fn extract_breakdown<T: Scalar>(tape: &GradTape<T>, bufs: &LossBufs, blend: T) -> LossBreakdown<T> {
    LossBreakdown {
        real_image_l1: tape.scalar_value(bufs.real_image_l1),
        imag_image_l1: tape.scalar_value(bufs.imag_image_l1),
        noise_l1: tape.scalar_value(bufs.noise_l1),
        image_total: tape.scalar_value(bufs.image_total),
        recon_l1: tape.scalar_value(bufs.recon_l1),
        blend_weight: blend,
        total: tape.scalar_value(bufs.total),
    }
}

/// Run the training loop: epochs over seeded-shuffled batches, one AdamW
/// step per batch, per-step loss trace. Bit-reproducible for a fixed seed.
pub fn train<T: Scalar>(
    params: ModelParams<T>,
    items: &[TrainItem<T>],
    cfg: &TrainConfig<T>,
) -> Result<TrainOutput<T>> {
    if items.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut params = params;
    let mut optimizer = AdamW::new(cfg.optimizer);
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = substream(cfg.seed, "data");
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let batch: Vec<&TrainItem<T>> = chunk.iter().map(|&i| &items[i]).collect();
            let mut tape = GradTape::new();
            let bound = BoundModel::bind(&mut tape, &params, true);
            let names = bound.names(&params);
            let bufs = build_batch_loss(&mut tape, &bound, &batch, cfg.loss_blend)?;
            let total = tape.scalar_value(bufs.total);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    message: format!("non-finite total loss {total}"),
                });
            }
            let breakdown = extract_breakdown(&tape, &bufs, cfg.loss_blend);
            tape.backward(bufs.total)?;
            let mut grads: HashMap<String, Tensor<T>> = names
                .0
                .iter()
                .map(|(name, id)| (name.clone(), tape.grad(*id)))
                .collect();
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            optimizer
                .step(&mut params, &grads)
                .map_err(|e| Error::Diverged {
                    step,
                    message: e.to_string(),
                })?;
            trace.push(TraceStep {
                step,
                loss: breakdown,
                wall_ms: started.elapsed().as_millis(),
            });
            step += 1;
        }
    }
    Ok(TrainOutput { params, trace })
}

/// End-to-end finite-difference check of the total loss. Samples a seeded
/// subset of coordinates spread across every parameter tensor (`budget`
/// total), comparing the analytic gradient against central differences.
pub fn gradient_check_model<T: Scalar>(
    params: &ModelParams<T>,
    items: &[&TrainItem<T>],
    blend: T,
    fd_step: T,
    budget: usize,
    seed: u64,
) -> Result<T> {
    let analytic: HashMap<String, Tensor<T>> = {
        let mut tape = GradTape::new();
        let bound = BoundModel::bind(&mut tape, params, true);
        let names = bound.names(params);
        let bufs = build_batch_loss(&mut tape, &bound, items, blend)?;
        tape.backward(bufs.total)?;
        names
            .0
            .iter()
            .map(|(name, id)| (name.clone(), tape.grad(*id)))
            .collect()
    };
    let eval = |p: &ModelParams<T>| -> Result<T> {
        let mut tape = GradTape::new();
        let bound = BoundModel::bind(&mut tape, p, false);
        let bufs = build_batch_loss(&mut tape, &bound, items, blend)?;
        Ok(tape.scalar_value(bufs.total))
    };
    let named = params.named();
    let total_numel: usize = named.iter().map(|(_, t)| t.numel()).sum();
    let mut rng = substream(seed, "gradcheck");
    let mut worst = T::zero();
    let floor = T::of(1e-8);
    for (name, tensor) in &named {
        let share = (budget * tensor.numel()).div_ceil(total_numel).max(1);
        for _ in 0..share.min(tensor.numel()) {
            let coord = rand::Rng::gen_range(&mut rng, 0..tensor.numel());
            let probe = |delta: T| -> Result<T> {
                let mut p = params.clone();
                for (n, t) in p.named_mut() {
                    if &n == name {
                        t.data_mut()[coord] += delta;
                        break;
                    }
                }
                eval(&p)
            };
            let fd = (probe(fd_step)? - probe(-fd_step)?) / (T::of(2.0) * fd_step);
            let a = analytic[name].data()[coord];
            let denom = a.abs().max(fd.abs()).max(floor);
            let rel = (a - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn rand_grid(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = substream(seed, "g");
        Tensor::new(vec![h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn image_loss_zero_at_optimum() {
        let c_re = rand_grid(1, 6, 6);
        let c_im = rand_grid(2, 6, 6);
        let n_re = rand_grid(3, 6, 6);
        let n_im = rand_grid(4, 6, 6);
        let (r, i, n) = image_loss(&c_re, &c_im, &c_re, &c_im, &n_re, &n_im).unwrap();
        assert_eq!((r, i, n), (0.0, 0.0, 0.0));
    }

    #[test]
    fn image_loss_constant_offset() {
        let c_re = rand_grid(5, 6, 6);
        let c_im = rand_grid(6, 6, 6);
        let n_re = rand_grid(7, 6, 6);
        let n_im = rand_grid(8, 6, 6);
        let p_re = c_re.map(|v| v + 1.0);
        let (r, i, n) = image_loss(&p_re, &c_im, &c_re, &c_im, &n_re, &n_im).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(i, 0.0);
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_loss_matches_scalar_loop() {
        let p_re = rand_grid(9, 5, 7);
        let p_im = rand_grid(10, 5, 7);
        let c_re = rand_grid(11, 5, 7);
        let c_im = rand_grid(12, 5, 7);
        let n_re = rand_grid(13, 5, 7);
        let n_im = rand_grid(14, 5, 7);
        let (r, i, n) = image_loss(&p_re, &p_im, &c_re, &c_im, &n_re, &n_im).unwrap();
        let mut er = 0.0;
        let mut ei = 0.0;
        let mut en = 0.0;
        for k in 0..35 {
            er += (p_re.data()[k] - c_re.data()[k]).abs();
            ei += (p_im.data()[k] - c_im.data()[k]).abs();
            let dr = (n_re.data()[k] - c_re.data()[k]) - (n_re.data()[k] - p_re.data()[k]);
            let di = (n_im.data()[k] - c_im.data()[k]) - (n_im.data()[k] - p_im.data()[k]);
            en += (dr * dr + di * di).sqrt();
        }
        assert_eq!(r, er / 35.0);
        assert_eq!(i, ei / 35.0);
        assert_eq!(n, en / 35.0);
    }

    #[test]
    fn recon_loss_cases() {
        let a = AudioClip::new(vec![0.1f64, -0.4, 0.3], 16000);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        let b = AudioClip::new(a.samples.iter().map(|v| v + 0.5).collect::<Vec<f64>>(), 16000);
        assert!((recon_loss(&b, &a).unwrap() - 0.5).abs() < 1e-12);
        let short = AudioClip::new(vec![0.0f64; 2], 16000);
        assert!(recon_loss(&short, &a).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(2.0f64, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0f64, 4.0, 0.0).unwrap(), 4.0);
        assert!((total_loss(2.0f64, 4.0, 0.25).unwrap() - 3.5).abs() < 1e-12);
        assert!(total_loss(1.0f64, 1.0, 1.5).is_err());
        assert!(total_loss(1.0f64, 1.0, -0.1).is_err());
    }

    #[test]
    fn adamw_zero_gradients_zero_moments_no_move() {
        let cfg = ModelConfig::toy();
        let mut params = ModelParams::<f64>::init(cfg, 1).unwrap();
        let before: Vec<Tensor<f64>> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
        let grads: HashMap<String, Tensor<f64>> = params
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut params, &grads).unwrap();
        for ((_, after), b) in params.named().iter().zip(&before) {
            assert_eq!(*after, b);
        }
    }

    #[test]
    fn adamw_single_step_hand_value() {
        // One step with g = 1 everywhere, lr = 0.1: bias-corrected update is
        // -lr * m̂ / (sqrt(v̂) + eps) ≈ -0.1.
        let cfg = ModelConfig::toy();
        let mut params = ModelParams::<f64>::init(cfg, 2).unwrap();
        let before = params.cond.clone();
        let grads: HashMap<String, Tensor<f64>> = params
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::filled(t.shape().to_vec(), 1.0)))
            .collect();
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            ..AdamWConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        for (a, b) in params.cond.data().iter().zip(before.data()) {
            let update = a - b;
            assert!((update + 0.1).abs() < 1e-8, "update {update}");
        }
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let cfg = ModelConfig::toy();
        let mut params = ModelParams::<f64>::init(cfg, 3).unwrap();
        let before = params.cond.clone();
        let mut grads: HashMap<String, Tensor<f64>> = params
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        grads.get_mut("cond").unwrap().data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut params, &grads).is_err());
        assert_eq!(params.cond, before, "aborted step must not move params");
    }

    #[test]
    fn adamw_minimizes_quadratic_bowl() {
        // Treat the conditioning vector as the bowl variable:
        // loss = Σ cond², gradient 2·cond, everything else frozen at zero
        // gradient. 500 steps must bring every coordinate under 1e-3.
        let cfg = ModelConfig::toy();
        let mut params = ModelParams::<f64>::init(cfg, 5).unwrap();
        for v in params.cond.data_mut() {
            *v = 1.5;
        }
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.05,
            ..AdamWConfig::default()
        });
        for _ in 0..500 {
            let grads: HashMap<String, Tensor<f64>> = params
                .named()
                .iter()
                .map(|(n, t)| {
                    let g = if n == "cond" {
                        t.scale(2.0)
                    } else {
                        Tensor::zeros(t.shape().to_vec())
                    };
                    (n.clone(), g)
                })
                .collect();
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(
            params.cond.data().iter().all(|&p| p.abs() < 1e-3),
            "{:?}",
            params.cond.data()
        );
    }

    use super::tests_helpers::toy_items;

    #[test]
    fn end_to_end_gradient_check_on_small_config() {
        let stft_cfg = StftConfig::hamming(64, 64).unwrap();
        let items = toy_items(40, 1, 512, &stft_cfg);
        let mut cfg = ModelConfig::toy();
        cfg.image_side = 32;
        cfg.patch_size = 8;
        cfg.depth = 1;
        let mut params = ModelParams::<f64>::init(cfg, 41).unwrap();
        // Randomize the zero-initialized layers so every path carries
        // gradient.
        let mut rng = substream(42, "perturb");
        for (_, t) in params.named_mut() {
            for v in t.data_mut() {
                *v += 0.2 * rng.gen_range(-1.0..1.0);
            }
        }
        let refs: Vec<&TrainItem<f64>> = items.iter().collect();
        let err = gradient_check_model(&params, &refs, 0.5, 1e-4, 60, 43).unwrap();
        assert!(err < 1e-4, "end-to-end gradient error {err}");
    }

    #[test]
    fn train_lr_zero_keeps_params_and_trace_constant() {
        let stft_cfg = StftConfig::hamming(64, 64).unwrap();
        let items = toy_items(50, 2, 512, &stft_cfg);
        let mut mc = ModelConfig::toy();
        mc.depth = 1;
        let params = ModelParams::<f64>::init(mc, 51).unwrap();
        let before: Vec<Tensor<f64>> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                learning_rate: 0.0,
                ..AdamWConfig::default()
            },
            batch_size: 2,
            epochs: 3,
            grad_clip: Some(1.0),
            loss_blend: 0.5,
            seed: 52,
        };
        let out = train(params, &items, &cfg).unwrap();
        for ((_, after), b) in out.params.named().iter().zip(&before) {
            assert_eq!(*after, b);
        }
        let first = out.trace[0].loss;
        for step in &out.trace {
            assert_eq!(step.loss, first, "trace must be constant at lr 0");
        }
    }

    #[test]
    fn train_same_seed_identical_traces() {
        let stft_cfg = StftConfig::hamming(64, 64).unwrap();
        let items = toy_items(60, 3, 512, &stft_cfg);
        let mut mc = ModelConfig::toy();
        mc.depth = 1;
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                ..AdamWConfig::default()
            },
            batch_size: 2,
            epochs: 2,
            grad_clip: Some(1.0),
            loss_blend: 0.5,
            seed: 61,
        };
        let run = || {
            let params = ModelParams::<f64>::init(mc.clone(), 62).unwrap();
            train(params, &items, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.loss, y.loss, "bit-identical trace required");
        }
        for ((_, ta), (_, tb)) in a.params.named().iter().zip(b.params.named().iter()) {
            assert_eq!(*ta, *tb);
        }
    }

    #[test]
    fn adamw_constant_gradient_approaches_sign_step() {
        // With weight decay 0 and a constant gradient, the large-t update
        // direction is -sign(g) with magnitude lr.
        let cfg = ModelConfig::toy();
        let mut params = ModelParams::<f64>::init(cfg, 4).unwrap();
        let grads: HashMap<String, Tensor<f64>> = params
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::filled(t.shape().to_vec(), -0.37)))
            .collect();
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 1e-3,
            ..AdamWConfig::default()
        });
        for _ in 0..200 {
            opt.step(&mut params, &grads).unwrap();
        }
        let before_step = params.cond.data()[0];
        opt.step(&mut params, &grads).unwrap();
        let update = params.cond.data()[0] - before_step;
        assert!((update - 1e-3).abs() < 1e-5, "late-step update {update}");
    }
}
