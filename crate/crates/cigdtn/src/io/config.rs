//! Flat `key=value` run configuration: model hyperparameters, STFT
//! settings, training settings, and seeds. Unknown keys are rejected and
//! every value is range-checked before anything else runs.

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::training::{AdamWConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cond_dim: usize,
    pub window_radius: usize,
    pub global_tokens: usize,
    pub random_links: usize,
    pub teleport: f64,
    pub diffusion_steps: usize,
    pub stft_window: usize,
    pub stft_fft: usize,
    pub sample_rate: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f64,
    pub loss_blend: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_side: 256,
            patch_size: 16,
            hidden_dim: 256,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            cond_dim: 256,
            window_radius: 4,
            global_tokens: 1,
            random_links: 2,
            teleport: 0.15,
            diffusion_steps: 8,
            stft_window: 500,
            stft_fft: 512,
            sample_rate: 16000,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 100,
            grad_clip: 1.0,
            loss_blend: 0.5,
            seed: 42,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment; unknown keys and
    /// out-of-range values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: {key}: {what}: {value:?}", lineno + 1))
            };
            macro_rules! parse_into {
                ($field:expr, $ty:ty) => {
                    $field = value
                        .parse::<$ty>()
                        .map_err(|_| bad(concat!("expected ", stringify!($ty))))?
                };
            }
            match key {
                "image_side" => parse_into!(cfg.image_side, usize),
                "patch_size" => parse_into!(cfg.patch_size, usize),
                "hidden_dim" => parse_into!(cfg.hidden_dim, usize),
                "depth" => parse_into!(cfg.depth, usize),
                "heads" => parse_into!(cfg.heads, usize),
                "mlp_ratio" => parse_into!(cfg.mlp_ratio, usize),
                "cond_dim" => parse_into!(cfg.cond_dim, usize),
                "window_radius" => parse_into!(cfg.window_radius, usize),
                "global_tokens" => parse_into!(cfg.global_tokens, usize),
                "random_links" => parse_into!(cfg.random_links, usize),
                "teleport" => parse_into!(cfg.teleport, f64),
                "diffusion_steps" => parse_into!(cfg.diffusion_steps, usize),
                "stft_window" => parse_into!(cfg.stft_window, usize),
                "stft_fft" => parse_into!(cfg.stft_fft, usize),
                "sample_rate" => parse_into!(cfg.sample_rate, u32),
                "learning_rate" => parse_into!(cfg.learning_rate, f64),
                "weight_decay" => parse_into!(cfg.weight_decay, f64),
                "batch_size" => parse_into!(cfg.batch_size, usize),
                "epochs" => parse_into!(cfg.epochs, usize),
                "grad_clip" => parse_into!(cfg.grad_clip, f64),
                "loss_blend" => parse_into!(cfg.loss_blend, f64),
                "seed" => parse_into!(cfg.seed, u64),
                "precision" => {
                    cfg.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(bad("expected f32 or f64")),
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.stft_window < 2 || self.stft_window > self.stft_fft {
            return Err(Error::Config(format!(
                "stft_window {} must lie in [2, stft_fft = {}]",
                self.stft_window, self.stft_fft
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0 (0 disables)".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_blend) {
            return Err(Error::Config(format!(
                "loss_blend must lie in [0, 1], got {}",
                self.loss_blend
            )));
        }
        Ok(())
    }

    /// Stable serialization; `parse` of the output reproduces the config.
    pub fn serialize(&self) -> String {
        format!(
            "image_side={}\npatch_size={}\nhidden_dim={}\ndepth={}\nheads={}\nmlp_ratio={}\n\
             cond_dim={}\nwindow_radius={}\nglobal_tokens={}\nrandom_links={}\nteleport={}\n\
             diffusion_steps={}\nstft_window={}\nstft_fft={}\nsample_rate={}\nlearning_rate={}\n\
             weight_decay={}\nbatch_size={}\nepochs={}\ngrad_clip={}\nloss_blend={}\nseed={}\n\
             precision={}\n",
            self.image_side,
            self.patch_size,
            self.hidden_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.cond_dim,
            self.window_radius,
            self.global_tokens,
            self.random_links,
            self.teleport,
            self.diffusion_steps,
            self.stft_window,
            self.stft_fft,
            self.sample_rate,
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.grad_clip,
            self.loss_blend,
            self.seed,
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_side: self.image_side,
            patch_size: self.patch_size,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            cond_dim: self.cond_dim,
            window_radius: self.window_radius,
            global_tokens: self.global_tokens,
            random_links: self.random_links,
            teleport: self.teleport,
            diffusion_steps: self.diffusion_steps,
        }
    }

    pub fn stft_config<T: Scalar>(&self) -> Result<StftConfig<T>> {
        StftConfig::hamming(self.stft_window, self.stft_fft)
    }

    pub fn train_config<T: Scalar>(&self) -> TrainConfig<T> {
        TrainConfig {
            optimizer: AdamWConfig {
                learning_rate: T::of(self.learning_rate),
                weight_decay: T::of(self.weight_decay),
                ..AdamWConfig::default()
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            grad_clip: if self.grad_clip > 0.0 {
                Some(T::of(self.grad_clip))
            } else {
                None
            },
            loss_blend: T::of(self.loss_blend),
            seed: self.seed,
        }
    }

    /// Short hex fingerprint of the serialized config.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", crate::rng::fnv1a64(self.serialize().as_bytes()))
    }
}
