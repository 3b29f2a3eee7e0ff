//! The CIGDT network: a patch encoder with learned position embeddings,
//! a stack of adaptive-layer-norm transformer blocks whose attention is
//! sparse-pattern diffusion, and a linear decoder back to spectrogram
//! patches.
//!
//! The real and imaginary spectrogram images run through two streams with
//! identical architecture and separate weights, cross-combined only at the
//! decoder's two-channel output: the final prediction takes the real
//! channel from the real stream and the imaginary channel from the
//! imaginary stream.
//!
//! Conditioning follows the adaLN-Zero recipe: each block regresses
//! per-dimension scale/shift/gate vectors from a conditioning embedding,
//! with the regressor's final layer zero-initialized so every block starts
//! as the identity. The conditioning embedding itself is a single learned
//! vector.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{DiffusionConfig, SparsePattern};
use crate::autodiff::{BufId, GradTape};
use crate::error::{Error, Result};
use crate::rng::{normal, substream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the blocks.
pub const LN_EPS: f64 = 1e-5;

/// Architecture and attention hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cond_dim: usize,
    pub window_radius: usize,
    /// The first `global_tokens` tokens attend globally.
    pub global_tokens: usize,
    pub random_links: usize,
    pub teleport: f64,
    pub diffusion_steps: usize,
}

impl ModelConfig {
    /// Full-size configuration: 256×256 inputs, 16×16 patches, four blocks.
    pub fn full_size() -> Self {
        ModelConfig {
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
        }
    }

    /// Small configuration for tests and gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            image_side: 32,
            patch_size: 8,
            hidden_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            cond_dim: 16,
            window_radius: 4,
            global_tokens: 1,
            random_links: 2,
            teleport: 0.15,
            diffusion_steps: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image side {}",
                self.patch_size, self.image_side
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide hidden dim {}",
                self.heads, self.hidden_dim
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.mlp_ratio == 0 || self.cond_dim == 0 {
            return Err(Error::Config("mlp_ratio and cond_dim must be >= 1".into()));
        }
        if !(self.teleport > 0.0 && self.teleport <= 1.0) {
            return Err(Error::Config(format!(
                "teleport must lie in (0, 1], got {}",
                self.teleport
            )));
        }
        if self.global_tokens > self.n_tokens() {
            return Err(Error::Config("more global tokens than tokens".into()));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn diffusion<T: Scalar>(&self) -> DiffusionConfig<T> {
        DiffusionConfig {
            teleport: T::of(self.teleport),
            steps: self.diffusion_steps,
        }
    }

    pub fn build_pattern(&self, seed: u64) -> Result<SparsePattern> {
        let globals: Vec<usize> = (0..self.global_tokens).collect();
        SparsePattern::build(
            self.n_tokens(),
            self.window_radius,
            &globals,
            self.random_links,
            seed,
        )
    }
}

/// Weight matrix plus bias row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    fn fan_in(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = Tensor::new(
            vec![d_in, d_out],
            (0..d_in * d_out)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect(),
        )
        .expect("init shape");
        LinearParams {
            weight,
            bias: Tensor::zeros(vec![1, d_out]),
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![d_in, d_out]),
            bias: Tensor::zeros(vec![1, d_out]),
        }
    }

    fn cast<U: Scalar>(&self) -> LinearParams<U> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Patch projection and position table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub projection: Tensor<T>,
    pub position: Tensor<T>,
}

/// Modulation regressor: one hidden nonlinear layer, then a linear layer to
/// `k` D-vectors. The final layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnParams<T> {
    pub hidden: LinearParams<T>,
    pub out: LinearParams<T>,
}

impl<T: Scalar> AdaLnParams<T> {
    fn init(rng: &mut impl Rng, cond_dim: usize, vectors: usize, dim: usize) -> Self {
        AdaLnParams {
            hidden: LinearParams::fan_in(rng, cond_dim, cond_dim),
            out: LinearParams::zeros(cond_dim, vectors * dim),
        }
    }

    fn cast<U: Scalar>(&self) -> AdaLnParams<U> {
        AdaLnParams {
            hidden: self.hidden.cast(),
            out: self.out.cast(),
        }
    }
}

/// One transformer block: attention projections, MLP, and the adaLN
/// regressor producing (γ1, β1, α1, γ2, β2, α2).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub mlp_in: LinearParams<T>,
    pub mlp_out: LinearParams<T>,
    pub adaln: AdaLnParams<T>,
}

/// Final adaptive norm plus the linear decode to `P²·2C` values per token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub adaln: AdaLnParams<T>,
    pub decode: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams<T> {
    pub encoder: EncoderParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub decoder: DecoderParams<T>,
}

/// All learnable weights plus the (fixed) attention pattern.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub cond: Tensor<T>,
    pub real: StreamParams<T>,
    pub imag: StreamParams<T>,
    pub pattern: Arc<SparsePattern>,
}

fn init_stream<T: Scalar>(cfg: &ModelConfig, seed: u64, stream: &str) -> StreamParams<T> {
    let d = cfg.hidden_dim;
    let n = cfg.n_tokens();
    let patch_dim = cfg.patch_dim();
    let rs = |name: &str| substream(seed, &format!("init/{stream}.{name}"));
    let projection = {
        let mut rng = rs("patch_embed");
        let bound = 1.0 / (patch_dim as f64).sqrt();
        Tensor::new(
            vec![patch_dim, d],
            (0..patch_dim * d)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect(),
        )
        .expect("init shape")
    };
    let position = {
        let mut rng = rs("pos_table");
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| T::of(0.02 * normal(&mut rng))).collect(),
        )
        .expect("init shape")
    };
    let blocks = (0..cfg.depth)
        .map(|b| {
            let mut rng = rs(&format!("block{b}"));
            BlockParams {
                wq: LinearParams::fan_in(&mut rng, d, d),
                wk: LinearParams::fan_in(&mut rng, d, d),
                wv: LinearParams::fan_in(&mut rng, d, d),
                wo: LinearParams::fan_in(&mut rng, d, d),
                mlp_in: LinearParams::fan_in(&mut rng, d, d * cfg.mlp_ratio),
                mlp_out: LinearParams::fan_in(&mut rng, d * cfg.mlp_ratio, d),
                adaln: AdaLnParams::init(&mut rng, cfg.cond_dim, 6, d),
            }
        })
        .collect();
    let decoder = {
        let mut rng = rs("decoder");
        DecoderParams {
            adaln: AdaLnParams::init(&mut rng, cfg.cond_dim, 2, d),
            decode: LinearParams::zeros(d, patch_dim * 2),
        }
    };
    StreamParams {
        encoder: EncoderParams {
            projection,
            position,
        },
        blocks,
        decoder,
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters. Projections use scaled-uniform fan-in init, the
    /// position table and conditioning vector small normals, and every
    /// adaLN regressor output layer and the decoder's linear decode start
    /// at exactly zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pattern = Arc::new(config.build_pattern(seed)?);
        let cond = {
            let mut rng = substream(seed, "init/cond");
            Tensor::new(
                vec![1, config.cond_dim],
                (0..config.cond_dim)
                    .map(|_| T::of(0.02 * normal(&mut rng)))
                    .collect(),
            )?
        };
        Ok(ModelParams {
            real: init_stream(&config, seed, "real"),
            imag: init_stream(&config, seed, "imag"),
            cond,
            pattern,
            config,
        })
    }

    /// Deterministic (name, tensor) listing of every learnable tensor.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("cond".to_string(), &self.cond));
        for (tag, stream) in [("real", &self.real), ("imag", &self.imag)] {
            out.push((format!("{tag}.patch_embed"), &stream.encoder.projection));
            out.push((format!("{tag}.pos_table"), &stream.encoder.position));
            for (b, block) in stream.blocks.iter().enumerate() {
                for (part, lin) in [
                    ("wq", &block.wq),
                    ("wk", &block.wk),
                    ("wv", &block.wv),
                    ("wo", &block.wo),
                    ("mlp_in", &block.mlp_in),
                    ("mlp_out", &block.mlp_out),
                    ("adaln_hidden", &block.adaln.hidden),
                    ("adaln_out", &block.adaln.out),
                ] {
                    out.push((format!("{tag}.block{b}.{part}.weight"), &lin.weight));
                    out.push((format!("{tag}.block{b}.{part}.bias"), &lin.bias));
                }
            }
            for (part, lin) in [
                ("adaln_hidden", &stream.decoder.adaln.hidden),
                ("adaln_out", &stream.decoder.adaln.out),
                ("decode", &stream.decoder.decode),
            ] {
                out.push((format!("{tag}.decoder.{part}.weight"), &lin.weight));
                out.push((format!("{tag}.decoder.{part}.bias"), &lin.bias));
            }
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("cond".to_string(), &mut self.cond));
        for (tag, stream) in [("real", &mut self.real), ("imag", &mut self.imag)] {
            out.push((format!("{tag}.patch_embed"), &mut stream.encoder.projection));
            out.push((format!("{tag}.pos_table"), &mut stream.encoder.position));
            for (b, block) in stream.blocks.iter_mut().enumerate() {
                for (part, lin) in [
                    ("wq", &mut block.wq),
                    ("wk", &mut block.wk),
                    ("wv", &mut block.wv),
                    ("wo", &mut block.wo),
                    ("mlp_in", &mut block.mlp_in),
                    ("mlp_out", &mut block.mlp_out),
                    ("adaln_hidden", &mut block.adaln.hidden),
                    ("adaln_out", &mut block.adaln.out),
                ] {
                    out.push((format!("{tag}.block{b}.{part}.weight"), &mut lin.weight));
                    out.push((format!("{tag}.block{b}.{part}.bias"), &mut lin.bias));
                }
            }
            for (part, lin) in [
                ("adaln_hidden", &mut stream.decoder.adaln.hidden),
                ("adaln_out", &mut stream.decoder.adaln.out),
                ("decode", &mut stream.decoder.decode),
            ] {
                out.push((format!("{tag}.decoder.{part}.weight"), &mut lin.weight));
                out.push((format!("{tag}.decoder.{part}.bias"), &mut lin.bias));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_stream = |s: &StreamParams<T>| StreamParams {
            encoder: EncoderParams {
                projection: s.encoder.projection.cast(),
                position: s.encoder.position.cast(),
            },
            blocks: s
                .blocks
                .iter()
                .map(|b| BlockParams {
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    mlp_in: b.mlp_in.cast(),
                    mlp_out: b.mlp_out.cast(),
                    adaln: b.adaln.cast(),
                })
                .collect(),
            decoder: DecoderParams {
                adaln: s.decoder.adaln.cast(),
                decode: s.decoder.decode.cast(),
            },
        };
        ModelParams {
            config: self.config.clone(),
            cond: self.cond.cast(),
            real: cast_stream(&self.real),
            imag: cast_stream(&self.imag),
            pattern: Arc::clone(&self.pattern),
        }
    }

    /// Plain forward pass: resized real/imaginary grids in, predicted grids
    /// out. Deterministic given params; bit-identical to the taped forward.
    pub fn forward(&self, real_img: &Tensor<T>, imag_img: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = GradTape::new();
        let bound = BoundModel::bind(&mut tape, self, false);
        let re = tape.leaf(real_img.clone());
        let im = tape.leaf(imag_img.clone());
        let (pr, pi) = bound.forward(&mut tape, re, im)?;
        Ok((tape.value(pr).clone(), tape.value(pi).clone()))
    }
}

/// Flat index map sending token-major patch layout to grid layout:
/// `out[n·P² + p] = grid[pixel(n, p)]`.
pub fn patchify_index_map(side: usize, patch: usize) -> Vec<usize> {
    let grid = side / patch;
    let mut idx = Vec::with_capacity(side * side);
    for pr in 0..grid {
        for pc in 0..grid {
            for py in 0..patch {
                for px in 0..patch {
                    idx.push((pr * patch + py) * side + pc * patch + px);
                }
            }
        }
    }
    idx
}

/// Flat index map extracting channel `ch` of decoded tokens
/// (`N × P²·2` layout, channel-last) into an H×W grid.
pub fn unpatchify_index_map(side: usize, patch: usize, ch: usize) -> Vec<usize> {
    let grid = side / patch;
    let p2 = patch * patch;
    let mut idx = vec![0usize; side * side];
    for pr in 0..grid {
        for pc in 0..grid {
            let n = pr * grid + pc;
            for py in 0..patch {
                for px in 0..patch {
                    let pixel = (pr * patch + py) * side + pc * patch + px;
                    idx[pixel] = n * (p2 * 2) + (py * patch + px) * 2 + ch;
                }
            }
        }
    }
    idx
}

/// Per-block modulation vectors (each `1×D`).
pub struct Modulation {
    pub gamma1: BufId,
    pub beta1: BufId,
    pub alpha1: BufId,
    pub gamma2: BufId,
    pub beta2: BufId,
    pub alpha2: BufId,
}

struct BoundLinear {
    weight: BufId,
    bias: BufId,
}

impl BoundLinear {
    fn bind<T: Scalar>(tape: &mut GradTape<T>, lin: &LinearParams<T>, train: bool) -> Self {
        let weight = if train { tape.param(&lin.weight) } else { tape.leaf(lin.weight.clone()) };
        let bias = if train { tape.param(&lin.bias) } else { tape.leaf(lin.bias.clone()) };
        BoundLinear { weight, bias }
    }

    fn apply<T: Scalar>(&self, tape: &mut GradTape<T>, x: BufId) -> Result<BufId> {
        let y = tape.matmul(x, self.weight)?;
        tape.row_bias(y, self.bias)
    }
}

struct BoundAdaLn {
    hidden: BoundLinear,
    out: BoundLinear,
}

struct BoundBlock {
    wq: BoundLinear,
    wk: BoundLinear,
    wv: BoundLinear,
    wo: BoundLinear,
    mlp_in: BoundLinear,
    mlp_out: BoundLinear,
    adaln: BoundAdaLn,
}

struct BoundStream {
    projection: BufId,
    position: BufId,
    blocks: Vec<BoundBlock>,
    dec_adaln: BoundAdaLn,
    decode: BoundLinear,
}

/// A model's parameters registered on a tape, plus the fixed index maps.
pub struct BoundModel {
    config: ModelConfig,
    cond: BufId,
    real: BoundStream,
    imag: BoundStream,
    pattern: Arc<SparsePattern>,
    patchify_idx: Arc<Vec<usize>>,
    chan_idx: [Arc<Vec<usize>>; 2],
}

/// (name, BufId) pairs in the exact order of [`ModelParams::named`]; used
/// to collect gradients after `backward`.
pub struct BoundNames(pub Vec<(String, BufId)>);

impl BoundModel {
    /// Register every parameter on the tape. With `train == false` the
    /// tensors are registered as constants.
    pub fn bind<T: Scalar>(tape: &mut GradTape<T>, params: &ModelParams<T>, train: bool) -> Self {
        let bind_adaln = |tape: &mut GradTape<T>, a: &AdaLnParams<T>| BoundAdaLn {
            hidden: BoundLinear::bind(tape, &a.hidden, train),
            out: BoundLinear::bind(tape, &a.out, train),
        };
        let bind_stream = |tape: &mut GradTape<T>, s: &StreamParams<T>| {
            let projection = if train {
                tape.param(&s.encoder.projection)
            } else {
                tape.leaf(s.encoder.projection.clone())
            };
            let position = if train {
                tape.param(&s.encoder.position)
            } else {
                tape.leaf(s.encoder.position.clone())
            };
            let blocks = s
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    wq: BoundLinear::bind(tape, &b.wq, train),
                    wk: BoundLinear::bind(tape, &b.wk, train),
                    wv: BoundLinear::bind(tape, &b.wv, train),
                    wo: BoundLinear::bind(tape, &b.wo, train),
                    mlp_in: BoundLinear::bind(tape, &b.mlp_in, train),
                    mlp_out: BoundLinear::bind(tape, &b.mlp_out, train),
                    adaln: bind_adaln(tape, &b.adaln),
                })
                .collect();
            let dec_adaln = bind_adaln(tape, &s.decoder.adaln);
            let decode = BoundLinear::bind(tape, &s.decoder.decode, train);
            BoundStream {
                projection,
                position,
                blocks,
                dec_adaln,
                decode,
            }
        };
        let cond = if train { tape.param(&params.cond) } else { tape.leaf(params.cond.clone()) };
        let real = bind_stream(tape, &params.real);
        let imag = bind_stream(tape, &params.imag);
        let cfg = &params.config;
        BoundModel {
            config: cfg.clone(),
            cond,
            real,
            imag,
            pattern: Arc::clone(&params.pattern),
            patchify_idx: Arc::new(patchify_index_map(cfg.image_side, cfg.patch_size)),
            chan_idx: [
                Arc::new(unpatchify_index_map(cfg.image_side, cfg.patch_size, 0)),
                Arc::new(unpatchify_index_map(cfg.image_side, cfg.patch_size, 1)),
            ],
        }
    }

    /// Names aligned with the binding order of [`ModelParams::named`].
    pub fn names<T: Scalar>(&self, params: &ModelParams<T>) -> BoundNames {
        let mut ids = Vec::new();
        ids.push(self.cond);
        for stream in [&self.real, &self.imag] {
            ids.push(stream.projection);
            ids.push(stream.position);
            for b in &stream.blocks {
                for lin in [&b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_in, &b.mlp_out] {
                    ids.push(lin.weight);
                    ids.push(lin.bias);
                }
                for lin in [&b.adaln.hidden, &b.adaln.out] {
                    ids.push(lin.weight);
                    ids.push(lin.bias);
                }
            }
            for lin in [&stream.dec_adaln.hidden, &stream.dec_adaln.out, &stream.decode] {
                ids.push(lin.weight);
                ids.push(lin.bias);
            }
        }
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        debug_assert_eq!(names.len(), ids.len());
        BoundNames(names.into_iter().zip(ids).collect())
    }

    pub fn cond_id(&self) -> BufId {
        self.cond
    }

    /// Non-overlapping patches, flattened, projected, position added.
    pub fn patchify<T: Scalar>(
        &self,
        tape: &mut GradTape<T>,
        grid: BufId,
        stream: Stream,
    ) -> Result<BufId> {
        let cfg = &self.config;
        if tape.value(grid).shape() != [cfg.image_side, cfg.image_side] {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: vec![cfg.image_side, cfg.image_side],
                rhs: tape.value(grid).shape().to_vec(),
            });
        }
        let s = self.stream(stream);
        let patches = tape.gather(
            grid,
            Arc::clone(&self.patchify_idx),
            vec![cfg.n_tokens(), cfg.patch_dim()],
        )?;
        let projected = tape.matmul(patches, s.projection)?;
        tape.add(projected, s.position)
    }

    /// Regress modulation vectors from the conditioning embedding. The γ
    /// outputs are offset by +1 so a zero regressor means identity scale.
    pub fn adaln_modulation<T: Scalar>(
        &self,
        tape: &mut GradTape<T>,
        cond: BufId,
        stream: Stream,
        block: usize,
    ) -> Result<Modulation> {
        let b = &self.stream(stream).blocks[block];
        let d = self.config.hidden_dim;
        let h = b.adaln.hidden.apply(tape, cond)?;
        let h = tape.gelu(h);
        let v = b.adaln.out.apply(tape, h)?;
        let piece = |tape: &mut GradTape<T>, i: usize| tape.slice(v, i * d, vec![1, d]);
        let gamma1 = piece(tape, 0)?;
        let gamma1 = tape.add_scalar(gamma1, T::one());
        let beta1 = piece(tape, 1)?;
        let alpha1 = piece(tape, 2)?;
        let gamma2 = piece(tape, 3)?;
        let gamma2 = tape.add_scalar(gamma2, T::one());
        let beta2 = piece(tape, 4)?;
        let alpha2 = piece(tape, 5)?;
        Ok(Modulation {
            gamma1,
            beta1,
            alpha1,
            gamma2,
            beta2,
            alpha2,
        })
    }

    /// Multi-head sparse attention diffusion over the token sequence.
    fn msa<T: Scalar>(&self, tape: &mut GradTape<T>, x: BufId, block: &BoundBlock) -> Result<BufId> {
        let cfg = &self.config;
        let q = block.wq.apply(tape, x)?;
        let k = block.wk.apply(tape, x)?;
        let v = block.wv.apply(tape, x)?;
        let dh = cfg.head_dim();
        let alpha = T::of(cfg.teleport);
        let keep = T::one() - alpha;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let weights = tape.sparse_scores(qh, kh, &self.pattern)?;
            let mut z = vh;
            for _ in 0..cfg.diffusion_steps {
                let az = tape.sparse_apply(weights, z, &self.pattern)?;
                let az = tape.scale(az, keep);
                let tv = tape.scale(vh, alpha);
                z = tape.add(az, tv)?;
            }
            heads.push(z);
        }
        let merged = tape.concat_cols(&heads)?;
        block.wo.apply(tape, merged)
    }

    fn mlp<T: Scalar>(&self, tape: &mut GradTape<T>, x: BufId, block: &BoundBlock) -> Result<BufId> {
        let h = block.mlp_in.apply(tape, x)?;
        let h = tape.gelu(h);
        block.mlp_out.apply(tape, h)
    }

    /// One block: gated attention branch, then gated MLP branch, each with
    /// its own modulated pre-norm.
    pub fn cigdt_block<T: Scalar>(
        &self,
        tape: &mut GradTape<T>,
        x: BufId,
        cond: BufId,
        stream: Stream,
        block: usize,
    ) -> Result<BufId> {
        let m = self.adaln_modulation(tape, cond, stream, block)?;
        let b = &self.stream(stream).blocks[block];
        let eps = T::of(LN_EPS);

        let ln1 = tape.layernorm_rows(x, eps)?;
        let mod1 = modulate(tape, ln1, m.gamma1, m.beta1)?;
        let attn = self.msa(tape, mod1, b)?;
        let gated1 = tape.row_scale(attn, m.alpha1)?;
        let x1 = tape.add(x, gated1)?;

        let ln2 = tape.layernorm_rows(x1, eps)?;
        let mod2 = modulate(tape, ln2, m.gamma2, m.beta2)?;
        let mlp = self.mlp(tape, mod2, b)?;
        let gated2 = tape.row_scale(mlp, m.alpha2)?;
        tape.add(x1, gated2)
    }

    /// Final adaptive norm, linear decode, and unpatchify into the two
    /// channel grids.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut GradTape<T>,
        x: BufId,
        cond: BufId,
        stream: Stream,
    ) -> Result<(BufId, BufId)> {
        let s = self.stream(stream);
        let d = self.config.hidden_dim;
        let side = self.config.image_side;
        let h = s.dec_adaln.hidden.apply(tape, cond)?;
        let h = tape.gelu(h);
        let v = s.dec_adaln.out.apply(tape, h)?;
        let gamma = tape.slice(v, 0, vec![1, d])?;
        let gamma = tape.add_scalar(gamma, T::one());
        let beta = tape.slice(v, d, vec![1, d])?;
        let ln = tape.layernorm_rows(x, T::of(LN_EPS))?;
        let m = modulate(tape, ln, gamma, beta)?;
        let decoded = s.decode.apply(tape, m)?;
        let ch0 = tape.gather(decoded, Arc::clone(&self.chan_idx[0]), vec![side, side])?;
        let ch1 = tape.gather(decoded, Arc::clone(&self.chan_idx[1]), vec![side, side])?;
        Ok((ch0, ch1))
    }

    /// Run one stream: patchify, all blocks, decode. Returns the stream's
    /// two channel grids.
    pub fn stream_forward<T: Scalar>(
        &self,
        tape: &mut GradTape<T>,
        grid: BufId,
        stream: Stream,
    ) -> Result<(BufId, BufId)> {
        let mut tokens = self.patchify(tape, grid, stream)?;
        for b in 0..self.config.depth {
            tokens = self.cigdt_block(tape, tokens, self.cond, stream, b)?;
            tape.check_finite(tokens, &format!("{} stream, block {b}", stream.tag()))?;
        }
        self.decode(tape, tokens, self.cond, stream)
    }

    /// Both streams; the prediction takes the real channel from the real
    /// stream and the imaginary channel from the imaginary stream.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut GradTape<T>,
        real_img: BufId,
        imag_img: BufId,
    ) -> Result<(BufId, BufId)> {
        let (pred_real, _) = self.stream_forward(tape, real_img, Stream::Real)?;
        let (_, pred_imag) = self.stream_forward(tape, imag_img, Stream::Imag)?;
        Ok((pred_real, pred_imag))
    }

    fn stream(&self, stream: Stream) -> &BoundStream {
        match stream {
            Stream::Real => &self.real,
            Stream::Imag => &self.imag,
        }
    }
}

/// Which of the two weight streams to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Real,
    Imag,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Real => "real",
            Stream::Imag => "imag",
        }
    }
}

/// Per-dimension scale then shift applied to every token.
pub fn modulate<T: Scalar>(
    tape: &mut GradTape<T>,
    x: BufId,
    gamma: BufId,
    beta: BufId,
) -> Result<BufId> {
    let scaled = tape.row_scale(x, gamma)?;
    tape.row_bias(scaled, beta)
}
