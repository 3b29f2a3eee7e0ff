//! Command-line driver: dataset synthesis, training, denoising,
//! evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cigdtn::error::{Error, Result};
use cigdtn::evaluation::{evaluate, EvalItem};
use cigdtn::io::wav::atomic_write;
use cigdtn::io::{
    checkpoint_load, checkpoint_save, decode_pairs, load_dir, synth_dataset, wav_read, wav_write,
    Precision, RunConfig, SynthOptions,
};
use cigdtn::model::ModelParams;
use cigdtn::pipeline::denoise_clip;
use cigdtn::rng::substream;
use cigdtn::scalar::Scalar;
use cigdtn::training::{gradient_check_model, prepare_item, train, TrainItem};

#[derive(Parser)]
#[command(name = "cigdtn", about = "Diffusion-transformer audio denoiser", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a clean/noisy dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace destination; defaults to <out>.trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Denoise a single WAV file with a trained checkpoint.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write an SDR report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate a synthetic clean/noisy dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 32000)]
        clip_len: usize,
    },
    /// Finite-difference check of the end-to-end loss gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            data,
            out,
            trace,
        } => {
            let run_cfg = RunConfig::parse(&std::fs::read_to_string(&config)?)?;
            match run_cfg.precision {
                Precision::F32 => cmd_train::<f32>(&run_cfg, &data, &out, trace.as_deref()),
                Precision::F64 => cmd_train::<f64>(&run_cfg, &data, &out, trace.as_deref()),
            }
        }
        Command::Denoise { ckpt, input, out } => cmd_denoise(&ckpt, &input, &out),
        Command::Eval { ckpt, data, report } => cmd_eval(&ckpt, &data, &report),
        Command::SynthData {
            out,
            clips,
            seed,
            sample_rate,
            clip_len,
        } => {
            let opts = SynthOptions {
                sample_rate,
                clip_len,
                ..SynthOptions::default()
            };
            let manifest = synth_dataset(&out, clips, seed, &opts)?;
            println!(
                "wrote {} clean/noisy pairs to {}",
                manifest.pairs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { config } => {
            let run_cfg = RunConfig::parse(&std::fs::read_to_string(&config)?)?;
            cmd_gradcheck(&run_cfg)
        }
    }
}

fn load_items<T: Scalar>(run_cfg: &RunConfig, data: &Path, strict: bool) -> Result<(Vec<EvalItem<T>>, usize)> {
    let manifest = load_dir(data)?;
    let (items, skipped, rate) = decode_pairs::<T>(&manifest, strict)?;
    if rate != run_cfg.sample_rate {
        return Err(Error::Dataset(format!(
            "dataset sample rate {rate} does not match configured {}; resampling is refused",
            run_cfg.sample_rate
        )));
    }
    Ok((items, skipped))
}

fn cmd_train<T: Scalar>(
    run_cfg: &RunConfig,
    data: &Path,
    out: &Path,
    trace_path: Option<&Path>,
) -> Result<()> {
    let stft_cfg = run_cfg.stft_config::<T>()?;
    let (items, _) = load_items::<T>(run_cfg, data, true)?;
    let side = run_cfg.image_side;
    let train_items: Vec<TrainItem<T>> = items
        .into_iter()
        .map(|item| prepare_item(&item.name, item.clean, item.noisy, &stft_cfg, side))
        .collect::<Result<_>>()?;
    let params = ModelParams::<T>::init(run_cfg.model_config(), run_cfg.seed)?;
    let result = train(params, &train_items, &run_cfg.train_config::<T>())?;
    checkpoint_save(out, &result.params, run_cfg)?;
    let mut trace_text = String::new();
    for step in &result.trace {
        trace_text.push_str(&step.to_line());
        trace_text.push('\n');
    }
    let default_trace = out.with_extension("trace");
    atomic_write(trace_path.unwrap_or(&default_trace), trace_text.as_bytes())?;
    if let Some(last) = result.trace.last() {
        println!(
            "trained {} steps; final total loss {:e}",
            result.trace.len(),
            last.loss.total
        );
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_denoise(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let (params, run_cfg) = checkpoint_load(ckpt)?;
    let stft_cfg = run_cfg.stft_config::<f32>()?;
    let clip = wav_read::<f32>(input)?;
    if clip.sample_rate != run_cfg.sample_rate {
        return Err(Error::Dataset(format!(
            "input sample rate {} does not match checkpoint's {}; resampling is refused",
            clip.sample_rate, run_cfg.sample_rate
        )));
    }
    let denoised = denoise_clip(&params, &stft_cfg, &clip)?;
    wav_write(out, &denoised)?;
    println!(
        "denoised {} samples -> {}",
        denoised.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let (params, run_cfg) = checkpoint_load(ckpt)?;
    let stft_cfg = run_cfg.stft_config::<f32>()?;
    let (items, skipped) = load_items::<f32>(&run_cfg, data, false)?;
    let mut eval_report = evaluate(&params, &stft_cfg, &items, &run_cfg.fingerprint())?;
    eval_report.skipped += skipped;
    atomic_write(report, eval_report.to_text().as_bytes())?;
    println!(
        "mean SDR {:.3} dB over {} clips ({} skipped); report at {}",
        eval_report.mean_sdr.as_f64(),
        eval_report.clip_count,
        eval_report.skipped,
        report.display()
    );
    Ok(())
}

fn cmd_gradcheck(run_cfg: &RunConfig) -> Result<()> {
    use rand::Rng;
    let stft_cfg = run_cfg.stft_config::<f64>()?;
    // Synthetic batch: one seeded clip pair, long enough for the STFT.
    let clip_len = (run_cfg.stft_window * 4).max(512);
    let opts = SynthOptions {
        sample_rate: run_cfg.sample_rate,
        clip_len,
        snr_choices: vec![5.0],
        chirps: false,
    };
    let dir = std::env::temp_dir().join(format!("cigdtn-gradcheck-{}", std::process::id()));
    let manifest = synth_dataset(&dir, 1, run_cfg.seed, &opts)?;
    let (items, _, _) = decode_pairs::<f64>(&manifest, true)?;
    let _ = std::fs::remove_dir_all(&dir);
    let item = prepare_item(
        &items[0].name,
        items[0].clean.clone(),
        items[0].noisy.clone(),
        &stft_cfg,
        run_cfg.image_side,
    )?;
    let mut params = ModelParams::<f64>::init(run_cfg.model_config(), run_cfg.seed)?;
    // Randomize the zero-initialized layers so every path carries gradient.
    let mut rng = substream(run_cfg.seed, "gradcheck/perturb");
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.gen_range(-1.0..1.0);
        }
    }
    let err = gradient_check_model(
        &params,
        &[&item],
        run_cfg.loss_blend,
        1e-4,
        200,
        run_cfg.seed,
    )?;
    println!("max relative error: {err:.3e}");
    if err < 1e-4 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check failed: max relative error {err:.3e} >= 1e-4"
        )))
    }
}
