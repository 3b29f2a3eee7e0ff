//! Dataset layout and synthetic data generation.
//!
//! On disk a dataset is two parallel directories, `clean/` and `noisy/`,
//! with matching WAV filenames, plus a `manifest.tsv` describing synthetic
//! pairs. The synthesizer generates clean clips (random sinusoid mixtures,
//! optionally slowly chirping) and mixes them with white, pink, or
//! babble-like noise at SNRs drawn from a configurable set. Everything is
//! seeded: two runs with the same seed produce byte-identical files.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dsp::{mix_at_snr, AudioClip};
use crate::error::{Error, Result};
use crate::evaluation::EvalItem;
use crate::io::wav::{wav_read, wav_write};
use crate::rng::substream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub name: String,
    pub clean_path: PathBuf,
    pub noisy_path: PathBuf,
    pub snr_db: Option<f64>,
    pub noise_kind: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub pairs: Vec<PairEntry>,
    pub sample_rate: u32,
    pub split: String,
}

/// List the clean/noisy WAV pairs of a dataset directory, sorted by name.
pub fn load_dir(dir: &Path) -> Result<DatasetManifest> {
    let clean_dir = dir.join("clean");
    let noisy_dir = dir.join("noisy");
    if !clean_dir.is_dir() || !noisy_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{}: expected clean/ and noisy/ subdirectories",
            dir.display()
        )));
    }
    let mut names: Vec<String> = std::fs::read_dir(&clean_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no .wav files in clean/",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let noisy_path = noisy_dir.join(&name);
        if !noisy_path.is_file() {
            return Err(Error::Dataset(format!(
                "missing noisy counterpart for {name}"
            )));
        }
        pairs.push(PairEntry {
            clean_path: clean_dir.join(&name),
            noisy_path,
            name,
            snr_db: None,
            noise_kind: None,
        });
    }
    Ok(DatasetManifest {
        pairs,
        sample_rate: 0,
        split: dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_string(),
    })
}

/// Decode every pair. Lengths within a pair are trimmed to the shorter
/// clip; mismatched sample rates are refused, never resampled. With
/// `strict` any undecodable pair is an error; otherwise it is skipped with
/// a warning and counted.
pub fn decode_pairs<T: Scalar>(
    manifest: &DatasetManifest,
    strict: bool,
) -> Result<(Vec<EvalItem<T>>, usize, u32)> {
    let mut items = Vec::with_capacity(manifest.pairs.len());
    let mut skipped = 0usize;
    let mut rate: Option<u32> = None;
    for pair in &manifest.pairs {
        let decoded = wav_read::<T>(&pair.clean_path).and_then(|clean| {
            let noisy = wav_read::<T>(&pair.noisy_path)?;
            if clean.sample_rate != noisy.sample_rate {
                return Err(Error::Dataset(format!(
                    "{}: clean and noisy sample rates differ",
                    pair.name
                )));
            }
            Ok((clean, noisy))
        });
        let (mut clean, mut noisy) = match decoded {
            Ok(v) => v,
            Err(e) if strict => return Err(e),
            Err(e) => {
                eprintln!("warning: skipping pair {}: {e}", pair.name);
                skipped += 1;
                continue;
            }
        };
        match rate {
            None => rate = Some(clean.sample_rate),
            Some(r) if r != clean.sample_rate => {
                return Err(Error::Dataset(format!(
                    "{}: sample rate {} conflicts with dataset rate {r}; resampling is refused",
                    pair.name, clean.sample_rate
                )))
            }
            _ => {}
        }
        let n = clean.len().min(noisy.len());
        clean.samples.truncate(n);
        noisy.samples.truncate(n);
        items.push(EvalItem {
            name: pair.name.clone(),
            clean,
            noisy,
        });
    }
    if items.is_empty() {
        return Err(Error::Dataset("no decodable pairs".into()));
    }
    Ok((items, skipped, rate.unwrap_or(0)))
}

/// Synthesis settings for toy datasets.
#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub sample_rate: u32,
    pub clip_len: usize,
    pub snr_choices: Vec<f64>,
    /// Let sinusoid components drift in frequency; the drift fraction is
    /// drawn from ±chirp_depth.
    pub chirps: bool,
    pub chirp_depth: f64,
    /// When set, component frequencies snap to this dictionary instead of
    /// being drawn continuously, so independently seeded datasets share
    /// spectral support.
    pub freq_grid: Option<Vec<f64>>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            sample_rate: 16000,
            clip_len: 32000,
            snr_choices: vec![0.0, 5.0, 10.0],
            chirps: true,
            chirp_depth: 0.08,
            freq_grid: None,
        }
    }
}

/// Random mixture of 2-4 sinusoids, peak-normalized to 0.7. Returns the
/// component base frequencies alongside the samples.
fn synth_clean(
    rng: &mut impl Rng,
    sr: u32,
    len: usize,
    chirps: bool,
    chirp_depth: f64,
    freq_grid: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let n_sines = rng.gen_range(2..=4usize);
    let mut freqs = Vec::with_capacity(n_sines);
    let mut parts = Vec::with_capacity(n_sines);
    for _ in 0..n_sines {
        let f0 = match freq_grid {
            Some(grid) => grid[rng.gen_range(0..grid.len())],
            None => rng.gen_range(300.0..0.35 * sr as f64),
        };
        let amp = rng.gen_range(0.4..1.0);
        let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let drift = if chirps {
            rng.gen_range(-chirp_depth..chirp_depth)
        } else {
            0.0
        };
        freqs.push(f0);
        parts.push((f0, amp, phase, drift));
    }
    let mut samples = vec![0.0f64; len];
    for (f0, amp, phase, drift) in parts {
        for (t, s) in samples.iter_mut().enumerate() {
            let tt = t as f64;
            // Instantaneous frequency f0 * (1 + drift * t / len).
            let arg = 2.0 * std::f64::consts::PI * f0 / sr as f64
                * (tt + drift * tt * tt / (2.0 * len as f64))
                + phase;
            *s += amp * arg.sin();
        }
    }
    let peak = samples.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-9);
    for s in &mut samples {
        *s *= 0.7 / peak;
    }
    (samples, freqs)
}

fn synth_noise(rng: &mut impl Rng, kind: &str, sr: u32, len: usize) -> Vec<f64> {
    match kind {
        "white" => (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        "pink" => {
            // Voss-McCartney: sum of 12 rows updated at halving rates.
            const ROWS: usize = 12;
            let mut rows = [0.0f64; ROWS];
            for r in rows.iter_mut() {
                *r = rng.gen_range(-1.0..1.0);
            }
            (0..len)
                .map(|t| {
                    for (k, r) in rows.iter_mut().enumerate() {
                        if t % (1usize << k) == 0 {
                            *r = rng.gen_range(-1.0..1.0);
                        }
                    }
                    rows.iter().sum::<f64>() / ROWS as f64
                })
                .collect()
        }
        _ => {
            // Babble-like: a handful of slowly amplitude-modulated tones
            // over low-passed white noise.
            let voices: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.gen_range(100.0..1000.0),
                        rng.gen_range(1.0..8.0),
                        rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                    )
                })
                .collect();
            let mut lp = 0.0f64;
            (0..len)
                .map(|t| {
                    let tt = t as f64 / sr as f64;
                    let mut s = 0.0;
                    for &(f, am, ph) in &voices {
                        let envelope = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * am * tt).sin();
                        s += envelope * (2.0 * std::f64::consts::PI * f * tt + ph).sin();
                    }
                    lp = 0.9 * lp + 0.1 * rng.gen_range(-1.0..1.0);
                    s / 6.0 + 0.5 * lp
                })
                .collect()
        }
    }
}

const NOISE_KINDS: [&str; 3] = ["white", "pink", "babble"];

/// Generate `n_clips` clean/noisy pairs under `out_dir` and write a
/// `manifest.tsv` recording each pair's SNR and noise family.
pub fn synth_dataset(
    out_dir: &Path,
    n_clips: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<DatasetManifest> {
    if n_clips == 0 {
        return Err(Error::InvalidArgument("n_clips must be >= 1".into()));
    }
    if opts.clip_len < 256 {
        return Err(Error::InvalidArgument(
            "clip_len must be >= 256 for STFT processing".into(),
        ));
    }
    let clean_dir = out_dir.join("clean");
    let noisy_dir = out_dir.join("noisy");
    std::fs::create_dir_all(&clean_dir)?;
    std::fs::create_dir_all(&noisy_dir)?;
    let mut pairs = Vec::with_capacity(n_clips);
    let mut manifest_text = String::from("name\tsnr_db\tnoise\n");
    for i in 0..n_clips {
        let mut rng = substream(seed, &format!("data/clip{i:04}"));
        let (clean_samples, _freqs) = synth_clean(
            &mut rng,
            opts.sample_rate,
            opts.clip_len,
            opts.chirps,
            opts.chirp_depth,
            opts.freq_grid.as_deref(),
        );
        let kind = NOISE_KINDS[rng.gen_range(0..NOISE_KINDS.len())];
        let noise_samples = synth_noise(&mut rng, kind, opts.sample_rate, opts.clip_len);
        let snr = opts.snr_choices[rng.gen_range(0..opts.snr_choices.len())];
        let clean = AudioClip::new(clean_samples, opts.sample_rate);
        let noise = AudioClip::new(noise_samples, opts.sample_rate);
        let noisy = mix_at_snr(&clean, &noise, snr)?;
        let name = format!("clip{i:04}.wav");
        let clean_path = clean_dir.join(&name);
        let noisy_path = noisy_dir.join(&name);
        wav_write(&clean_path, &clean)?;
        wav_write(&noisy_path, &noisy)?;
        manifest_text.push_str(&format!("{name}\t{snr}\t{kind}\n"));
        pairs.push(PairEntry {
            name,
            clean_path,
            noisy_path,
            snr_db: Some(snr),
            noise_kind: Some(kind.to_string()),
        });
    }
    crate::io::wav::atomic_write(&out_dir.join("manifest.tsv"), manifest_text.as_bytes())?;
    Ok(DatasetManifest {
        pairs,
        sample_rate: opts.sample_rate,
        split: "train".into(),
    })
}
