//! Scratch experiment for sizing the overfit smoke test: trains the toy
//! model on a few synthetic clips and prints loss curves and SDRs.

use cigdtn::dsp::StftConfig;
use cigdtn::evaluation::{evaluate, sdr};
use cigdtn::io::{decode_pairs, synth_dataset, SynthOptions};
use cigdtn::model::{ModelConfig, ModelParams};
use cigdtn::pipeline::spectrogram_roundtrip;
use cigdtn::training::{prepare_item, train, AdamWConfig, TrainConfig, TrainItem};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let clip_len: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32000);
    let win: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(125);
    let blend: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let fft: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(510);
    let side: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(256);
    let hidden: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(16);
    let heads: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(2);
    let chirp_depth: f64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(0.08);

    let stft_cfg = StftConfig::<f64>::hamming(win, fft).unwrap();
    let grid: Vec<f64> = (0..6).map(|k| 500.0 + 550.0 * k as f64).collect();
    let opts = SynthOptions {
        sample_rate: 16000,
        clip_len,
        snr_choices: vec![5.0],
        chirps: chirp_depth > 0.0,
        chirp_depth,
        freq_grid: if chirp_depth > 0.0 { None } else { Some(grid) },
    };
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let held_dir = dir.path().join("held");
    synth_dataset(&train_dir, 4, 1001, &opts).unwrap();
    synth_dataset(&held_dir, 4, 2002, &opts).unwrap();
    let (train_items_raw, _, _) =
        decode_pairs::<f64>(&cigdtn::io::load_dir(&train_dir).unwrap(), true).unwrap();
    let (held_items, _, _) =
        decode_pairs::<f64>(&cigdtn::io::load_dir(&held_dir).unwrap(), true).unwrap();

    // Ceiling: resize round trip on the clean clips.
    for item in &train_items_raw {
        let rt = spectrogram_roundtrip(&item.clean, &stft_cfg, side).unwrap();
        let cap = sdr(&item.clean, &rt).unwrap();
        let input_snr = sdr(&item.clean, &item.noisy).unwrap();
        println!("{}: input SNR {input_snr:.2} dB, resize-roundtrip cap {cap:.2} dB", item.name);
    }

    let items: Vec<TrainItem<f64>> = train_items_raw
        .iter()
        .map(|it| prepare_item(&it.name, it.clean.clone(), it.noisy.clone(), &stft_cfg, side).unwrap())
        .collect();

    let mut mc = ModelConfig::toy();
    mc.image_side = side;
    mc.patch_size = 16;
    mc.hidden_dim = hidden;
    mc.heads = heads;
    mc.cond_dim = hidden;
    let params = ModelParams::<f64>::init(mc, 77).unwrap();
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            learning_rate: lr,
            ..AdamWConfig::default()
        },
        batch_size: 4,
        epochs,
        grad_clip: Some(1.0),
        loss_blend: blend,
        seed: 7,
    };
    let t0 = std::time::Instant::now();
    let out = train(params, &items, &cfg).unwrap();
    println!(
        "trained {} steps in {:.1}s (lr {lr}, blend {blend})",
        out.trace.len(),
        t0.elapsed().as_secs_f64()
    );
    let first = out.trace.first().unwrap().loss.total;
    let last = out.trace.last().unwrap().loss.total;
    println!("loss: first {first:.5} -> last {last:.5} (ratio {:.4})", last / first);
    for k in [0, 10, 20, 30, 40, 50, 75, 100, 150, 200, 250, 299] {
        if let Some(s) = out.trace.get(k) {
            println!("  step {k}: total {:.5} image {:.5} recon {:.5}", s.loss.total, s.loss.image_total, s.loss.recon_l1);
        }
    }

    let report = evaluate(&out.params, &stft_cfg, &train_items_raw, "probe").unwrap();
    println!("train-set SDRs:");
    for (name, s) in &report.per_clip {
        println!("  {name}: {s:.2} dB");
    }
    println!("train mean {:.2} dB", report.mean_sdr);

    let held_report = evaluate(&out.params, &stft_cfg, &held_items, "probe").unwrap();
    println!("held-out SDRs:");
    for (name, s) in &held_report.per_clip {
        println!("  {name}: {s:.2} dB");
    }
    println!("held-out mean {:.2} dB", held_report.mean_sdr);
}
