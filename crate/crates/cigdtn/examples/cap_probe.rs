use cigdtn::dsp::StftConfig;
use cigdtn::evaluation::sdr;
use cigdtn::io::{decode_pairs, synth_dataset, SynthOptions};
use cigdtn::pipeline::spectrogram_roundtrip;

fn main() {
    for (len, win, fft, side) in [
        (8192usize, 500usize, 512usize, 256usize),
        (2048, 500, 512, 256),
        (32000, 500, 512, 256),
        (8192, 128, 128, 64),
        (8192, 500, 512, 128),
    ] {
        let stft_cfg = StftConfig::<f64>::hamming(win, fft).unwrap();
        let opts = SynthOptions {
            sample_rate: 16000,
            clip_len: len,
            snr_choices: vec![5.0],
            chirps: true,
        };
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(dir.path(), 3, 1001, &opts).unwrap();
        let (items, _, _) = decode_pairs::<f64>(&cigdtn::io::load_dir(dir.path()).unwrap(), true).unwrap();
        let caps: Vec<f64> = items
            .iter()
            .map(|it| sdr(&it.clean, &spectrogram_roundtrip(&it.clean, &stft_cfg, side).unwrap()).unwrap())
            .collect();
        println!("len {len} win {win} fft {fft} side {side}: caps {caps:?}");
    }
}
