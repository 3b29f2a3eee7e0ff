//! Minimal RIFF/WAVE reader and writer: PCM-16 and float-32, mono or
//! stereo in (stereo averaged to mono), PCM-16 mono out with clamping.

use std::io::Write;
use std::path::Path;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn le_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::Wav("truncated header".into()))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Wav("truncated header".into()))
}

/// Decode a WAV file into a mono clip with samples in [-1, 1].
pub fn wav_read<T: Scalar>(path: &Path) -> Result<AudioClip<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(Error::Wav(format!(
                "{}: chunk {:?} overruns file",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Wav("fmt chunk too short".into()));
                }
                fmt = Some((
                    le_u16(&bytes, body_start)?,
                    le_u16(&bytes, body_start + 2)?,
                    le_u32(&bytes, body_start + 4)?,
                    le_u16(&bytes, body_start + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Wav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Wav("missing data chunk".into()))?;
    if channels == 0 || channels > 2 {
        return Err(Error::Wav(format!("unsupported channel count {channels}")));
    }
    let ch = channels as usize;
    let frames: Vec<T> = match (format, bits) {
        (1, 16) => {
            if data.len() % (2 * ch) != 0 {
                return Err(Error::Wav("PCM16 data size not frame-aligned".into()));
            }
            data.chunks_exact(2 * ch)
                .map(|frame| {
                    let mut acc = T::zero();
                    for c in 0..ch {
                        let v = i16::from_le_bytes([frame[2 * c], frame[2 * c + 1]]);
                        acc += T::of(v as f64 / 32768.0);
                    }
                    acc / T::of_usize(ch)
                })
                .collect()
        }
        (3, 32) => {
            if data.len() % (4 * ch) != 0 {
                return Err(Error::Wav("float32 data size not frame-aligned".into()));
            }
            data.chunks_exact(4 * ch)
                .map(|frame| {
                    let mut acc = T::zero();
                    for c in 0..ch {
                        let v = f32::from_le_bytes([
                            frame[4 * c],
                            frame[4 * c + 1],
                            frame[4 * c + 2],
                            frame[4 * c + 3],
                        ]);
                        acc += T::of(v as f64);
                    }
                    acc / T::of_usize(ch)
                })
                .collect()
        }
        _ => {
            return Err(Error::Wav(format!(
                "unsupported codec: format {format}, {bits} bits"
            )))
        }
    };
    let clip = AudioClip::new(frames, rate);
    clip.check_finite()?;
    Ok(clip)
}

/// Write a mono PCM-16 WAV, clamping samples to [-1, 1]. The write is
/// atomic: a temp file is renamed into place.
pub fn wav_write<T: Scalar>(path: &Path, clip: &AudioClip<T>) -> Result<()> {
    clip.check_finite()?;
    let n = clip.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let clamped = s.as_f64().clamp(-1.0, 1.0);
        let q = (clamped * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    atomic_write(path, &out)
}

/// Write bytes to `path` via a temp file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
