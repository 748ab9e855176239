//! 16-bit PCM mono RIFF/WAVE reading and writing.

use crate::error::{Error, Result};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;
pub const HEADER_LEN: usize = 44;

#[derive(Clone, Debug, PartialEq)]
pub struct WavClip {
    /// Samples in `[-1, 1)`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_path: String,
}

fn wav_err(msg: impl Into<String>) -> Error {
    Error::Wav(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE byte buffer; only PCM, 16-bit, mono, 16 kHz is accepted.
pub fn decode_wav(bytes: &[u8]) -> Result<WavClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(wav_err("missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err("missing WAVE form type"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                if size < 16 || end.is_none() {
                    return Err(wav_err("truncated fmt chunk"));
                }
                fmt = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (format, channels, rate, bits) = fmt.ok_or_else(|| wav_err("data chunk before fmt chunk"))?;
                if format != 1 {
                    return Err(wav_err(format!("unsupported audio_format {format} (only PCM = 1)")));
                }
                if channels != 1 {
                    return Err(wav_err(format!("unsupported channels {channels} (only mono)")));
                }
                if bits != 16 {
                    return Err(wav_err(format!("unsupported bits_per_sample {bits} (only 16)")));
                }
                if rate != SAMPLE_RATE {
                    return Err(wav_err(format!("unsupported sample_rate {rate} (only {SAMPLE_RATE})")));
                }
                let end = end.ok_or_else(|| wav_err("data chunk size exceeds file length"))?;
                if size % 2 != 0 {
                    return Err(wav_err("data chunk size is not a whole number of samples"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(WavClip {
                    samples,
                    sample_rate: rate,
                    source_path: String::new(),
                });
            }
            _ => {}
        }
        // chunks are padded to even sizes
        pos = body + size + (size & 1);
    }
    Err(wav_err("no data chunk"))
}

/// Float to int16: scale by 32768, round half away from zero, clamp.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(wav_err("cannot write non-finite samples"));
    }
    let data_len = u32::try_from(samples.len() * 2).map_err(|_| wav_err("clip too long for a RIFF file"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    Ok(out)
}

pub fn read_wav(path: &Path) -> Result<WavClip> {
    let bytes = std::fs::read(path)?;
    let mut clip = decode_wav(&bytes).map_err(|e| match e {
        Error::Wav(m) => wav_err(format!("{}: {m}", path.display())),
        other => other,
    })?;
    clip.source_path = path.display().to_string();
    Ok(clip)
}

pub fn write_wav(path: &Path, clip: &WavClip) -> Result<()> {
    std::fs::write(path, encode_wav(&clip.samples, clip.sample_rate)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ramp_round_trip() {
        let ramp: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 1000.0).collect();
        let back = decode_wav(&encode_wav(&ramp, SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(back.samples.len(), 1000);
        let err = ramp.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1.0 / 32768.0);
    }

    #[test]
    fn quantization_rounds_half_away_and_clamps() {
        assert_eq!(quantize(0.5 / 32768.0), 1);
        assert_eq!(quantize(-0.5 / 32768.0), -1);
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(-1.0), -32768);
        assert_eq!(quantize(-3.0), -32768);
    }

    fn patched(offset: usize, value: &[u8]) -> Vec<u8> {
        let mut b = encode_wav(&[0.1, 0.2], SAMPLE_RATE).unwrap();
        b[offset..offset + value.len()].copy_from_slice(value);
        b
    }

    #[test]
    fn rejections_name_the_field() {
        let cases: [(Vec<u8>, &str); 6] = [
            (patched(0, b"RIFX"), "RIFF"),
            (patched(8, b"WAVX"), "WAVE"),
            (patched(22, &2u16.to_le_bytes()), "channels"),
            (patched(34, &24u16.to_le_bytes()), "bits_per_sample"),
            (patched(24, &44100u32.to_le_bytes()), "sample_rate"),
            (patched(20, &3u16.to_le_bytes()), "audio_format"),
        ];
        for (bytes, field) in cases {
            let msg = decode_wav(&bytes).unwrap_err().to_string();
            assert!(msg.contains(field), "{msg}");
        }
        assert!(decode_wav(&encode_wav(&[0.1], SAMPLE_RATE).unwrap()[..40]).is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = encode_wav(&[0.25, -0.25], SAMPLE_RATE).unwrap();
        let mut b = plain[..36].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&plain[36..]);
        assert_eq!(decode_wav(&b).unwrap().samples, vec![0.25, -0.25]);
    }

    proptest! {
        #[test]
        fn round_trip_error_is_one_step(xs in proptest::collection::vec(-1.0f64..1.0, 1..300)) {
            let back = decode_wav(&encode_wav(&xs, SAMPLE_RATE).unwrap()).unwrap().samples;
            for (a, b) in xs.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
