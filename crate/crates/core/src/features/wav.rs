//! RIFF/WAVE ingestion, restricted to the corpus format: PCM 16-bit, mono,
//! 16 kHz. Anything else is rejected with the offending header field named.

use std::io::Write;
use std::path::Path;

use super::FeatureError;

/// Required sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono 16 kHz waveform with samples in [−1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self, FeatureError> {
        for &s in &samples {
            if !(-1.0..=1.0).contains(&s) {
                return Err(FeatureError::Parse(format!(
                    "sample {s} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn read_u16(buf: &[u8], at: usize) -> Result<u16, FeatureError> {
    buf.get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| FeatureError::Parse("truncated header".into()))
}

fn read_u32(buf: &[u8], at: usize) -> Result<u32, FeatureError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FeatureError::Parse("truncated header".into()))
}

/// Load a PCM16 mono 16 kHz WAV file. Integer samples are scaled by
/// 1/32768, so full-scale negative maps to −1.0.
pub fn load_wav(path: &Path) -> Result<Waveform, FeatureError> {
    let bytes = std::fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

/// Decode WAV bytes; see [`load_wav`].
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, FeatureError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(FeatureError::Parse("not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(bytes, at + 4)? as usize;
        let body_start = at + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| FeatureError::Parse("chunk size overflow".into()))?;
        if body_end > bytes.len() {
            return Err(FeatureError::Parse(format!(
                "chunk {:?} of {} bytes overruns file",
                String::from_utf8_lossy(id),
                size
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(FeatureError::Parse("fmt chunk too short".into()));
                }
                let audio_format = read_u16(bytes, body_start)?;
                let channels = read_u16(bytes, body_start + 2)?;
                let sample_rate = read_u32(bytes, body_start + 4)?;
                let bits = read_u16(bytes, body_start + 14)?;
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunk bodies are padded to even length.
        at = body_end + (size & 1);
    }

    let (audio_format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| FeatureError::Parse("missing fmt chunk".into()))?;
    if audio_format != 1 {
        return Err(FeatureError::Format {
            field: "audio_format",
            got: audio_format.to_string(),
            want: "1".into(),
        });
    }
    if channels != 1 {
        return Err(FeatureError::Format {
            field: "channels",
            got: channels.to_string(),
            want: "1".into(),
        });
    }
    if sample_rate != SAMPLE_RATE {
        return Err(FeatureError::Format {
            field: "sample_rate",
            got: sample_rate.to_string(),
            want: SAMPLE_RATE.to_string(),
        });
    }
    if bits != 16 {
        return Err(FeatureError::Format {
            field: "bits_per_sample",
            got: bits.to_string(),
            want: "16".into(),
        });
    }

    let data = data.ok_or_else(|| FeatureError::Parse("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(FeatureError::Parse("odd data chunk length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform { samples })
}

/// Write a PCM16 mono 16 kHz WAV file.
pub fn write_wav_pcm16(path: &Path, samples: &[i16]) -> std::io::Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn wav_bytes(sample_rate: u32, channels: u16, bits: u16, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&sample_rate.to_le_bytes());
        out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn sample_scaling_definition() {
        let bytes = wav_bytes(16_000, 1, 16, &[16_384, -32_768]);
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.samples()[0], 0.5);
        assert_eq!(w.samples()[1], -1.0);
    }

    #[test]
    fn write_then_read_round_trip_is_lossless() {
        let mut rng = SeededRng::new(21);
        let samples: Vec<i16> = (0..2048).map(|_| rng.next_u64() as i16).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        write_wav_pcm16(&path, &samples).unwrap();
        let w = load_wav(&path).unwrap();
        let back: Vec<i16> = w
            .samples()
            .iter()
            .map(|&s| (s * 32768.0).round() as i16)
            .collect();
        assert_eq!(back, samples);
    }

    #[test]
    fn wrong_sample_rate_names_the_field() {
        let bytes = wav_bytes(8_000, 1, 16, &[0; 16]);
        let err = decode_wav(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "sample_rate 8000 != 16000");
    }

    #[test]
    fn wrong_channel_count_names_the_field() {
        let bytes = wav_bytes(16_000, 2, 16, &[0; 16]);
        let err = decode_wav(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "channels 2 != 1");
    }

    #[test]
    fn wrong_bit_depth_names_the_field() {
        let bytes = wav_bytes(16_000, 1, 8, &[0; 16]);
        let err = decode_wav(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bits_per_sample 8 != 16");
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let mut bytes = wav_bytes(16_000, 1, 16, &[0; 16]);
        bytes.truncate(30);
        assert!(matches!(
            decode_wav(&bytes),
            Err(FeatureError::Parse(_))
        ));
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(
            decode_wav(b"not a wav"),
            Err(FeatureError::Parse(_))
        ));
    }
}
