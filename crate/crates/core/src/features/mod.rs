//! Log-mel feature front end.
//!
//! One-second 16 kHz mono clips become fixed 80×64 [`FeatureGrid`]s: STFT
//! magnitudes (1024-point FFT, hop 256, periodic Hann) are projected onto an
//! 80-band HTK mel filterbank spanning 125–7600 Hz, compressed to dB, clamped
//! to [−100, 20] dB and scaled linearly into [0, 1]. Every stage is a pure
//! function of its inputs.

mod mel;
mod stft;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use stft::{stft, HOP, N_FFT};
pub use wav::{load_wav, write_wav_pcm16, Waveform, SAMPLE_RATE};

use thiserror::Error;

/// Mel bands per feature grid (rows).
pub const MELS: usize = 80;
/// Frames per feature grid (columns).
pub const FRAMES: usize = 64;
/// Samples in a nominal 1-second clip.
pub const CLIP_SAMPLES: usize = 16_000;

const DB_FLOOR: f64 = -100.0;
const DB_CEIL: f64 = 20.0;
const MEL_FMIN: f64 = 125.0;
const MEL_FMAX: f64 = 7600.0;

/// Errors from the feature pipeline.
#[derive(Debug, Error)]
pub enum FeatureError {
    /// A WAV header field had the wrong value. Displays as
    /// `"<field> <got> != <want>"`.
    #[error("{field} {got} != {want}")]
    Format {
        field: &'static str,
        got: String,
        want: String,
    },
    /// The file could not be parsed as RIFF/WAVE at all.
    #[error("wav parse error: {0}")]
    Parse(String),
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Invalid filterbank band edges.
    #[error("mel filterbank config error: {0}")]
    Config(String),
    /// A value escaped the [0, 1] contract of a feature grid.
    #[error("feature grid value out of range: {0}")]
    OutOfRange(f64),
    /// Grid constructed with the wrong number of values.
    #[error("feature grid needs {want} values, got {got}")]
    BadLength { want: usize, got: usize },
}

/// Normalized log-mel spectrogram: exactly [`MELS`]×[`FRAMES`] values in
/// [0, 1], mel-major row order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Vec<f64>,
}

impl FeatureGrid {
    /// Wrap raw values, enforcing the shape and range invariants.
    pub fn from_values(values: Vec<f64>) -> Result<Self, FeatureError> {
        if values.len() != MELS * FRAMES {
            return Err(FeatureError::BadLength {
                want: MELS * FRAMES,
                got: values.len(),
            });
        }
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(FeatureError::OutOfRange(v));
            }
        }
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; MELS * FRAMES],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * FRAMES + frame]
    }

    /// 80 rows × 64 comma-separated columns, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(MELS * FRAMES * 18);
        for m in 0..MELS {
            for t in 0..FRAMES {
                if t > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{:.8e}", self.get(m, t)));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the CSV form written by [`FeatureGrid::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, FeatureError> {
        let mut values = Vec::with_capacity(MELS * FRAMES);
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            for cell in line.split(',') {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|e| FeatureError::Parse(format!("bad csv cell {cell:?}: {e}")))?;
                values.push(v);
            }
        }
        Self::from_values(values)
    }
}

/// Full front end: pad/trim to one second, STFT, mel projection, dB
/// compression, and normalization into an 80×64 grid. Frames beyond the
/// signal are left at 0 (the −100 dB floor).
pub fn log_mel(w: &Waveform) -> FeatureGrid {
    let mut samples = w.samples().to_vec();
    samples.resize(CLIP_SAMPLES, 0.0);

    let frames = stft(&samples);
    let fb = mel_filterbank(MELS, N_FFT, SAMPLE_RATE as f64, MEL_FMIN, MEL_FMAX)
        .expect("built-in filterbank parameters are valid");

    let mut grid = vec![0.0; MELS * FRAMES];
    for (t, frame) in frames.iter().enumerate().take(FRAMES) {
        for m in 0..MELS {
            let row = fb.row(m);
            let energy: f64 = row.iter().zip(frame).map(|(w, x)| w * x).sum();
            let db = (20.0 * (energy + 1e-5).log10()).clamp(DB_FLOOR, DB_CEIL);
            grid[m * FRAMES + t] = (db - DB_FLOOR) / (DB_CEIL - DB_FLOOR);
        }
    }
    FeatureGrid { values: grid }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silence() -> Waveform {
        Waveform::new(vec![0.0; CLIP_SAMPLES]).unwrap()
    }

    #[test]
    fn log_mel_shape_is_fixed_for_any_length() {
        for n in [100, 8000, CLIP_SAMPLES, 20_000] {
            let w = Waveform::new(vec![0.0; n]).unwrap();
            let g = log_mel(&w);
            assert_eq!(g.values().len(), MELS * FRAMES);
        }
    }

    #[test]
    fn silence_maps_to_all_zero() {
        let g = log_mel(&silence());
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_stays_strictly_inside_unit_interval() {
        let mut rng = crate::rng::SeededRng::new(77);
        let samples: Vec<f64> = (0..CLIP_SAMPLES)
            .map(|_| rng.uniform_in(-1.0, 1.0))
            .collect();
        let w = Waveform::new(samples).unwrap();
        let g = log_mel(&w);
        // Every populated frame is strictly above the dB floor; padded frames
        // (59..64) remain exactly 0.
        for m in 0..MELS {
            for t in 0..59 {
                let v = g.get(m, t);
                assert!(v > 0.0 && v <= 1.0, "cell ({m},{t}) = {v}");
            }
            for t in 59..FRAMES {
                assert_eq!(g.get(m, t), 0.0);
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = crate::rng::SeededRng::new(5);
        let samples: Vec<f64> = (0..CLIP_SAMPLES)
            .map(|_| rng.uniform_in(-0.8, 0.8))
            .collect();
        let w = Waveform::new(samples).unwrap();
        let a = log_mel(&w);
        let b = log_mel(&w);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = crate::rng::SeededRng::new(13);
        let vals: Vec<f64> = (0..MELS * FRAMES).map(|_| rng.uniform()).collect();
        let g = FeatureGrid::from_values(vals).unwrap();
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), MELS);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), FRAMES);
        let back = FeatureGrid::from_csv(&csv).unwrap();
        // 9 significant digits survive well below any tolerance we use.
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_rejects_out_of_range_values() {
        let mut vals = vec![0.5; MELS * FRAMES];
        vals[7] = 1.5;
        assert!(matches!(
            FeatureGrid::from_values(vals),
            Err(FeatureError::OutOfRange(_))
        ));
    }
}
