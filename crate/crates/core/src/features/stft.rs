//! Short-time Fourier magnitudes: 1024-point frames, hop 256, periodic Hann.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// FFT length per analysis frame.
pub const N_FFT: usize = 1024;
/// Hop between frame starts, in samples.
pub const HOP: usize = 256;
/// One-sided spectrum size.
pub const BINS: usize = N_FFT / 2 + 1;

/// Periodic Hann window of length [`N_FFT`].
fn hann() -> Vec<f64> {
    (0..N_FFT)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / N_FFT as f64).cos())
        .collect()
}

/// Magnitudes of the one-sided spectrum for every frame.
///
/// Frame count is `floor((len − N_FFT)/HOP) + 1`; signals shorter than one
/// frame are zero-padded to one second first. Returns one `BINS`-long
/// magnitude vector per frame.
pub fn stft(samples: &[f64]) -> Vec<Vec<f64>> {
    let padded;
    let samples = if samples.len() < N_FFT {
        padded = {
            let mut v = samples.to_vec();
            v.resize(super::CLIP_SAMPLES, 0.0);
            v
        };
        &padded[..]
    } else {
        samples
    };

    let n_frames = (samples.len() - N_FFT) / HOP + 1;
    let window = hann();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(N_FFT);

    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..n_frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..BINS].iter().map(|c| c.norm()).collect());
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Direct O(n²) DFT magnitude of one windowed frame.
    fn naive_dft_magnitudes(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        let mut mags = Vec::with_capacity(BINS);
        for k in 0..BINS {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, &x) in frame.iter().enumerate() {
                let phase = -std::f64::consts::TAU * (k * t) as f64 / n as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            mags.push((re * re + im * im).sqrt());
        }
        mags
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let frames = stft(&vec![0.0; 16_000]);
        assert_eq!(frames.len(), 59);
        for frame in &frames {
            assert!(frame.iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn frame_count_arithmetic() {
        assert_eq!(stft(&vec![0.0; 16_000]).len(), (16_000 - 1024) / 256 + 1);
        assert_eq!(stft(&vec![0.0; 1024]).len(), 1);
        // Shorter than one frame: zero-padded to a full second first.
        assert_eq!(stft(&vec![0.0; 100]).len(), 59);
    }

    #[test]
    fn sine_at_1khz_peaks_at_bin_64() {
        // 1000 Hz at 16 kHz with a 1024-point FFT lands exactly on bin
        // 1000/16000·1024 = 64.
        let samples: Vec<f64> = (0..16_000)
            .map(|n| (std::f64::consts::TAU * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        for frame in stft(&samples) {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 64);
        }
    }

    #[test]
    fn matches_naive_dft_oracle() {
        let mut rng = SeededRng::new(99);
        let samples: Vec<f64> = (0..N_FFT).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let fast = &stft(&samples)[0];

        let window = hann();
        let windowed: Vec<f64> = samples.iter().zip(&window).map(|(s, w)| s * w).collect();
        let slow = naive_dft_magnitudes(&windowed);

        let scale = slow.iter().cloned().fold(0.0, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-6 * scale.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn magnitudes_scale_linearly_with_amplitude() {
        let mut rng = SeededRng::new(3);
        let samples: Vec<f64> = (0..4096).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let alpha = 0.37;
        let scaled: Vec<f64> = samples.iter().map(|s| alpha * s).collect();
        let base = stft(&samples);
        let scaled_frames = stft(&scaled);
        for (fa, fb) in base.iter().zip(&scaled_frames) {
            for (a, b) in fa.iter().zip(fb) {
                assert!((alpha * a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
        }
    }
}
