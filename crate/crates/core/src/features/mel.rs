//! HTK-scale mel filterbank.

use super::FeatureError;

/// HTK mel scale: `m(f) = 2595·log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// `n_mels × n_bins`, row-major; each row peaks at exactly 1.
    weights: Vec<f64>,
    /// Triangle center frequencies in Hz, strictly increasing.
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }
}

/// Build triangular filters with centers equally spaced on the mel scale
/// between `fmin` and `fmax`, peak-normalized so every row has max 1.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: f64,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank, FeatureError> {
    if !(fmin >= 0.0 && fmin < fmax) {
        return Err(FeatureError::Config(format!(
            "need 0 <= fmin < fmax, got fmin {fmin}, fmax {fmax}"
        )));
    }
    if fmax > sample_rate / 2.0 {
        return Err(FeatureError::Config(format!(
            "fmax {fmax} above Nyquist {}",
            sample_rate / 2.0
        )));
    }
    if n_mels == 0 {
        return Err(FeatureError::Config("n_mels must be positive".into()));
    }

    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, ctr, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * sample_rate / n_fft as f64;
            let rising = (f - lo) / (ctr - lo);
            let falling = (hi - f) / (hi - ctr);
            *w = rising.min(falling).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            for w in row.iter_mut() {
                *w /= peak;
            }
        }
    }

    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_bank() -> MelFilterbank {
        mel_filterbank(80, 1024, 16_000.0, 125.0, 7600.0).unwrap()
    }

    #[test]
    fn htk_closed_form_at_700hz() {
        // m(700) = 2595·log10(2)
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
    }

    #[test]
    fn rows_are_non_negative_with_peak_exactly_one() {
        let fb = default_bank();
        for m in 0..fb.n_mels() {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, 1.0, "row {m} peak {peak}");
        }
    }

    #[test]
    fn centers_strictly_increase_and_invert_back() {
        let fb = default_bank();
        let centers = fb.centers_hz();
        for pair in centers.windows(2) {
            assert!(pair[0] < pair[1]);
        }
        // Independent inversion oracle: centers must sit at equally spaced
        // mel positions between the band edges.
        let mel_lo = hz_to_mel(125.0);
        let mel_hi = hz_to_mel(7600.0);
        for (k, &c) in centers.iter().enumerate() {
            let expected_mel = mel_lo + (mel_hi - mel_lo) * (k + 1) as f64 / 81.0;
            let expected_hz = 700.0 * (10f64.powf(expected_mel / 2595.0) - 1.0);
            assert!(
                (c - expected_hz).abs() < 1e-6 * expected_hz,
                "center {k}: {c} vs {expected_hz}"
            );
        }
    }

    #[test]
    fn invalid_band_edges_are_config_errors() {
        assert!(mel_filterbank(80, 1024, 16_000.0, 4000.0, 400.0).is_err());
        assert!(mel_filterbank(80, 1024, 16_000.0, 125.0, 9000.0).is_err());
        assert!(mel_filterbank(0, 1024, 16_000.0, 125.0, 7600.0).is_err());
    }

    #[test]
    fn mel_hz_round_trip() {
        for f in [125.0, 440.0, 1000.0, 3500.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9 * f);
        }
    }
}
