use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, row-major `n_mels x n_bins`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Triangles with vertices equally spaced on the Mel axis between `fmin`
/// and `fmax`, evaluated at the FFT bin frequencies.
///
/// Each row is scaled so its largest weight is exactly 1.0. A filter too
/// narrow to contain any bin gets weight 1.0 on the bin nearest its center,
/// so every row has one non-empty contiguous support.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0..fmax).contains(&fmin) || fmax > nyquist {
        return Err(Error::Parameter(format!(
            "mel range [{fmin}, {fmax}] Hz must satisfy 0 <= fmin < fmax <= {nyquist}"
        )));
    }
    if n_mels < 2 {
        return Err(Error::Parameter(format!("n_mels = {n_mels}, need at least 2")));
    }
    if n_fft < 2 {
        return Err(Error::Parameter(format!("n_fft = {n_fft} too small")));
    }
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            row.iter_mut().for_each(|w| *w /= peak);
        } else {
            let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
            row[k] = 1.0;
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        fmin,
        fmax,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_anchor_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    fn check_structure(fb: &MelFilterbank) {
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let support: Vec<usize> = (0..fb.n_bins).filter(|&k| row[k] > 0.0).collect();
            assert!(!support.is_empty(), "filter {m} is empty");
            assert_eq!(support.last().unwrap() - support[0] + 1, support.len(), "filter {m}");
            assert_eq!(row.iter().cloned().fold(0.0, f64::max), 1.0);
        }
        assert!(fb.centers_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn default_filterbank_structure_and_coverage() {
        let fb = mel_filterbank(22050, 1024, 128, 20.0, 2000.0).unwrap();
        check_structure(&fb);
        let bin_hz = 22050.0 / 1024.0;
        let first = fb.centers_hz[0];
        let last = *fb.centers_hz.last().unwrap();
        for k in 0..fb.n_bins {
            let f = k as f64 * bin_hz;
            if f >= first && f <= last {
                let total: f64 = (0..fb.n_mels).map(|m| fb.row(m)[k]).sum();
                assert!(total > 0.0, "hole at bin {k} ({f} Hz)");
            }
        }
    }

    #[test]
    fn wide_filters_peak_on_grid() {
        let fb = mel_filterbank(2000, 256, 32, 20.0, 1000.0).unwrap();
        check_structure(&fb);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(mel_filterbank(22050, 1024, 128, 2000.0, 20.0).is_err());
        assert!(mel_filterbank(22050, 1024, 128, 20.0, 20000.0).is_err());
        assert!(mel_filterbank(22050, 1024, 1, 20.0, 2000.0).is_err());
    }
}
