//! Spectral front-end: FFT, STFT, Mel filterbank and the normalized
//! log-Mel image fed to the spectral branch.

pub mod fft;
pub mod image;
pub mod mel;
pub mod stft;

pub use fft::{fft, fft_in_place};
pub use image::{log_mel_image, read_spectrogram, resize_bilinear, write_spectrogram, LogMelSpectrogram};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use stft::{power, stft, ComplexSpectrogram, PowerSpectrogram, StftConfig, Window};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::signal_io::{canonicalize, Waveform, CANONICAL_LEN, CANONICAL_RATE};

/// Everything between a decoded recording and the two model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub wave_len: usize,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub image_size: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig::full()
    }
}

impl FrontendConfig {
    /// 22050 Hz, 5 s, 1024/256 Hann STFT, 128 bands over 20-2000 Hz, 224 px.
    pub fn full() -> Self {
        FrontendConfig {
            sample_rate: CANONICAL_RATE,
            wave_len: CANONICAL_LEN,
            stft: StftConfig::default(),
            n_mels: 128,
            fmin: 20.0,
            fmax: 2000.0,
            image_size: 224,
        }
    }

    /// Reduced front-end working at the synthetic generator's native 2000 Hz.
    pub fn desk() -> Self {
        FrontendConfig {
            sample_rate: 2000,
            wave_len: 10_000,
            stft: StftConfig {
                n_fft: 256,
                hop: 64,
                window: Window::Hann,
            },
            n_mels: 64,
            fmin: 20.0,
            fmax: 1000.0,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.wave_len < self.stft.n_fft {
            return Err(Error::Config(format!(
                "wave_len {} shorter than one STFT frame ({})",
                self.wave_len, self.stft.n_fft
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }
}

/// One featurized clip: `image` is `image_size^2` row-major, `wave` is the
/// canonical waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub image: Vec<f32>,
    pub wave: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Featurizer {
    pub config: FrontendConfig,
    filterbank: MelFilterbank,
}

impl Featurizer {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = mel_filterbank(
            config.sample_rate,
            config.stft.n_fft,
            config.n_mels,
            config.fmin,
            config.fmax,
        )?;
        Ok(Featurizer { config, filterbank })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Image of an already canonical signal.
    pub fn spectrogram(&self, samples: &[f32]) -> Result<LogMelSpectrogram> {
        let p = power(&stft(samples, &self.config.stft)?);
        log_mel_image(&p, &self.filterbank, self.config.image_size)
    }

    pub fn featurize(&self, w: &Waveform) -> Result<Features> {
        let c = canonicalize(w, self.config.sample_rate, self.config.wave_len)?;
        let image = self.spectrogram(&c.samples)?.image;
        Ok(Features {
            image,
            wave: c.samples,
        })
    }

    /// Featurizes clips on up to `workers` threads; output order follows input.
    pub fn featurize_all(&self, clips: &[Waveform], workers: usize) -> Result<Vec<Features>> {
        parallel::map_indexed_bounded(workers, clips.len(), |i| self.featurize(&clips[i]))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frontend_shapes() {
        let f = Featurizer::new(FrontendConfig::full()).unwrap();
        let w = Waveform::new((0..30000).map(|i| ((i as f32) * 0.01).sin()).collect(), 8000).unwrap();
        let x = f.featurize(&w).unwrap();
        assert_eq!(x.wave.len(), CANONICAL_LEN);
        assert_eq!(x.image.len(), 224 * 224);
        assert!(x.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn desk_frontend_shapes_and_workers() {
        let f = Featurizer::new(FrontendConfig::desk()).unwrap();
        let clips: Vec<_> = (0..3)
            .map(|k| Waveform::new((0..10000).map(|i| ((i * (k + 1)) as f32 * 0.05).sin()).collect(), 2000).unwrap())
            .collect();
        let a = f.featurize_all(&clips, 1).unwrap();
        let b = f.featurize_all(&clips, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].image.len(), 64 * 64);
    }
}
