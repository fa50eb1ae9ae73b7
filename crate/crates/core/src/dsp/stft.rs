use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fft::fft_in_place;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 1024,
            hop: 256,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        if signal_len < self.n_fft {
            0
        } else {
            (signal_len - self.n_fft) / self.hop + 1
        }
    }
}

/// One row of `n_fft / 2 + 1` bins per frame.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    pub frames: Vec<Vec<Complex64>>,
    pub config: StftConfig,
}

#[derive(Clone, Debug)]
pub struct PowerSpectrogram {
    pub frames: Vec<Vec<f64>>,
}

impl PowerSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

/// Frame `t` covers samples `[t*hop, t*hop + n_fft)`; no centering.
pub fn stft(samples: &[f32], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if samples.len() < cfg.n_fft {
        return Err(Error::Size(format!(
            "signal of {} samples is shorter than one {}-sample frame",
            samples.len(),
            cfg.n_fft
        )));
    }
    let window = cfg.window.coefficients(cfg.n_fft);
    let n_frames = cfg.n_frames(samples.len());
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex64::default(); cfg.n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(samples[start + i] as f64 * window[i], 0.0);
        }
        fft_in_place(&mut buf)?;
        frames.push(buf[..cfg.n_bins()].to_vec());
    }
    Ok(ComplexSpectrogram {
        frames,
        config: *cfg,
    })
}

pub fn power(spec: &ComplexSpectrogram) -> PowerSpectrogram {
    PowerSpectrogram {
        frames: spec
            .frames
            .iter()
            .map(|f| f.iter().map(|z| z.norm_sqr()).collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_and_short_signal() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(110250), 427);
        assert!(matches!(stft(&[0.0; 100], &cfg), Err(Error::Size(_))));
        let bad = StftConfig { n_fft: 1000, ..cfg };
        assert!(bad.validate().is_err());
        let bad = StftConfig { hop: 2048, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zeros_in_zeros_out() {
        let cfg = StftConfig {
            n_fft: 64,
            hop: 16,
            window: Window::Hann,
        };
        let s = stft(&[0.0; 256], &cfg).unwrap();
        assert_eq!(s.frames.len(), 13);
        assert!(s.frames.iter().flatten().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn power_is_squared_magnitude() {
        let spec = ComplexSpectrogram {
            frames: vec![vec![Complex64::new(3.0, 4.0), Complex64::new(0.0, 0.0)]],
            config: StftConfig {
                n_fft: 2,
                hop: 1,
                window: Window::Rectangular,
            },
        };
        assert_eq!(power(&spec).frames[0], vec![25.0, 0.0]);
    }
}
