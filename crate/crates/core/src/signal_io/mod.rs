//! Audio ingestion, canonicalization, dataset manifests and synthetic
//! phonocardiograms.

mod manifest;
mod synth;
mod wav;

pub use manifest::{load_manifest, parse_manifest, split_by_patient, write_manifest, ManifestEntry, Split};
pub use synth::{synthesize_pcg, synthesize_pcg_with, write_synthetic_dataset, Cue, CueMode, SynthClip, SynthSpec, SYNTH_RATE, SYNTH_SECONDS};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Canonical model input rate.
pub const CANONICAL_RATE: u32 = 22050;
/// Five seconds at [`CANONICAL_RATE`].
pub const CANONICAL_LEN: usize = 110_250;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Size("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear interpolation onto a `target_rate` grid of
/// `round(len * target / source)` points; positions past the last input
/// sample clamp to it.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Parameter("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = ((w.len() as f64 * target_rate as f64 / w.sample_rate as f64).round() as usize).max(1);
    let last = w.len() - 1;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = pos.floor() as usize;
            if i >= last {
                return w.samples[last];
            }
            let frac = (pos - i as f64) as f32;
            w.samples[i] * (1.0 - frac) + w.samples[i + 1] * frac
        })
        .collect();
    Waveform::new(samples, target_rate)
}

/// Zero-pads at the end or keeps the first `target_len` samples.
pub fn pad_or_truncate(w: &Waveform, target_len: usize) -> Result<Waveform> {
    if target_len == 0 {
        return Err(Error::Parameter("target length must be positive".into()));
    }
    let mut samples = w.samples.clone();
    samples.resize(target_len, 0.0);
    Waveform::new(samples, w.sample_rate)
}

/// Resample then pad/truncate.
pub fn canonicalize(w: &Waveform, rate: u32, len: usize) -> Result<Waveform> {
    pad_or_truncate(&resample(w, rate)?, len)
}
