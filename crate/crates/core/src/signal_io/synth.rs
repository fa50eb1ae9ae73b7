use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{split_by_patient, write_manifest, ManifestEntry};
use super::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::parallel;

pub const SYNTH_RATE: u32 = 2000;
pub const SYNTH_SECONDS: f64 = 5.0;

const S1_BAND: (f64, f64) = (30.0, 45.0);
const S1_DUR: f64 = 0.060;
const S2_BAND: (f64, f64) = (45.0, 70.0);
const S2_DUR: f64 = 0.050;
const S2_AMP: f64 = 0.8;
const GAP: f64 = 0.30;
const GAP_WOBBLE: f64 = 0.03;
const GAP_JITTER: f64 = 0.40;
const RR_WOBBLE: f64 = 0.03;
const MURMUR_RMS: f64 = 0.25;
const MURMUR_TONES: usize = 32;
const SNR_DB: f64 = 20.0;
const PEAK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueMode {
    SpectralOnly,
    TemporalOnly,
    Both,
    Split,
}

impl FromStr for CueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral_only" | "spectral" => Ok(CueMode::SpectralOnly),
            "temporal_only" | "temporal" => Ok(CueMode::TemporalOnly),
            "both" => Ok(CueMode::Both),
            "split" => Ok(CueMode::Split),
            other => Err(Error::Argument(format!(
                "unknown cue mode {other:?} (expected spectral_only, temporal_only, both or split)"
            ))),
        }
    }
}

/// Abnormality cue actually applied to a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cue {
    Spectral,
    Temporal,
    Both,
}

impl Cue {
    pub fn as_str(self) -> &'static str {
        match self {
            Cue::Spectral => "spectral",
            Cue::Temporal => "temporal",
            Cue::Both => "both",
        }
    }

    fn spectral(self) -> bool {
        matches!(self, Cue::Spectral | Cue::Both)
    }

    fn temporal(self) -> bool {
        matches!(self, Cue::Temporal | Cue::Both)
    }
}

impl fmt::Display for Cue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub rng_seed: u64,
    /// Beats per minute.
    pub heart_rate_range: (f64, f64),
    /// Hz.
    pub murmur_band: (f64, f64),
    pub cue_mode: CueMode,
}

impl SynthSpec {
    pub fn new(n_per_class: usize, rng_seed: u64, cue_mode: CueMode) -> Self {
        SynthSpec {
            n_per_class,
            rng_seed,
            heart_rate_range: (60.0, 100.0),
            murmur_band: (150.0, 400.0),
            cue_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.heart_rate_range;
        if !(40.0..=200.0).contains(&lo) || !(40.0..=200.0).contains(&hi) || lo > hi {
            return Err(Error::Parameter(format!(
                "heart_rate_range ({lo}, {hi}) must be an interval inside [40, 200] bpm"
            )));
        }
        let (flo, fhi) = self.murmur_band;
        let nyquist = SYNTH_RATE as f64 / 2.0;
        if !(flo > 0.0 && flo < fhi && fhi < nyquist) {
            return Err(Error::Parameter(format!(
                "murmur_band ({flo}, {fhi}) must be increasing, positive and below {nyquist} Hz"
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Parameter("n_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn n_clips(&self) -> usize {
        2 * self.n_per_class
    }

    /// Even indices are normal, odd indices abnormal.
    pub fn cue_for(&self, index: usize) -> Option<Cue> {
        if index % 2 == 0 {
            return None;
        }
        Some(match self.cue_mode {
            CueMode::SpectralOnly => Cue::Spectral,
            CueMode::TemporalOnly => Cue::Temporal,
            CueMode::Both => Cue::Both,
            CueMode::Split if (index / 2) % 2 == 0 => Cue::Spectral,
            CueMode::Split => Cue::Temporal,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub waveform: Waveform,
    pub label: u8,
    pub cue: Option<Cue>,
}

fn tone_burst(out: &mut [f64], onset: f64, dur: f64, freq: f64, amp: f64, phase: f64) {
    let fs = SYNTH_RATE as f64;
    let center = onset + dur / 2.0;
    let sigma = dur / 6.0;
    let start = (onset * fs).floor().max(0.0) as usize;
    let end = (((onset + dur) * fs).ceil() as usize).min(out.len());
    for (n, v) in out.iter_mut().enumerate().take(end).skip(start) {
        let t = n as f64 / fs;
        let g = (-0.5 * ((t - center) / sigma).powi(2)).exp();
        *v += amp * g * (2.0 * PI * freq * (t - onset) + phase).sin();
    }
}

/// Sum of random in-band sinusoids under a sine taper covering `[from, to)`.
fn band_noise(out: &mut [f64], from: f64, to: f64, band: (f64, f64), rng: &mut ChaCha8Rng) {
    let fs = SYNTH_RATE as f64;
    let start = (from * fs).ceil().max(0.0) as usize;
    let end = ((to * fs).floor() as usize).min(out.len());
    if end <= start + 1 {
        return;
    }
    let tones: Vec<(f64, f64)> = (0..MURMUR_TONES)
        .map(|_| (rng.random_range(band.0..band.1), rng.random_range(0.0..2.0 * PI)))
        .collect();
    // Each unit sinusoid has power 1/2.
    let norm = MURMUR_RMS / (MURMUR_TONES as f64 / 2.0).sqrt();
    let span = (end - start) as f64;
    for n in start..end {
        let t = n as f64 / fs;
        let taper = (PI * (n - start) as f64 / span).sin();
        let s: f64 = tones.iter().map(|&(f, p)| (2.0 * PI * f * t + p).sin()).sum();
        out[n] += norm * taper * s;
    }
}

fn synth_clip(spec: &SynthSpec, index: usize) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);
    let cue = spec.cue_for(index);
    let fs = SYNTH_RATE as f64;
    let n = (SYNTH_SECONDS * fs).round() as usize;
    let mut x = vec![0.0f64; n];

    let bpm = if spec.heart_rate_range.0 < spec.heart_rate_range.1 {
        rng.random_range(spec.heart_rate_range.0..spec.heart_rate_range.1)
    } else {
        spec.heart_rate_range.0
    };
    let rr = 60.0 / bpm;
    let mut onset = rng.random_range(0.0..rr);
    while onset < SYNTH_SECONDS {
        let mut gap = GAP * (1.0 + rng.random_range(-GAP_WOBBLE..GAP_WOBBLE));
        if cue.is_some_and(Cue::temporal) {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            gap *= 1.0 + sign * GAP_JITTER;
        }
        let f1 = rng.random_range(S1_BAND.0..S1_BAND.1);
        let f2 = rng.random_range(S2_BAND.0..S2_BAND.1);
        let a1 = rng.random_range(0.9..1.1);
        let a2 = S2_AMP * rng.random_range(0.9..1.1);
        let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        tone_burst(&mut x, onset, S1_DUR, f1, a1, p1);
        tone_burst(&mut x, onset + gap, S2_DUR, f2, a2, p2);
        if cue.is_some_and(Cue::spectral) {
            band_noise(&mut x, onset + S1_DUR, onset + gap, spec.murmur_band, &mut rng);
        }
        onset += rr * (1.0 + rng.random_range(-RR_WOBBLE..RR_WOBBLE));
    }

    let power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let sd = (power / 10f64.powf(SNR_DB / 10.0)).sqrt();
    if sd > 0.0 {
        let noise = Normal::new(0.0, sd).expect("finite noise level");
        for v in &mut x {
            *v += noise.sample(&mut rng);
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 1.0 };
    let samples = x.iter().map(|v| (v * scale) as f32).collect();
    SynthClip {
        waveform: Waveform::new(samples, SYNTH_RATE).expect("non-empty clip"),
        label: u8::from(cue.is_some()),
        cue,
    }
}

/// Generates `2 * n_per_class` five-second clips at 2000 Hz, alternating
/// normal (even index) and abnormal (odd index). Clip `i` draws from its
/// own stream of a generator seeded by `rng_seed`.
pub fn synthesize_pcg(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    synthesize_pcg_with(spec, parallel::Execution::Sequential)
}

pub fn synthesize_pcg_with(spec: &SynthSpec, exec: parallel::Execution) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    Ok(parallel::map_indexed(exec, spec.n_clips(), |i| synth_clip(spec, i)))
}

/// Writes `clip_XXXXX.wav` files and `manifest.csv` into `dir`; each clip is
/// its own patient and patients are split into train/validation.
pub fn write_synthetic_dataset(
    dir: &Path,
    spec: &SynthSpec,
    val_fraction: f64,
    exec: parallel::Execution,
) -> Result<Vec<ManifestEntry>> {
    let clips = synthesize_pcg_with(spec, exec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.wav");
        write_wav(dir.join(&name), &clip.waveform)?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            label: clip.label,
            patient_id: format!("syn{i:05}"),
            split: None,
            cue: Some(clip.cue.map_or("none", Cue::as_str).to_string()),
        });
    }
    let entries = split_by_patient(&entries, val_fraction, spec.rng_seed)?;
    write_manifest(dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::{power, stft, StftConfig, Window};

    #[test]
    fn counts_and_shapes() {
        let clips = synthesize_pcg(&SynthSpec::new(10, 7, CueMode::Both)).unwrap();
        assert_eq!(clips.len(), 20);
        assert_eq!(clips.iter().filter(|c| c.label == 1).count(), 10);
        for c in &clips {
            assert_eq!((c.waveform.len(), c.waveform.sample_rate), (10000, 2000));
            assert!(c.waveform.samples.iter().all(|v| v.abs() <= 0.9 + 1e-6));
        }
    }

    #[test]
    fn deterministic_and_order_free() {
        let spec = SynthSpec::new(4, 11, CueMode::Split);
        let a = synthesize_pcg(&spec).unwrap();
        let b = synthesize_pcg_with(&spec, parallel::Execution::auto()).unwrap();
        assert_eq!(a, b);
        let bigger = synthesize_pcg(&SynthSpec::new(6, 11, CueMode::Split)).unwrap();
        assert_eq!(a[..], bigger[..8]);
    }

    #[test]
    fn split_mode_alternates() {
        let spec = SynthSpec::new(4, 0, CueMode::Split);
        let cues: Vec<_> = (0..8).map(|i| spec.cue_for(i)).collect();
        use Cue::*;
        assert_eq!(
            cues,
            vec![None, Some(Spectral), None, Some(Temporal), None, Some(Spectral), None, Some(Temporal)]
        );
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::new(1, 0, CueMode::Both);
        s.heart_rate_range = (30.0, 90.0);
        assert!(s.validate().is_err());
        s.heart_rate_range = (60.0, 90.0);
        s.murmur_band = (150.0, 1000.0);
        assert!(s.validate().is_err());
    }

    fn band_energy_db(w: &Waveform, band: (f64, f64)) -> f64 {
        let cfg = StftConfig {
            n_fft: 256,
            hop: 64,
            window: Window::Hann,
        };
        let p = power(&stft(&w.samples, &cfg).unwrap());
        let df = SYNTH_RATE as f64 / cfg.n_fft as f64;
        let e: f64 = p
            .frames
            .iter()
            .flat_map(|f| f.iter().enumerate())
            .filter(|(k, _)| (*k as f64 * df) >= band.0 && (*k as f64 * df) <= band.1)
            .map(|(_, v)| v)
            .sum();
        10.0 * e.log10()
    }

    #[test]
    fn murmur_band_energy_exceeds_normal_by_six_db() {
        let spec = SynthSpec::new(8, 3, CueMode::SpectralOnly);
        let clips = synthesize_pcg(&spec).unwrap();
        let normal: Vec<f64> = clips
            .iter()
            .filter(|c| c.label == 0)
            .map(|c| band_energy_db(&c.waveform, spec.murmur_band))
            .collect();
        let mean_normal = 10.0 * (normal.iter().map(|d| 10f64.powf(d / 10.0)).sum::<f64>() / normal.len() as f64).log10();
        for c in clips.iter().filter(|c| c.label == 1) {
            let db = band_energy_db(&c.waveform, spec.murmur_band);
            assert!(db >= mean_normal + 6.0, "abnormal {db:.2} dB vs normal mean {mean_normal:.2} dB");
        }
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(5, 1, CueMode::Split);
        let entries = write_synthetic_dataset(dir.path(), &spec, 0.2, parallel::Execution::Sequential).unwrap();
        assert_eq!(entries.len(), 10);
        let loaded = super::super::load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, entries);
        assert_eq!(loaded.iter().filter(|e| e.split == Some(super::super::Split::Validation)).count(), 2);
        let w = super::super::read_wav(dir.path().join("clip_00001.wav")).unwrap();
        assert_eq!(w.len(), 10000);
    }
}
