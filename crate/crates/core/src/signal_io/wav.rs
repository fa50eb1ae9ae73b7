use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Reads a PCM WAV file (16-bit integer or 32-bit float) as mono.
///
/// Integer samples are divided by 2^15; channels are averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let scale = 1.0 / (1u32 << 15) as f32;
            reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{bits}-bit {fmt:?} PCM"),
            })
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptySignal(path.to_path_buf()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    let path = path.to_path_buf();
    match e {
        hound::Error::IoError(source) if source.kind() == std::io::ErrorKind::NotFound => {
            Error::Io { path, source }
        }
        hound::Error::IoError(source) => Error::Format {
            path,
            reason: source.to_string(),
        },
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path,
            reason: "codec not supported".into(),
        },
        other => Error::Format {
            path,
            reason: other.to_string(),
        },
    }
}
