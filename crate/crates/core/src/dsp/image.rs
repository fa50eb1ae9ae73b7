use std::io::{Read, Write};

use super::mel::MelFilterbank;
use super::stft::PowerSpectrogram;
use crate::autodiff::serialize::{read_u32, write_u32};
use crate::error::{Error, Result};

pub const LOG_EPSILON: f64 = 1e-6;
pub const SPECTROGRAM_MAGIC: &[u8; 4] = b"AFSP";
pub const SPECTROGRAM_VERSION: u32 = 1;

/// Min-max normalized log-Mel image; frequency on rows (row 0 is the
/// lowest band), time on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub image: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    /// Log-power range mapped onto [0, 1].
    pub min: f64,
    pub max: f64,
}

/// Align-corners bilinear resize of a row-major `rows x cols` matrix.
pub fn resize_bilinear(
    src: &[f64],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), rows * cols);
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let (r0, r1, fy) = coord(i, out_rows, rows);
        for j in 0..out_cols {
            let (c0, c1, fx) = coord(j, out_cols, cols);
            let top = src[r0 * cols + c0] * (1.0 - fx) + src[r0 * cols + c1] * fx;
            let bottom = src[r1 * cols + c0] * (1.0 - fx) + src[r1 * cols + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Mel projection, `ln(mel + 1e-6)`, resize to `size x size` and per-example
/// min-max normalization (a constant image becomes all zeros).
pub fn log_mel_image(p: &PowerSpectrogram, fb: &MelFilterbank, size: usize) -> Result<LogMelSpectrogram> {
    if p.n_bins() != fb.n_bins {
        return Err(Error::shape(
            "log_mel_image",
            &[p.n_frames(), p.n_bins()],
            &[fb.n_mels, fb.n_bins],
        ));
    }
    if p.n_frames() == 0 || size == 0 {
        return Err(Error::Size("log_mel_image needs at least one frame".into()));
    }
    let (n_mels, n_frames) = (fb.n_mels, p.n_frames());
    let mut logmel = vec![0.0; n_mels * n_frames];
    for (t, frame) in p.frames.iter().enumerate() {
        for m in 0..n_mels {
            let e: f64 = fb.row(m).iter().zip(frame).map(|(w, v)| w * v).sum();
            logmel[m * n_frames + t] = (e + LOG_EPSILON).ln();
        }
    }
    let resized = resize_bilinear(&logmel, n_mels, n_frames, size, size);
    let min = resized.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = resized.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let image = resized
        .iter()
        .map(|&v| if range > 0.0 { ((v - min) / range) as f32 } else { 0.0 })
        .collect();
    Ok(LogMelSpectrogram {
        image,
        rows: size,
        cols: size,
        min,
        max,
    })
}

/// `"AFSP" | version u32 | rows u32 | cols u32 | f32 payload`, little-endian.
pub fn write_spectrogram(w: &mut impl Write, s: &LogMelSpectrogram) -> std::io::Result<()> {
    w.write_all(SPECTROGRAM_MAGIC)?;
    write_u32(w, SPECTROGRAM_VERSION)?;
    write_u32(w, s.rows as u32)?;
    write_u32(w, s.cols as u32)?;
    let mut buf = Vec::with_capacity(s.image.len() * 4);
    for v in &s.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a cached image. The normalization range is not stored and comes
/// back as `[0, 1]`.
pub fn read_spectrogram(r: &mut impl Read) -> Result<LogMelSpectrogram> {
    let err = |e: std::io::Error| Error::Load(format!("spectrogram cache: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != SPECTROGRAM_MAGIC {
        return Err(Error::Load(format!("bad magic {magic:?}, expected AFSP")));
    }
    let version = read_u32(r).map_err(err)?;
    if version != SPECTROGRAM_VERSION {
        return Err(Error::Load(format!("unsupported spectrogram version {version}")));
    }
    let rows = read_u32(r).map_err(err)? as usize;
    let cols = read_u32(r).map_err(err)? as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes).map_err(err)?;
    let image = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(LogMelSpectrogram {
        image,
        rows,
        cols,
        min: 0.0,
        max: 1.0,
    })
}
