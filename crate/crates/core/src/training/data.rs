use crate::autodiff::Tensor;
use crate::dsp::Features;
use crate::error::{Error, Result};

/// Featurized clips held in two flat buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub waves: Vec<f32>,
    pub labels: Vec<u8>,
    pub image_size: usize,
    pub wave_len: usize,
}

impl Dataset {
    pub fn new(features: Vec<Features>, labels: Vec<u8>, image_size: usize, wave_len: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} feature sets for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let px = image_size * image_size;
        let mut images = Vec::with_capacity(features.len() * px);
        let mut waves = Vec::with_capacity(features.len() * wave_len);
        for f in features {
            if f.image.len() != px || f.wave.len() != wave_len {
                return Err(Error::shape("dataset", &[f.image.len(), f.wave.len()], &[px, wave_len]));
            }
            images.extend_from_slice(&f.image);
            waves.extend_from_slice(&f.wave);
        }
        Ok(Dataset {
            images,
            waves,
            labels,
            image_size,
            wave_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `([B, S, S], [B, L], labels)` for the given clip indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<u8>)> {
        let px = self.image_size * self.image_size;
        let mut img = Vec::with_capacity(idx.len() * px);
        let mut wav = Vec::with_capacity(idx.len() * self.wave_len);
        for &i in idx {
            img.extend_from_slice(&self.images[i * px..(i + 1) * px]);
            wav.extend_from_slice(&self.waves[i * self.wave_len..(i + 1) * self.wave_len]);
        }
        Ok((
            Tensor::new(img, &[idx.len(), self.image_size, self.image_size])?,
            Tensor::new(wav, &[idx.len(), self.wave_len])?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let px = self.image_size * self.image_size;
        Dataset {
            images: idx.iter().flat_map(|&i| self.images[i * px..(i + 1) * px].iter().copied()).collect(),
            waves: idx
                .iter()
                .flat_map(|&i| self.waves[i * self.wave_len..(i + 1) * self.wave_len].iter().copied())
                .collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            image_size: self.image_size,
            wave_len: self.wave_len,
        }
    }
}
