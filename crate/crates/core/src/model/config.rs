use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{conv1d_geometry, Padding};
use crate::error::{Error, Result};

/// Which branches are built and how their features meet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "vit")]
    VitOnly,
    #[serde(rename = "cnn")]
    CnnOnly,
    #[serde(rename = "fuse-concat")]
    FuseConcat,
    #[serde(rename = "fuse-film")]
    FuseFilm,
    #[serde(rename = "fuse-xattn")]
    FuseXattn,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::VitOnly, Arch::CnnOnly, Arch::FuseConcat, Arch::FuseFilm, Arch::FuseXattn];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::VitOnly => "vit",
            Arch::CnnOnly => "cnn",
            Arch::FuseConcat => "fuse-concat",
            Arch::FuseFilm => "fuse-film",
            Arch::FuseXattn => "fuse-xattn",
        }
    }

    pub fn uses_vit(self) -> bool {
        self != Arch::CnnOnly
    }

    pub fn uses_cnn(self) -> bool {
        self != Arch::VitOnly
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown arch {s:?} (expected vit, cnn, fuse-concat, fuse-film or fuse-xattn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub image_size: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub wave_len: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub pool: usize,
    pub wave_feat: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// Full-size network: 224 px / 16 px patches, six 192-wide blocks,
    /// conv plan 64-128-256 over 110250 samples.
    pub fn full() -> Self {
        ModelConfig {
            arch: Arch::FuseConcat,
            image_size: 224,
            patch: 16,
            in_channels: 1,
            embed_dim: 192,
            depth: 6,
            heads: 8,
            mlp_hidden: 384,
            wave_len: 110_250,
            conv_filters: vec![64, 128, 256],
            conv_kernel: 16,
            conv_stride: 4,
            pool: 2,
            wave_feat: 64,
            head_hidden: 192,
            head_dropout: 0.5,
        }
    }

    /// Reduced network matching the 2000 Hz desk front-end.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_hidden: 128,
            wave_len: 10_000,
            conv_filters: vec![16, 32, 64],
            wave_feat: 32,
            head_hidden: 64,
            ..ModelConfig::full()
        }
    }

    /// Tiny network for finite-difference checks.
    pub fn mini() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 16,
            embed_dim: 16,
            depth: 1,
            heads: 4,
            mlp_hidden: 32,
            wave_len: 256,
            conv_filters: vec![4, 6, 8],
            conv_kernel: 5,
            conv_stride: 2,
            wave_feat: 8,
            head_hidden: 12,
            ..ModelConfig::full()
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn n_tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Sequence lengths through the waveform branch: input, then conv and
    /// pool output for each block.
    pub fn cnn_trace(&self) -> Result<Vec<usize>> {
        let mut len = self.wave_len;
        let mut trace = vec![len];
        for _ in &self.conv_filters {
            len = conv1d_geometry(len, self.conv_kernel, self.conv_stride, Padding::Same)?.0;
            trace.push(len);
            if len < self.pool {
                return Err(Error::Config(format!(
                    "waveform of {} samples collapses below the pool window",
                    self.wave_len
                )));
            }
            len = (len - self.pool) / self.pool + 1;
            trace.push(len);
        }
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.in_channels == 0 || self.depth == 0 || self.mlp_hidden == 0 || self.head_hidden == 0 || self.wave_feat == 0 {
            return fail("channel counts, depth and widths must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.conv_filters.is_empty() || self.conv_filters.windows(2).any(|w| w[0] >= w[1]) || self.conv_filters[0] == 0 {
            return fail(format!("conv_filters {:?} must be non-empty and strictly increasing", self.conv_filters));
        }
        if self.pool == 0 {
            return fail("pool must be positive".into());
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return fail(format!("head_dropout {} outside [0, 1)", self.head_dropout));
        }
        self.cnn_trace().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_shape_trace() {
        let c = ModelConfig::full();
        assert_eq!(c.n_tokens(), 196);
        assert_eq!(c.cnn_trace().unwrap(), vec![110250, 27563, 13781, 3446, 1723, 431, 215]);
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::mini().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::full();
        c.heads = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full();
        c.conv_filters = vec![64, 64, 256];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::mini();
        c.wave_len = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn arch_names_roundtrip() {
        for a in Arch::ALL {
            assert_eq!(a.as_str().parse::<Arch>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("fuse".parse::<Arch>().is_err());
    }
}
