use super::ModelConfig;
use crate::autodiff::nn::Padding;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, BatchNorm1d, Builder, Conv1d, ForwardCtx, LayerNorm, Linear, MaxPool1d, MultiHeadAttention,
    ParamKind, PatchEmbed,
};

/// Pre-norm encoder block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn new(b: &mut Builder<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(EncoderBlock {
                ln1: LayerNorm::new(b, "ln1", cfg.embed_dim),
                attn: MultiHeadAttention::new(b, "attn", cfg.embed_dim, cfg.heads)?,
                ln2: LayerNorm::new(b, "ln2", cfg.embed_dim),
                fc1: Linear::new(b, "fc1", cfg.embed_dim, cfg.mlp_hidden),
                fc2: Linear::new(b, "fc2", cfg.mlp_hidden, cfg.embed_dim),
            })
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu();
        x.add(&self.fc2.forward(&h)?)
    }
}

#[derive(Clone, Debug)]
pub struct VitBranch<T: Scalar> {
    pub patch_embed: PatchEmbed<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub norm: LayerNorm<T>,
    image_size: usize,
}

impl<T: Scalar> VitBranch<T> {
    pub fn new(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        b.scoped("vit", |b| {
            let patch_embed = PatchEmbed::new(b, "patch_embed", cfg.patch, cfg.in_channels, cfg.embed_dim);
            let pos_embed = b.constant("pos_embed", &[cfg.n_tokens(), cfg.embed_dim], 0.0, ParamKind::PosEmbed);
            let blocks = (0..cfg.depth)
                .map(|i| EncoderBlock::new(b, &format!("block{i}"), cfg))
                .collect::<Result<_>>()?;
            Ok(VitBranch {
                patch_embed,
                pos_embed,
                blocks,
                norm: LayerNorm::new(b, "norm", cfg.embed_dim),
                image_size: cfg.image_size,
            })
        })
    }

    /// `img: [B, S, S, C]` (or `[B, S, S]` for one channel) to normalized
    /// tokens `[B, N, D]`.
    pub fn tokens(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = img.shape().to_vec();
        let img = if s.len() == 3 { img.reshape(&[s[0], s[1], s[2], 1])? } else { img.clone() };
        let s = img.shape();
        if s[1] != self.image_size || s[2] != self.image_size {
            return Err(Error::shape("vit_branch", s, &[self.image_size, self.image_size]));
        }
        let mut x = self.patch_embed.forward(&img)?.add(&self.pos_embed)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    /// Token-averaged spectral feature `[B, D]`.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        global_avg_pool(&self.tokens(img)?, 1)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv1d<T>,
    pub bn: BatchNorm1d<T>,
    pub pool: MaxPool1d,
}

#[derive(Clone, Debug)]
pub struct CnnBranch<T: Scalar> {
    pub blocks: Vec<ConvBlock<T>>,
    /// Absent when only the pre-pool sequence is consumed.
    pub fc: Option<Linear<T>>,
    wave_len: usize,
}

impl<T: Scalar> CnnBranch<T> {
    pub fn new(b: &mut Builder<T>, cfg: &ModelConfig, with_fc: bool) -> Self {
        b.scoped("cnn", |b| {
            let mut c_in = 1;
            let blocks = cfg
                .conv_filters
                .iter()
                .enumerate()
                .map(|(i, &c_out)| {
                    let blk = b.scoped(&format!("block{i}"), |b| ConvBlock {
                        conv: Conv1d::new(b, "conv", c_in, c_out, cfg.conv_kernel, cfg.conv_stride, Padding::Same),
                        bn: BatchNorm1d::new(b, "bn", c_out),
                        pool: MaxPool1d {
                            size: cfg.pool,
                            stride: cfg.pool,
                        },
                    });
                    c_in = c_out;
                    blk
                })
                .collect();
            let fc = with_fc.then(|| Linear::new(b, "fc", c_in, cfg.wave_feat));
            CnnBranch {
                blocks,
                fc,
                wave_len: cfg.wave_len,
            }
        })
    }

    /// `wave: [B, L]` to the last block's output `[B, L', C]`.
    pub fn sequence(&self, wave: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let s = wave.shape();
        if s.len() != 2 || s[1] != self.wave_len {
            return Err(Error::shape("cnn_branch", s, &[self.wave_len]));
        }
        let mut x = wave.reshape(&[s[0], s[1], 1])?;
        for blk in &self.blocks {
            x = blk.pool.forward(&blk.bn.forward(&blk.conv.forward(&x)?, ctx)?.relu())?;
        }
        Ok(x)
    }

    /// Time-averaged, projected temporal feature `[B, wave_feat]`.
    pub fn forward(&self, wave: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let fc = self
            .fc
            .as_ref()
            .ok_or_else(|| Error::Config("waveform branch built without its projection".into()))?;
        fc.forward(&global_avg_pool(&self.sequence(wave, ctx)?, 1)?)
    }
}
