//! Spectral transformer branch, waveform CNN branch, fusion heads and
//! single-branch baselines.

mod branches;
mod checkpoint;
mod config;

pub use branches::{CnnBranch, ConvBlock, EncoderBlock, VitBranch};
pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use config::{Arch, ModelConfig};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::layers::{global_avg_pool, Builder, Dropout, ForwardCtx, LayerNorm, Linear, MultiHeadAttention, ParamStore};

/// `fc1 -> relu -> dropout -> fc2`, producing one logit per row.
#[derive(Clone, Debug)]
pub struct MlpHead<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dropout: Dropout,
}

impl<T: Scalar> MlpHead<T> {
    fn new(b: &mut Builder<T>, d_in: usize, cfg: &ModelConfig) -> Result<Self> {
        let dropout = Dropout::new(cfg.head_dropout)?;
        Ok(b.scoped("head", |b| MlpHead {
            fc1: Linear::new(b, "fc1", d_in, cfg.head_hidden),
            fc2: Linear::new(b, "fc2", cfg.head_hidden, 1),
            dropout,
        }))
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let h = self.dropout.forward(&self.fc1.forward(x)?.relu(), ctx)?;
        let y = self.fc2.forward(&h)?;
        let n = y.shape()[0];
        y.reshape(&[n])
    }
}

/// Gated feature-wise modulation of the spectral feature by the temporal one.
#[derive(Clone, Debug)]
pub struct Film<T: Scalar> {
    pub gamma: Linear<T>,
    pub beta: Linear<T>,
    pub gate: Linear<T>,
}

impl<T: Scalar> Film<T> {
    /// `g * (gamma(w) * s + beta(w)) + (1 - g) * s` with
    /// `g = sigmoid(gate([s; w]))`.
    pub fn mix(&self, f_spec: &Tensor<T>, f_wave: &Tensor<T>) -> Result<Tensor<T>> {
        let modulated = self.gamma.forward(f_wave)?.mul(f_spec)?.add(&self.beta.forward(f_wave)?)?;
        let g = self.gate.forward(&Tensor::concat(&[f_spec.clone(), f_wave.clone()], 1)?)?.sigmoid();
        let keep = g.neg().add_scalar(T::one()).mul(f_spec)?;
        g.mul(&modulated)?.add(&keep)
    }
}

/// Projected CNN sequence attends over the transformer tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention<T: Scalar> {
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
}

impl<T: Scalar> CrossAttention<T> {
    /// Returns the attended sequence `[B, Nq, D]` and the attention weights.
    pub fn attend(&self, seq: &Tensor<T>, tokens: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let q = self.proj.forward(seq)?;
        let (a, w) = self.attn.attend(&self.norm.forward(&q)?, tokens)?;
        Ok((q.add(&a)?, w))
    }
}

#[derive(Clone, Debug)]
pub enum Fusion<T: Scalar> {
    None,
    Concat,
    Film(Film<T>),
    CrossAttention(CrossAttention<T>),
}

/// Intermediate values of one forward pass.
pub struct ForwardOutput<T: Scalar> {
    pub f_spec: Option<Tensor<T>>,
    pub f_wave: Option<Tensor<T>>,
    /// Input of the MLP head.
    pub fused: Tensor<T>,
    pub logit: Tensor<T>,
    pub prob: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub vit: Option<VitBranch<T>>,
    pub cnn: Option<CnnBranch<T>>,
    pub fusion: Fusion<T>,
    pub head: MlpHead<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds every parameter from `seed`; construction order fixes the
    /// parameter order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut b = Builder::new(seed);
        let arch = c.arch;
        let vit = arch.uses_vit().then(|| VitBranch::new(&mut b, c)).transpose()?;
        let cnn = arch.uses_cnn().then(|| CnnBranch::new(&mut b, c, arch != Arch::FuseXattn));
        let c_last = *c.conv_filters.last().expect("validated");
        let (fusion, head_in) = match arch {
            Arch::VitOnly => (Fusion::None, c.embed_dim),
            Arch::CnnOnly => (Fusion::None, c.wave_feat),
            Arch::FuseConcat => (Fusion::Concat, c.embed_dim + c.wave_feat),
            Arch::FuseFilm => {
                let film = b.scoped("film", |b| Film {
                    gamma: Linear::new(b, "gamma", c.wave_feat, c.embed_dim),
                    beta: Linear::new(b, "beta", c.wave_feat, c.embed_dim),
                    gate: Linear::new(b, "gate", c.embed_dim + c.wave_feat, c.embed_dim),
                });
                (Fusion::Film(film), c.embed_dim + c.wave_feat)
            }
            Arch::FuseXattn => {
                let x = b.scoped("xattn", |b| -> Result<_> {
                    Ok(CrossAttention {
                        proj: Linear::new(b, "proj", c_last, c.embed_dim),
                        norm: LayerNorm::new(b, "norm", c.embed_dim),
                        attn: MultiHeadAttention::new(b, "attn", c.embed_dim, c.heads)?,
                    })
                })?;
                (Fusion::CrossAttention(x), 2 * c.embed_dim)
            }
        };
        let head = MlpHead::new(&mut b, head_in, c)?;
        Ok(Model {
            config,
            params: b.finish(),
            vit,
            cnn,
            fusion,
            head,
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `image: [B, S, S]` or `[B, S, S, C]`, `wave: [B, L]`. Inputs of an
    /// unused branch are ignored.
    pub fn forward_detailed(&self, image: &Tensor<T>, wave: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<ForwardOutput<T>> {
        let (fused, f_spec, f_wave) = match (&self.fusion, &self.vit, &self.cnn) {
            (Fusion::CrossAttention(x), Some(vit), Some(cnn)) => {
                let tokens = vit.tokens(image)?;
                let (att, _) = x.attend(&cnn.sequence(wave, ctx)?, &tokens)?;
                let f_spec = global_avg_pool(&tokens, 1)?;
                let pooled = global_avg_pool(&att, 1)?;
                (Tensor::concat(&[pooled, f_spec.clone()], 1)?, Some(f_spec), None)
            }
            (fusion, vit, cnn) => {
                let f_spec = vit.as_ref().map(|v| v.forward(image)).transpose()?;
                let f_wave = cnn.as_ref().map(|c| c.forward(wave, ctx)).transpose()?;
                let fused = match (fusion, &f_spec, &f_wave) {
                    (Fusion::None, Some(s), None) => s.clone(),
                    (Fusion::None, None, Some(w)) => w.clone(),
                    (Fusion::Concat, Some(s), Some(w)) => Tensor::concat(&[s.clone(), w.clone()], 1)?,
                    (Fusion::Film(film), Some(s), Some(w)) => Tensor::concat(&[film.mix(s, w)?, w.clone()], 1)?,
                    _ => return Err(Error::Config("model branches do not match its fusion".into())),
                };
                (fused, f_spec, f_wave)
            }
        };
        let logit = self.head.forward(&fused, ctx)?;
        let prob = logit.sigmoid();
        Ok(ForwardOutput {
            f_spec,
            f_wave,
            fused,
            logit,
            prob,
        })
    }

    /// Probabilities `[B]`.
    pub fn forward(&self, image: &Tensor<T>, wave: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        Ok(self.forward_detailed(image, wave, ctx)?.prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn inputs<T: Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let img = (0..batch * s * s).map(|_| T::from_f64(r.random_range(0.0..1.0))).collect();
        let wav = (0..batch * cfg.wave_len).map(|_| T::from_f64(r.random_range(-1.0..1.0))).collect();
        (
            Tensor::new(img, &[batch, s, s]).unwrap(),
            Tensor::new(wav, &[batch, cfg.wave_len]).unwrap(),
        )
    }

    fn linear_count(i: usize, o: usize) -> usize {
        i * o + o
    }

    #[test]
    fn vit_branch_closed_form() {
        let c = ModelConfig::full();
        let m = Model::<f32>::new(c.clone().with_arch(Arch::VitOnly), 0).unwrap();
        let (d, h) = (c.embed_dim, c.mlp_hidden);
        let block = 2 * 2 * d + 4 * linear_count(d, d) + linear_count(d, h) + linear_count(h, d);
        let want = linear_count(c.patch * c.patch, d) + c.n_tokens() * d + c.depth * block + 2 * d;
        assert_eq!(want, 1_869_504);
        assert_eq!(m.params.count_prefix("vit."), want);
        assert_eq!(m.param_count(), want + linear_count(192, 192) + 193);
    }

    #[test]
    fn cnn_and_concat_counts() {
        let m = Model::<f32>::new(ModelConfig::full().with_arch(Arch::CnnOnly), 0).unwrap();
        assert_eq!(m.params.count_prefix("cnn."), 675_072);
        let conv: Vec<usize> = (0..3).map(|i| m.params.count_prefix(&format!("cnn.block{i}.conv."))).collect();
        assert_eq!(conv, vec![1088, 131_200, 524_544]);
        let bn: usize = (0..3).map(|i| m.params.count_prefix(&format!("cnn.block{i}.bn."))).sum();
        assert_eq!((bn, m.params.count_prefix("cnn.fc.")), (1792, 16_448));
        let cat = Model::<f32>::new(ModelConfig::full(), 0).unwrap();
        assert_eq!(cat.params.count_prefix("head."), 49_537);
        assert_eq!(cat.param_count(), 1_869_504 + 675_072 + 49_537);
        let film = Model::<f32>::new(ModelConfig::full().with_arch(Arch::FuseFilm), 0).unwrap();
        assert_eq!(film.param_count() - cat.param_count(), 2 * linear_count(64, 192) + linear_count(256, 192));
    }

    #[test]
    fn shapes_and_ranges_for_every_arch() {
        let cfg = ModelConfig::mini();
        let (img, wav) = inputs::<f64>(&cfg, 3, 1);
        for arch in Arch::ALL {
            let m = Model::<f64>::new(cfg.clone().with_arch(arch), 2).unwrap();
            let out = m.forward_detailed(&img, &wav, &mut ForwardCtx::train(0)).unwrap();
            assert_eq!(out.prob.shape(), &[3]);
            assert!(out.prob.to_vec().iter().all(|p| *p > 0.0 && *p < 1.0));
            if arch == Arch::FuseConcat {
                let (s, w, f) = (out.f_spec.unwrap().to_vec(), out.f_wave.unwrap().to_vec(), out.fused.to_vec());
                let (d, wf) = (cfg.embed_dim, cfg.wave_feat);
                for b in 0..3 {
                    assert_eq!(f[b * (d + wf)..b * (d + wf) + d], s[b * d..(b + 1) * d]);
                    assert_eq!(f[b * (d + wf) + d..(b + 1) * (d + wf)], w[b * wf..(b + 1) * wf]);
                }
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let cfg = ModelConfig::mini();
        let m = Model::<f32>::new(cfg.clone(), 3).unwrap();
        // populate running stats
        let (img, wav) = inputs::<f32>(&cfg, 4, 5);
        m.forward(&img, &wav, &mut ForwardCtx::train(1)).unwrap();
        let a = m.forward(&img, &wav, &mut ForwardCtx::eval()).unwrap().to_vec();
        let b = m.forward(&img, &wav, &mut ForwardCtx::eval()).unwrap().to_vec();
        assert_eq!(a, b);
        let s = cfg.image_size * cfg.image_size;
        let one = m
            .forward(
                &Tensor::new(img.to_vec()[2 * s..3 * s].to_vec(), &[1, cfg.image_size, cfg.image_size]).unwrap(),
                &Tensor::new(wav.to_vec()[2 * cfg.wave_len..3 * cfg.wave_len].to_vec(), &[1, cfg.wave_len]).unwrap(),
                &mut ForwardCtx::eval(),
            )
            .unwrap()
            .to_vec();
        assert_eq!(one[0], a[2]);
        assert_eq!(ForwardCtx::eval().mode, Mode::Eval);
    }

    #[test]
    fn zeroed_wave_projection_cuts_the_waveform_path() {
        let cfg = ModelConfig::mini();
        let m = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let fc = m.cnn.as_ref().unwrap().fc.as_ref().unwrap();
        fc.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (img, wav) = inputs::<f64>(&cfg, 2, 6);
        let (_, other) = inputs::<f64>(&cfg, 2, 7);
        let a = m.forward(&img, &wav, &mut ForwardCtx::eval()).unwrap().to_vec();
        let b = m.forward(&img, &other, &mut ForwardCtx::eval()).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn film_identity_modulation() {
        let cfg = ModelConfig::mini().with_arch(Arch::FuseFilm);
        let m = Model::<f64>::new(cfg, 5).unwrap();
        let Fusion::Film(film) = &m.fusion else { unreachable!() };
        film.gamma.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        film.gamma.bias.data_mut().iter_mut().for_each(|v| *v = 1.0);
        film.beta.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let s = Tensor::new((0..32).map(|i| i as f64 * 0.1 - 1.0).collect(), &[2, 16]).unwrap();
        let w = Tensor::new((0..16).map(|i| (i as f64).sin()).collect(), &[2, 8]).unwrap();
        assert_eq!(film.mix(&s, &w).unwrap().to_vec(), s.to_vec());
        // gate shut: mixed == f_spec whatever the modulation
        film.gamma.bias.data_mut().iter_mut().for_each(|v| *v = 3.0);
        film.gate.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        film.gate.bias.data_mut().iter_mut().for_each(|v| *v = -1e4);
        assert_eq!(film.mix(&s, &w).unwrap().to_vec(), s.to_vec());
    }

    #[test]
    fn cross_attention_single_token() {
        let mut cfg = ModelConfig::mini().with_arch(Arch::FuseXattn);
        cfg.image_size = 16;
        let m = Model::<f64>::new(cfg.clone(), 6).unwrap();
        let Fusion::CrossAttention(x) = &m.fusion else { unreachable!() };
        let (img, wav) = inputs::<f64>(&cfg, 1, 8);
        let tokens = m.vit.as_ref().unwrap().tokens(&img).unwrap();
        assert_eq!(tokens.shape(), &[1, 1, 16]);
        let seq = m.cnn.as_ref().unwrap().sequence(&wav, &ForwardCtx::eval()).unwrap();
        let (att, w) = x.attend(&seq, &tokens).unwrap();
        assert!(w.to_vec().iter().all(|&v| v == 1.0));
        let value = x.attn.out.forward(&x.attn.v.forward(&tokens).unwrap()).unwrap().to_vec();
        let q = x.proj.forward(&seq).unwrap().to_vec();
        for (i, a) in att.to_vec().iter().enumerate() {
            assert!((a - (q[i] + value[i % 16])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_wave_gives_constant_feature() {
        let cfg = ModelConfig::mini().with_arch(Arch::CnnOnly);
        let m = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let z = Tensor::zeros(&[2, cfg.wave_len]);
        let f = m.cnn.as_ref().unwrap().forward(&z, &ForwardCtx::eval()).unwrap().to_vec();
        assert_eq!(f[..cfg.wave_feat], f[cfg.wave_feat..]);
    }
}
