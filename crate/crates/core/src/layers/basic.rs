use super::{Builder, ForwardCtx, ParamKind};
use crate::autodiff::nn::{self, Padding};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(b: &mut Builder<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        b.scoped(name, |b| Linear {
            weight: b.glorot("weight", &[d_in, d_out], d_in, d_out),
            bias: b.constant("bias", &[d_out], 0.0, ParamKind::Bias),
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Time-axis convolution over `[B, L, C]` tensors.
#[derive(Clone, Debug)]
pub struct Conv1d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        b.scoped(name, |b| Conv1d {
            weight: b.glorot("weight", &[kernel, c_in, c_out], kernel * c_in, kernel * c_out),
            bias: b.constant("bias", &[c_out], 0.0, ParamKind::Bias),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::conv1d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Per-channel normalization over every axis but the last.
#[derive(Clone, Debug)]
pub struct BatchNorm1d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(b: &mut Builder<T>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| BatchNorm1d {
            gamma: b.constant("gamma", &[channels], 1.0, ParamKind::NormScale),
            beta: b.constant("beta", &[channels], 0.0, ParamKind::NormShift),
            running_mean: b.constant("running_mean", &[channels], 0.0, ParamKind::RunningStat),
            running_var: b.constant("running_var", &[channels], 1.0, ParamKind::RunningStat),
            momentum: 0.9,
            eps: 1e-5,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates as `m * running + (1 - m) * batch`.
    pub fn forward(&self, x: &Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>> {
        if ctx.is_train() {
            let (y, mean, var) = nn::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            let m = T::from_f64(self.momentum);
            let one_m = T::one() - m;
            for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = m * *r + one_m * *v;
            }
            for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
                *r = m * *r + one_m * *v;
            }
            return Ok(y);
        }
        let c = self.gamma.numel();
        if x.shape().last() != Some(&c) {
            return Err(Error::shape("batch_norm", x.shape(), self.gamma.shape()));
        }
        let eps = T::from_f64(self.eps);
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let inv_std = Tensor::new(inv_std, &[c])?;
        let centered = x.sub(&self.running_mean.detach())?;
        centered.mul(&inv_std)?.mul(&self.gamma)?.add(&self.beta)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| LayerNorm {
            gamma: b.constant("gamma", &[dim], 1.0, ParamKind::NormScale),
            beta: b.constant("beta", &[dim], 0.0, ParamKind::NormShift),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool1d {
    pub size: usize,
    pub stride: usize,
}

impl MaxPool1d {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::max_pool1d(x, self.size, self.stride)
    }
}

/// Mean over `axis` (tokens or time), dropping that axis.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    x.mean(axis)
}

/// Inverted dropout; identity in eval mode or at rate 0.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        if !ctx.is_train() || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let mask = ctx.keep_mask(x.numel(), self.rate);
        nn::dropout_with_mask(x, &mask, self.rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop cross-correlation with explicit zero padding.
    fn conv_oracle(
        x: &[f64],
        (b, l, ci): (usize, usize, usize),
        w: &[f64],
        (k, co): (usize, usize),
        bias: &[f64],
        stride: usize,
        pad: usize,
        out_len: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; b * out_len * co];
        for bb in 0..b {
            for t in 0..out_len {
                for o in 0..co {
                    let mut acc = bias[o];
                    for kk in 0..k {
                        let p = (t * stride + kk) as isize - pad as isize;
                        if p < 0 || p as usize >= l {
                            continue;
                        }
                        for c in 0..ci {
                            acc += x[(bb * l + p as usize) * ci + c] * w[(kk * ci + c) * co + o];
                        }
                    }
                    out[(bb * out_len + t) * co + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for (seed, &(l, k, s, pad_mode)) in [(13, 5, 2, Padding::Same), (17, 4, 3, Padding::Same), (20, 6, 2, Padding::Valid)]
            .iter()
            .enumerate()
        {
            let (b, ci, co) = (2, 3, 4);
            let mut bld = Builder::<f64>::new(seed as u64);
            let conv = Conv1d::new(&mut bld, "c", ci, co, k, s, pad_mode);
            conv.bias.data_mut().copy_from_slice(&random(co, 99));
            let x = random(b * l * ci, seed as u64 + 10);
            let y = conv.forward(&Tensor::new(x.clone(), &[b, l, ci]).unwrap()).unwrap();
            let (out_len, pad) = nn::conv1d_geometry(l, k, s, pad_mode).unwrap();
            let want = conv_oracle(&x, (b, l, ci), &conv.weight.to_vec(), (k, co), &conv.bias.to_vec(), s, pad, out_len);
            assert_eq!(y.shape(), &[b, out_len, co]);
            for (a, w) in y.to_vec().iter().zip(&want) {
                assert!((a - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut bld = Builder::<f32>::new(0);
        let conv = Conv1d::new(&mut bld, "c", 1, 1, 3, 1, Padding::Same);
        conv.weight.data_mut().copy_from_slice(&[0.0, 1.0, 0.0]);
        let x = Tensor::new(vec![0.5, -1.0, 2.0, 0.25], &[1, 4, 1]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn batch_norm_momentum_recurrence() {
        let mut bld = Builder::<f64>::new(0);
        let bn = BatchNorm1d::new(&mut bld, "bn", 1);
        let ctx = ForwardCtx::train(0);
        // channel values {1, 3}: mean 2, biased var 1; then {2, 6}: mean 4, var 4
        bn.forward(&Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap(), &ctx).unwrap();
        bn.forward(&Tensor::new(vec![2.0, 6.0], &[2, 1]).unwrap(), &ctx).unwrap();
        let m = bn.running_mean.item();
        let v = bn.running_var.item();
        assert!((m - (0.9 * (0.9 * 0.0 + 0.1 * 2.0) + 0.1 * 4.0)).abs() < 1e-12);
        assert!((v - (0.9 * (0.9 * 1.0 + 0.1 * 1.0) + 0.1 * 4.0)).abs() < 1e-12);
        let eval = ForwardCtx::eval();
        let y = bn.forward(&Tensor::new(vec![m], &[1, 1]).unwrap(), &eval).unwrap();
        assert!(y.item().abs() < 1e-12);
        assert_eq!(eval.mode, Mode::Eval);
    }

    #[test]
    fn batch_norm_eval_before_training_uses_initial_stats() {
        let mut bld = Builder::<f64>::new(0);
        let bn = BatchNorm1d::new(&mut bld, "bn", 2);
        let x = Tensor::new(vec![0.3, -0.7], &[1, 2]).unwrap();
        let y = bn.forward(&x, &ForwardCtx::eval()).unwrap().to_vec();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - 0.3 * s).abs() < 1e-15 && (y[1] + 0.7 * s).abs() < 1e-15);
    }

    #[test]
    fn dropout_modes_and_statistics() {
        let x = Tensor::<f32>::new((0..100_000).map(|i| 1.0 + (i % 7) as f32).collect(), &[100_000]).unwrap();
        let d = Dropout::new(0.5).unwrap();
        let mut eval = ForwardCtx::eval();
        assert_eq!(d.forward(&x, &mut eval).unwrap().to_vec(), x.to_vec());
        let mut train = ForwardCtx::train(3);
        assert_eq!(Dropout::new(0.0).unwrap().forward(&x, &mut train).unwrap().to_vec(), x.to_vec());
        let y = d.forward(&x, &mut train).unwrap().to_vec();
        let kept = y.iter().filter(|v| **v != 0.0).count() as f64 / y.len() as f64;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
        let (mx, my) = (x.to_vec().iter().sum::<f32>() as f64, y.iter().sum::<f32>() as f64);
        assert!((my / mx - 1.0).abs() < 0.02);
        assert!(Dropout::new(1.0).is_err() && Dropout::new(-0.1).is_err());
    }

    #[test]
    fn pools() {
        let x = Tensor::<f32>::new(vec![1.0, 3.0, 2.0, 4.0], &[1, 4, 1]).unwrap();
        let p = MaxPool1d { size: 2, stride: 2 };
        assert_eq!(p.forward(&x).unwrap().to_vec(), vec![3.0, 4.0]);
        let c = Tensor::<f32>::full(&[1, 6, 2], 0.75);
        assert!(p.forward(&c).unwrap().to_vec().iter().all(|&v| v == 0.75));
        assert_eq!(global_avg_pool(&c, 1).unwrap().to_vec(), vec![0.75, 0.75]);
        let tokens: Vec<f32> = (0..196 * 192).map(|i| (i % 192) as f32 + (i / 192) as f32).collect();
        let g = global_avg_pool(&Tensor::new(tokens, &[1, 196, 192]).unwrap(), 1).unwrap();
        assert_eq!(g.shape(), &[1, 192]);
        assert!((g.to_vec()[5] - (5.0 + 97.5)).abs() < 1e-3);
    }

    #[test]
    fn linear_is_affine() {
        let mut bld = Builder::<f64>::new(1);
        let lin = Linear::new(&mut bld, "fc", 3, 2);
        lin.bias.data_mut().copy_from_slice(&[0.5, -0.5]);
        let x = vec![1.0, 2.0, 3.0];
        let y = lin.forward(&Tensor::new(x.clone(), &[1, 3]).unwrap()).unwrap().to_vec();
        let w = lin.weight.to_vec();
        for o in 0..2 {
            let want: f64 = (0..3).map(|i| x[i] * w[i * 2 + o]).sum::<f64>() + [0.5, -0.5][o];
            assert!((y[o] - want).abs() < 1e-12);
        }
    }
}
