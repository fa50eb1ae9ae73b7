use super::{Builder, Linear, ParamKind};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Non-overlapping `patch x patch` tiles projected to `dim` (a stride-`patch`
/// 2-D convolution). Tokens come out in row-major tile order.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub patch: usize,
    pub channels: usize,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(b: &mut Builder<T>, name: &str, patch: usize, channels: usize, dim: usize) -> Self {
        let fan_in = patch * patch * channels;
        b.scoped(name, |b| PatchEmbed {
            weight: b.glorot("weight", &[fan_in, dim], fan_in, dim),
            bias: b.constant("bias", &[dim], 0.0, ParamKind::Bias),
            patch,
            channels,
        })
    }

    /// `img: [B, H, W, C]` to `[B, (H/p)(W/p), dim]`.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = img.shape();
        let p = self.patch;
        if s.len() != 4 || s[3] != self.channels || s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::shape("patch_embed", s, &[p, p, self.channels]));
        }
        let (b, gh, gw, c) = (s[0], s[1] / p, s[2] / p, s[3]);
        let tiles = img
            .reshape(&[b, gh, p, gw, p, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, gh * gw, p * p * c])?;
        tiles.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Scaled dot-product attention with separate Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(b: &mut Builder<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embed dim {dim} not divisible by {heads} heads")));
        }
        Ok(b.scoped(name, |b| MultiHeadAttention {
            q: Linear::new(b, "q", dim, dim),
            k: Linear::new(b, "k", dim, dim),
            v: Linear::new(b, "v", dim, dim),
            out: Linear::new(b, "out", dim, dim),
            heads,
        }))
    }

    pub fn dim(&self) -> usize {
        self.q.d_in()
    }

    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        x.reshape(&[b, n, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// Queries from `x: [B, Nq, D]`, keys and values from `ctx: [B, Nk, D]`.
    /// Also returns the attention weights `[B, H, Nq, Nk]`.
    pub fn attend(&self, x: &Tensor<T>, ctx: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (sx, sc) = (x.shape(), ctx.shape());
        if sx.len() != 3 || sc.len() != 3 || sx[0] != sc[0] || sx[2] != self.dim() || sc[2] != self.dim() {
            return Err(Error::shape("attention", sx, sc));
        }
        let (b, nq, d) = (sx[0], sx[1], sx[2]);
        let head_dim = d / self.heads;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let kt = self.split_heads(&self.k.forward(ctx)?)?.transpose(2, 3)?;
        let v = self.split_heads(&self.v.forward(ctx)?)?;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let weights = q.matmul(&kt)?.mul_scalar(scale).softmax(3)?;
        let mixed = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, nq, d])?;
        Ok((self.out.forward(&mixed)?, weights))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.attend(x, x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn affine(x: &[f64], lin: &Linear<f64>) -> Vec<f64> {
        let (w, bias) = (lin.weight.to_vec(), lin.bias.to_vec());
        let (di, dout) = (lin.d_in(), lin.d_out());
        x.chunks(di)
            .flat_map(|r| (0..dout).map(|o| bias[o] + (0..di).map(|i| r[i] * w[i * dout + o]).sum::<f64>()).collect::<Vec<_>>())
            .collect()
    }

    /// Single batch item, one head at a time, explicit loops.
    fn attention_oracle(m: &MultiHeadAttention<f64>, x: &[f64], ctx: &[f64], nq: usize, nk: usize) -> Vec<f64> {
        let d = m.dim();
        let hd = d / m.heads;
        let (q, k, v) = (affine(x, &m.q), affine(ctx, &m.k), affine(ctx, &m.v));
        let mut mixed = vec![0.0; nq * d];
        for h in 0..m.heads {
            for i in 0..nq {
                let scores: Vec<f64> = (0..nk)
                    .map(|j| (0..hd).map(|e| q[i * d + h * hd + e] * k[j * d + h * hd + e]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..hd {
                    mixed[i * d + h * hd + e] = (0..nk).map(|j| ex[j] / z * v[j * d + h * hd + e]).sum();
                }
            }
        }
        affine(&mixed, &m.out)
    }

    fn randomize(m: &MultiHeadAttention<f64>) {
        for (i, lin) in [&m.q, &m.k, &m.v, &m.out].iter().enumerate() {
            let n = lin.bias.numel();
            lin.bias.data_mut().copy_from_slice(&random(n, 50 + i as u64));
        }
    }

    #[test]
    fn self_attention_matches_loop_oracle() {
        let mut b = Builder::<f64>::new(2);
        let m = MultiHeadAttention::new(&mut b, "att", 8, 2).unwrap();
        randomize(&m);
        let x = random(4 * 8, 7);
        let y = m.forward(&Tensor::new(x.clone(), &[1, 4, 8]).unwrap()).unwrap().to_vec();
        let want = attention_oracle(&m, &x, &x, 4, 4);
        for (a, w) in y.iter().zip(&want) {
            assert!((a - w).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_attention_three_queries_four_keys() {
        let mut b = Builder::<f64>::new(3);
        let m = MultiHeadAttention::new(&mut b, "att", 8, 4).unwrap();
        randomize(&m);
        let (x, c) = (random(3 * 8, 1), random(4 * 8, 2));
        let (y, w) = m
            .attend(&Tensor::new(x.clone(), &[1, 3, 8]).unwrap(), &Tensor::new(c.clone(), &[1, 4, 8]).unwrap())
            .unwrap();
        let want = attention_oracle(&m, &x, &c, 3, 4);
        for (a, e) in y.to_vec().iter().zip(&want) {
            assert!((a - e).abs() < 1e-5);
        }
        for row in w.to_vec().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_and_symmetry() {
        let mut b = Builder::<f64>::new(4);
        let m = MultiHeadAttention::new(&mut b, "att", 8, 2).unwrap();
        randomize(&m);
        let x = random(8, 3);
        let (y, w) = m.attend(&Tensor::new(x.clone(), &[1, 1, 8]).unwrap(), &Tensor::new(x.clone(), &[1, 1, 8]).unwrap()).unwrap();
        assert!(w.to_vec().iter().all(|&v| v == 1.0));
        let want = affine(&affine(&x, &m.v), &m.out);
        for (a, e) in y.to_vec().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
        let two: Vec<f64> = x.iter().chain(&x).cloned().collect();
        let y2 = m.forward(&Tensor::new(two, &[1, 2, 8]).unwrap()).unwrap().to_vec();
        assert_eq!(y2[..8], y2[8..]);
        assert!(MultiHeadAttention::<f64>::new(&mut b, "bad", 10, 4).is_err());
    }

    #[test]
    fn patch_embed_matches_reshape_matmul_oracle() {
        let mut b = Builder::<f64>::new(5);
        let pe = PatchEmbed::new(&mut b, "pe", 4, 1, 6);
        pe.bias.data_mut().copy_from_slice(&random(6, 9));
        let (h, w) = (8, 12);
        let img = random(2 * h * w, 11);
        let y = pe.forward(&Tensor::new(img.clone(), &[2, h, w, 1]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6]);
        let (wt, bias) = (pe.weight.to_vec(), pe.bias.to_vec());
        let yv = y.to_vec();
        for bb in 0..2 {
            for t in 0..6 {
                let (ti, tj) = (t / 3, t % 3);
                let patch: Vec<f64> = (0..16).map(|e| img[bb * h * w + (ti * 4 + e / 4) * w + tj * 4 + e % 4]).collect();
                for o in 0..6 {
                    let want = bias[o] + (0..16).map(|e| patch[e] * wt[e * 6 + o]).sum::<f64>();
                    assert!((yv[(bb * 6 + t) * 6 + o] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn patch_embed_full_geometry() {
        let mut b = Builder::<f32>::new(0);
        let pe = PatchEmbed::new(&mut b, "pe", 16, 1, 192);
        pe.bias.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let y = pe.forward(&Tensor::zeros(&[1, 224, 224, 1])).unwrap();
        assert_eq!(y.shape(), &[1, 196, 192]);
        for tok in y.to_vec().chunks(192) {
            assert_eq!(tok, &pe.bias.to_vec()[..]);
        }
        assert!(pe.forward(&Tensor::zeros(&[1, 225, 224, 1])).is_err());
    }
}
