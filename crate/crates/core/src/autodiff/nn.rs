//! Fused differentiable kernels for the network layers.
//!
//! Each of these could be written with the primitives in `ops`, but the
//! fused forms keep memory proportional to one activation per layer.

use super::kernels::gemm;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out_len = ceil(len / stride)`; an odd
    /// remainder goes to the right.
    Same,
    Valid,
}

/// Output length and left padding of a 1-D convolution.
pub fn conv1d_geometry(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("conv1d: kernel and stride must be positive".into()));
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out.max(1) - 1) * stride + kernel).saturating_sub(len);
            if kernel > len + total {
                return Err(Error::Size(format!("conv1d: kernel {kernel} longer than padded input")));
            }
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > len {
                return Err(Error::Size(format!(
                    "conv1d: kernel {kernel} longer than input {len}"
                )));
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
    }
}

struct ConvDims {
    len: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
}

impl ConvDims {
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let row = self.k * self.c_in;
        for t in 0..self.out_len {
            let dst = &mut col[t * row..(t + 1) * row];
            for kk in 0..self.k {
                let pos = (t * self.stride + kk) as isize - self.pad as isize;
                let seg = &mut dst[kk * self.c_in..(kk + 1) * self.c_in];
                if pos >= 0 && (pos as usize) < self.len {
                    let p = pos as usize;
                    seg.copy_from_slice(&x[p * self.c_in..(p + 1) * self.c_in]);
                } else {
                    seg.iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let row = self.k * self.c_in;
        for t in 0..self.out_len {
            let src = &col[t * row..(t + 1) * row];
            for kk in 0..self.k {
                let pos = (t * self.stride + kk) as isize - self.pad as isize;
                if pos >= 0 && (pos as usize) < self.len {
                    let p = pos as usize;
                    for (d, &s) in dx[p * self.c_in..(p + 1) * self.c_in]
                        .iter_mut()
                        .zip(&src[kk * self.c_in..(kk + 1) * self.c_in])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [B, L, C_in]` with `w: [K, C_in, C_out]` plus
/// `bias: [C_out]`, giving `[B, L', C_out]`.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
    if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] || bias.shape() != [ws[2]] {
        return Err(Error::shape("conv1d", &xs, &ws));
    }
    let (batch, len, c_in) = (xs[0], xs[1], xs[2]);
    let (k, c_out) = (ws[0], ws[2]);
    let (out_len, pad) = conv1d_geometry(len, k, stride, padding)?;
    let dims = ConvDims {
        len,
        c_in,
        k,
        stride,
        pad,
        out_len,
    };
    let exec = Execution::auto();
    let row = k * c_in;
    let mut out = vec![T::zero(); batch * out_len * c_out];
    {
        let (xg, wg, bg) = (x.data(), w.data(), bias.data());
        let (xd, wd, bd): (&[T], &[T], &[T]) = (&xg, &wg, &bg);
        parallel::for_each_block_mut(exec, &mut out, (out_len * c_out).max(1), |b, y| {
            let mut col = vec![T::zero(); out_len * row];
            dims.im2col(&xd[b * len * c_in..(b + 1) * len * c_in], &mut col);
            gemm(Execution::Sequential, out_len, row, c_out, &col, false, wd, false, y, false);
            for r in y.chunks_mut(c_out) {
                r.iter_mut().zip(bd.iter()).for_each(|(v, &bb)| *v += bb);
            }
        });
    }
    Ok(Tensor::from_op(
        "conv1d",
        out,
        vec![batch, out_len, c_out],
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |args| {
            let (x, w, bias) = (&args.inputs[0], &args.inputs[1], &args.inputs[2]);
            let g = args.grad;
            let per_out = out_len * c_out;
            let (xg, wg) = (x.data(), w.data());
            let (xd, wd): (&[T], &[T]) = (&xg, &wg);
            // per-item weight partials, reduced in item order below
            let need_w = w.requires_grad();
            let need_x = x.requires_grad();
            let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> =
                parallel::map_indexed(exec, batch, |b| {
                    let gy = &g[b * per_out..(b + 1) * per_out];
                    let gw = need_w.then(|| {
                        let mut col = vec![T::zero(); out_len * row];
                        dims.im2col(&xd[b * len * c_in..(b + 1) * len * c_in], &mut col);
                        let mut gw = vec![T::zero(); row * c_out];
                        gemm(Execution::Sequential, row, out_len, c_out, &col, true, gy, false, &mut gw, false);
                        gw
                    });
                    let gx = need_x.then(|| {
                        let mut dcol = vec![T::zero(); out_len * row];
                        gemm(Execution::Sequential, out_len, c_out, row, gy, false, wd, true, &mut dcol, false);
                        let mut gx = vec![T::zero(); len * c_in];
                        dims.col2im(&dcol, &mut gx);
                        gx
                    });
                    (gw, gx)
                });
            let mut gw_total = need_w.then(|| vec![T::zero(); row * c_out]);
            let mut gx_total = need_x.then(|| Vec::with_capacity(batch * len * c_in));
            for (gw, gx) in parts {
                if let (Some(acc), Some(gw)) = (gw_total.as_mut(), gw) {
                    acc.iter_mut().zip(&gw).for_each(|(a, &v)| *a += v);
                }
                if let (Some(acc), Some(gx)) = (gx_total.as_mut(), gx) {
                    acc.extend_from_slice(&gx);
                }
            }
            let gb = bias.requires_grad().then(|| {
                let mut gb = vec![T::zero(); c_out];
                for r in g.chunks(c_out) {
                    gb.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                }
                gb
            });
            vec![gx_total, gw_total, gb]
        }),
    ))
}

/// Windowed max over time for `x: [B, L, C]` (valid windows, floor length).
/// Ties route the gradient to the earliest position.
pub fn max_pool1d<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Rank(format!("max_pool1d expects [B, L, C], got {s:?}")));
    }
    if size == 0 || stride == 0 {
        return Err(Error::Config("max_pool1d: size and stride must be positive".into()));
    }
    let (batch, len, ch) = (s[0], s[1], s[2]);
    if len < size {
        return Err(Error::Size(format!("max_pool1d: length {len} shorter than window {size}")));
    }
    let out_len = (len - size) / stride + 1;
    let mut data = Vec::with_capacity(batch * out_len * ch);
    let mut arg = Vec::with_capacity(batch * out_len * ch);
    {
        let xd = x.data();
        for b in 0..batch {
            for t in 0..out_len {
                for c in 0..ch {
                    let mut best_i = (b * len + t * stride) * ch + c;
                    let mut best = xd[best_i];
                    for j in 1..size {
                        let i = (b * len + t * stride + j) * ch + c;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                    data.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let n_in = batch * len * ch;
    Ok(Tensor::from_op(
        "max_pool1d",
        data,
        vec![batch, out_len, ch],
        vec![x.clone()],
        Box::new(move |args| {
            let mut g = vec![T::zero(); n_in];
            for (&i, &gv) in arg.iter().zip(args.grad) {
                g[i] += gv;
            }
            vec![Some(g)]
        }),
    ))
}

/// Normalizes the last axis to zero mean and unit (biased) variance, then
/// applies `gamma * x_hat + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::Rank("layer_norm of a scalar".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / d.max(1);
    let eps = T::from_f64(eps);
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut x_hat = vec![T::zero(); rows * d];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); rows * d];
    {
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                x_hat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
    }
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let gamma = args.inputs[1].data();
            let mut gx = vec![T::zero(); rows * d];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &x_hat[r * d..(r + 1) * d];
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..d {
                    let dh = gr[j] * gamma[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                for j in 0..d {
                    let dh = gr[j] * gamma[j];
                    gx[r * d + j] = inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Training-mode batch normalization of `x: [.., C]` over every axis but
/// the last. Returns the output and the batch mean and biased variance.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = *x.shape().last().ok_or_else(|| Error::Rank("batch_norm of a scalar".into()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / c.max(1);
    if rows == 0 {
        return Err(Error::Size("batch_norm over an empty batch".into()));
    }
    let inv_n = T::one() / T::from_f64(rows as f64);
    let eps = T::from_f64(eps);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut out;
    let mut x_hat;
    let mut inv_std = vec![T::zero(); c];
    {
        let xd = x.data();
        for r in xd.chunks(c) {
            mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_n);
        for r in xd.chunks(c) {
            for j in 0..c {
                let dv = r[j] - mean[j];
                var[j] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v = *v * inv_n);
        for j in 0..c {
            inv_std[j] = T::one() / (var[j] + eps).sqrt();
        }
        let (gd, bd) = (gamma.data(), beta.data());
        x_hat = vec![T::zero(); xd.len()];
        out = vec![T::zero(); xd.len()];
        for (i, (&v, h)) in xd.iter().zip(x_hat.iter_mut()).enumerate() {
            let j = i % c;
            *h = (v - mean[j]) * inv_std[j];
            out[i] = gd[j] * *h + bd[j];
        }
    }
    let t = Tensor::from_op(
        "batch_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args| {
            let g = args.grad;
            let gamma = args.inputs[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for (i, (&gv, &h)) in g.iter().zip(&x_hat).enumerate() {
                let j = i % c;
                sum_g[j] += gv;
                sum_gh[j] += gv * h;
            }
            let gx = g
                .iter()
                .zip(&x_hat)
                .enumerate()
                .map(|(i, (&gv, &h))| {
                    let j = i % c;
                    gamma[j] * inv_std[j] * (gv - inv_n * sum_g[j] - h * inv_n * sum_gh[j])
                })
                .collect();
            vec![Some(gx), Some(sum_gh), Some(sum_g)]
        }),
    );
    Ok((t, mean, var))
}

/// Inverted dropout driven by a caller-supplied keep mask.
///
/// `mask[i]` is true for survivors; they are scaled by `1 / (1 - rate)`.
pub fn dropout_with_mask<T: Scalar>(x: &Tensor<T>, mask: &[bool], rate: f64) -> Result<Tensor<T>> {
    if mask.len() != x.numel() {
        return Err(Error::shape("dropout", x.shape(), &[mask.len()]));
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let m: Vec<T> = mask.iter().map(|&k| if k { scale } else { T::zero() }).collect();
    let m = Tensor::new(m, x.shape())?;
    x.mul(&m)
}
