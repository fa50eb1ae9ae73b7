//! Differentiable primitives.
//!
//! Binary ops broadcast only a scalar or a trailing suffix of the larger
//! operand's shape (e.g. a `[C]` bias over `[B, L, C]`). With that rule
//! output element `i` reads element `i % len` of each operand.

use super::kernels::{self, gemm};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel::Execution;

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Rank(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Sums `g` (length `n`) cyclically into a buffer of length `len`.
fn reduce_cyclic<T: Scalar>(g: impl Iterator<Item = T>, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (i, v) in g.enumerate() {
        out[i % len] += v;
    }
    out
}

pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    // innermost output axis is walked as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        for j in 0..run {
            out.push(data[offset + j * run_stride]);
        }
        if last == 0 {
            break;
        }
        let mut d = last - 1;
        loop {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
            if d == 0 {
                return out;
            }
            d -= 1;
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        f: fn(T, T) -> T,
        dfa: fn(T, T, T) -> T,
        dfb: fn(T, T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (la, lb) = (self.numel(), other.numel());
        let out_shape = if sa == sb || lb == 1 || is_suffix(sb, sa) {
            sa.to_vec()
        } else if la == 1 || is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(Error::shape(name, sa, sb));
        };
        let n = numel(&out_shape);
        let data: Vec<T> = {
            let (a, b) = (self.data(), other.data());
            (0..n).map(|i| f(a[i % la], b[i % lb])).collect()
        };
        Ok(Tensor::from_op(
            name,
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |args| {
                let a = args.inputs[0].data();
                let b = args.inputs[1].data();
                let (la, lb) = (a.len(), b.len());
                let ga = args.inputs[0].requires_grad().then(|| {
                    let it = args
                        .grad
                        .iter()
                        .zip(args.output)
                        .enumerate()
                        .map(|(i, (&g, &o))| g * dfa(a[i % la], b[i % lb], o));
                    if la == args.grad.len() {
                        it.collect()
                    } else {
                        reduce_cyclic(it, la)
                    }
                });
                let gb = args.inputs[1].requires_grad().then(|| {
                    let it = args
                        .grad
                        .iter()
                        .zip(args.output)
                        .enumerate()
                        .map(|(i, (&g, &o))| g * dfb(a[i % la], b[i % lb], o));
                    if lb == args.grad.len() {
                        it.collect()
                    } else {
                        reduce_cyclic(it, lb)
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| T::one() / b,
            |a, b, _| -a / (b * b),
        )
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T + Sync + Send,
        D: Fn(T, T) -> T + 'static,
    {
        let mut data = vec![T::zero(); self.numel()];
        kernels::map_into(Execution::auto(), &self.data(), &mut data, f);
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let g = args
                    .grad
                    .iter()
                    .zip(x.iter().zip(args.output))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary("log", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    pub fn powf(&self, p: T) -> Tensor<T> {
        self.unary("pow", move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// `[..., m, k] x [k, n]` (shared right operand) or batched
    /// `[b.., m, k] x [b.., k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let exec = Execution::auto();
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            let mut out = vec![T::zero(); rows * n];
            gemm(exec, rows, k, n, &self.data(), false, &other.data(), false, &mut out, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(Tensor::from_op(
                "matmul",
                out,
                shape,
                vec![self.clone(), other.clone()],
                Box::new(move |args| {
                    let a = &args.inputs[0];
                    let b = &args.inputs[1];
                    let ga = a.requires_grad().then(|| {
                        let mut ga = vec![T::zero(); rows * k];
                        gemm(exec, rows, n, k, args.grad, false, &b.data(), true, &mut ga, false);
                        ga
                    });
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(exec, k, rows, n, &a.data(), true, args.grad, false, &mut gb, false);
                        gb
                    });
                    vec![ga, gb]
                }),
            ));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        batched_gemm(exec, batch, m, k, n, &self.data(), false, &other.data(), false, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(Tensor::from_op(
            "batched_matmul",
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |args| {
                let a = &args.inputs[0];
                let b = &args.inputs[1];
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    batched_gemm(exec, batch, m, n, k, args.grad, false, &b.data(), true, &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    batched_gemm(exec, batch, k, m, n, &a.data(), true, args.grad, false, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Rank(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let data = permute_data(&self.data(), &in_shape, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |args| vec![Some(permute_data(args.grad, &grad_shape, &inverse))]),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::Rank(format!("transpose: axes {a},{b} of rank {}", self.rank())));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        check_axis("slice", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        if start > end || end > shape[axis] {
            return Err(Error::Size(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        {
            let src = self.data();
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&src[base..base + width * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        Ok(Tensor::from_op(
            "slice",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    g[dst..dst + width * inner].copy_from_slice(&args.grad[src..src + width * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        check_axis("concat", first.shape(), axis)?;
        let base = first.shape().to_vec();
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let srcs: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (src, &w) in srcs.iter().zip(&widths) {
                    data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
                }
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            data,
            out_shape,
            parts.to_vec(),
            Box::new(move |args| {
                let mut grads: Vec<Vec<T>> = widths
                    .iter()
                    .map(|&w| Vec::with_capacity(outer * w * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&args.grad[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(args.inputs)
                    .map(|(g, t)| t.requires_grad().then_some(g))
                    .collect()
            }),
        ))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        {
            let src = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            "sum",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        g.extend_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("mean", self.shape(), axis)?;
        let len = self.shape()[axis];
        Ok(self.sum(axis)?.mul_scalar(T::one() / T::from_f64(len as f64)))
    }

    /// Max over `axis`; the gradient goes to the first maximal element.
    pub fn max(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("max", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if len == 0 {
            return Err(Error::Size("max over an empty axis".into()));
        }
        let mut data = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        {
            let src = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = src[o * len * inner + i];
                    let mut best_a = 0;
                    for a in 1..len {
                        let v = src[(o * len + a) * inner + i];
                        if v > best {
                            best = v;
                            best_a = a;
                        }
                    }
                    data.push(best);
                    arg.push((o * len + best_a) * inner + i);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let n_in = outer * len * inner;
        Ok(Tensor::from_op(
            "max",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |args| {
                let mut g = vec![T::zero(); n_in];
                for (&idx, &gv) in arg.iter().zip(args.grad) {
                    g[idx] += gv;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![total],
            vec![],
            vec![self.clone()],
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(T::one() / T::from_f64(n as f64))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(data[at(a)]);
                }
                let mut z = T::zero();
                for a in 0..len {
                    let e = (data[at(a)] - mx).exp();
                    data[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    data[at(a)] = data[at(a)] / z;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |args| {
                let y = args.output;
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot += args.grad[at(a)] * y[at(a)];
                        }
                        for a in 0..len {
                            g[at(a)] = y[at(a)] * (args.grad[at(a)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// `batch` independent products; `trans_*` as in [`gemm`].
#[allow(clippy::too_many_arguments)]
fn batched_gemm<T: Scalar>(
    exec: Execution,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
) {
    let per = m * n;
    debug_assert_eq!(out.len(), batch * per);
    if per == 0 {
        return;
    }
    crate::parallel::for_each_block_mut(exec, out, per, |i, c| {
        let a_i = &a[i * m * k..(i + 1) * m * k];
        let b_i = &b[i * k * n..(i + 1) * k * n];
        gemm(Execution::Sequential, m, k, n, a_i, trans_a, b_i, trans_b, c, false);
    });
}
