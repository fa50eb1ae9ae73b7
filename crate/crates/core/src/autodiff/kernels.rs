//! Dense numeric kernels behind the differentiable ops.

use super::Scalar;
use crate::parallel::{self, Execution, ROW_BLOCK};

/// `C (m x n) = op(A) (m x k) * op(B) (k x n)`, optionally accumulating into `C`.
///
/// `trans_a` means `a` is stored as `k x m`; `trans_b` means `b` is stored
/// as `n x k`. Rows of `C` are split into fixed [`ROW_BLOCK`] blocks.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    exec: Execution,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    parallel::for_each_block_mut(exec, c, ROW_BLOCK * n, |block, c_block| {
        let r0 = block * ROW_BLOCK;
        let rows = c_block.len() / n;
        let a_off = if trans_a { r0 } else { r0 * k };
        let a_view = &a[a_off..];
        // SAFETY: `a_view` starts at row `r0` of op(A) and the strides stay
        // within the original `m x k` buffer for `rows` rows; `b` is the full
        // `k x n` buffer; `c_block` holds exactly `rows x n` elements.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a_view.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Reference triple loop, used by tests and benchmarks.
pub fn gemm_naive<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Applies `f` elementwise in fixed-size blocks.
pub fn map_into<T: Scalar, F>(exec: Execution, src: &[T], dst: &mut [T], f: F)
where
    F: Fn(T) -> T + Sync + Send,
{
    debug_assert_eq!(src.len(), dst.len());
    let block = parallel::ELEMENT_BLOCK;
    parallel::for_each_block_mut(exec, dst, block, |i, out| {
        let base = i * block;
        let len = out.len();
        for (o, &s) in out.iter_mut().zip(&src[base..base + len]) {
            *o = f(s);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn transpose(m: usize, n: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = x[i * n + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (150, 37, 23);
        let a = random(m * k, &mut rng);
        let b = random(k * n, &mut rng);
        let want = gemm_naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(Execution::auto(), m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn accumulate_adds() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(Execution::Sequential, 1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c, [21.0]);
    }

    #[test]
    fn sequential_and_parallel_are_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (300, 64, 40);
        let a: Vec<f32> = random(m * k, &mut rng).into_iter().map(|v| v as f32).collect();
        let b: Vec<f32> = random(k * n, &mut rng).into_iter().map(|v| v as f32).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(Execution::Sequential, m, k, n, &a, false, &b, false, &mut c1, false);
        gemm(Execution::Parallel, m, k, n, &a, false, &b, false, &mut c2, false);
        assert_eq!(c1, c2);
    }
}
