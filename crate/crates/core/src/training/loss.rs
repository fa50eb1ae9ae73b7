use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// `w_c = N / (2 N_c)` from the training labels.
pub fn auto_class_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::InsufficientData(format!(
            "automatic class weights need both classes in the training split ({neg} negative, {pos} positive)"
        )));
    }
    Ok([n / (2.0 * neg), n / (2.0 * pos)])
}

/// Batch mean of `-w_y [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`. Clamped entries pass no gradient.
pub fn weighted_bce<T: Scalar>(probs: &Tensor<T>, labels: &[u8], weights: [f64; 2]) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Argument("weighted_bce of an empty batch".into()));
    }
    if probs.numel() != labels.len() {
        return Err(Error::shape("weighted_bce", probs.shape(), &[labels.len()]));
    }
    let n = labels.len() as f64;
    let p: Vec<f64> = probs.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let loss: f64 = p
        .iter()
        .zip(labels)
        .map(|(&pi, &y)| {
            let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let w = weights[y as usize];
            if y == 1 {
                -w * pc.ln()
            } else {
                -w * (1.0 - pc).ln()
            }
        })
        .sum::<f64>()
        / n;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "weighted_bce",
        vec![T::from_f64(loss)],
        vec![],
        vec![probs.clone()],
        Box::new(move |args| {
            let g = Scalar::to_f64(args.grad[0]);
            let gp = p
                .iter()
                .zip(&labels)
                .map(|(&pi, &y)| {
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pi) {
                        return T::zero();
                    }
                    let w = weights[y as usize];
                    let d = if y == 1 { -w / pi } else { w / (1.0 - pi) };
                    T::from_f64(g * d / n)
                })
                .collect();
            vec![Some(gp)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let l = weighted_bce(&Tensor::<f64>::new(vec![0.5], &[1]).unwrap(), &[1], [1.0, 1.0]).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = weighted_bce(&Tensor::<f64>::new(vec![1.0, 0.0], &[2]).unwrap(), &[1, 0], [1.0, 1.0]).unwrap();
        assert!(l.item() <= -(1.0f64 - 1e-7).ln() + 1e-15);
        let w = auto_class_weights(&[0, 0, 0, 1]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
        assert!(auto_class_weights(&[1, 1]).is_err());
        assert!(weighted_bce(&Tensor::<f64>::zeros(&[0]), &[], [1.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let p = Tensor::<f64>::param(vec![0.2, 0.7, 0.9], &[3]).unwrap();
        let (labels, w) = ([0u8, 1, 0], [0.8, 1.7]);
        weighted_bce(&p, &labels, w).unwrap().backward().unwrap();
        let g = p.grad().unwrap();
        let f = |v: Vec<f64>| weighted_bce(&Tensor::new(v, &[3]).unwrap(), &labels, w).unwrap().item();
        for i in 0..3 {
            let (mut a, mut b) = (p.to_vec(), p.to_vec());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (f(a) - f(b)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6 * num.abs().max(1.0));
        }
    }
}
