use crate::autodiff::Scalar;
use crate::layers::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments with decoupled weight decay. Decay applies to weights and
/// biases only; parameters without a gradient are left untouched.
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |p: &crate::layers::Param<T>| vec![T::zero(); p.tensor.numel()];
        AdamW {
            config,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &ParamStore<T>) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (i, p) in params.iter().enumerate() {
            if !p.kind.trainable() {
                continue;
            }
            let grad = p.tensor.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let wd = T::from_f64(if p.kind.decays() { c.weight_decay } else { 0.0 });
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut theta = p.tensor.data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                theta[j] = theta[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Builder, ParamKind};

    fn store(kind: ParamKind, init: f64) -> ParamStore<f64> {
        let mut b = Builder::<f64>::new(0);
        b.constant("p", &[3], init, kind);
        b.finish()
    }

    fn set_grad(s: &ParamStore<f64>, g: f64) {
        let t = &s.get("p").unwrap().tensor;
        t.zero_grad();
        t.mul_scalar(g).sum_all().backward().unwrap();
    }

    #[test]
    fn first_step_closed_form() {
        let s = store(ParamKind::Weight, 0.0);
        let mut opt = AdamW::new(&s, AdamWConfig::new(3e-4, 0.0));
        set_grad(&s, 1.0);
        opt.step(&s);
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let want = -3e-4 / (1.0 + 1e-8);
        for v in s.get("p").unwrap().tensor.to_vec() {
            assert!((v - want).abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn pure_decay_on_zero_gradient() {
        let s = store(ParamKind::Weight, 2.0);
        let mut opt = AdamW::new(&s, AdamWConfig::new(3e-4, 1e-4));
        set_grad(&s, 0.0);
        opt.step(&s);
        for v in s.get("p").unwrap().tensor.to_vec() {
            assert_eq!(v, 2.0 - 3e-4 * (1e-4 * 2.0));
        }
        let n = store(ParamKind::NormScale, 2.0);
        let mut opt = AdamW::new(&n, AdamWConfig::new(3e-4, 1e-4));
        set_grad(&n, 0.0);
        opt.step(&n);
        assert_eq!(n.get("p").unwrap().tensor.to_vec(), vec![2.0; 3]);
    }

    #[test]
    fn identical_groups_evolve_identically() {
        let mut b = Builder::<f64>::new(0);
        let x = b.constant("x", &[4], 0.5, ParamKind::Weight);
        let y = b.constant("y", &[4], 0.5, ParamKind::Weight);
        let s = b.finish();
        let mut opt = AdamW::new(&s, AdamWConfig::new(1e-2, 1e-4));
        for _ in 0..5 {
            s.zero_grad();
            x.mul(&x).unwrap().sum_all().add(&y.mul(&y).unwrap().sum_all()).unwrap().backward().unwrap();
            opt.step(&s);
        }
        assert_eq!(x.to_vec(), y.to_vec());
    }
}
