//! Network building blocks, their parameters and train/eval semantics.

mod attention;
mod basic;

pub use attention::{MultiHeadAttention, PatchEmbed};
pub use basic::{global_avg_pool, BatchNorm1d, Conv1d, Dropout, LayerNorm, Linear, MaxPool1d};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    PosEmbed,
    /// Batch-norm running statistics: saved and counted, never optimized.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(|p| p.kind.trainable())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Element count including running statistics.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, kind: ParamKind) {
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, tensor, kind });
    }
}

/// Creates parameters under hierarchical dotted names with a seeded
/// generator. Draws happen in f64 so both precisions see the same values.
pub struct Builder<T: Scalar> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let r = f(self);
        self.scope.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn add(&mut self, name: &str, data: Vec<T>, shape: &[usize], kind: ParamKind) -> Tensor<T> {
        let t = if kind.trainable() {
            Tensor::param(data, shape)
        } else {
            Tensor::new(data, shape)
        }
        .expect("parameter data matches its shape");
        self.store.push(self.full_name(name), t.clone(), kind);
        t
    }

    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.random_range(-a..a))).collect();
        self.add(name, data, shape, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> Tensor<T> {
        let n: usize = shape.iter().product();
        self.add(name, vec![T::from_f64(value); n], shape, kind)
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the mode and the generator behind dropout masks.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub(crate) fn keep_mask(&mut self, n: usize, rate: f64) -> Vec<bool> {
        (0..n).map(|_| self.rng.random::<f64>() >= rate).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_counts() {
        let mut b = Builder::<f32>::new(0);
        b.scoped("enc", |b| {
            b.glorot("w", &[3, 4], 3, 4);
            b.constant("running_mean", &[4], 0.0, ParamKind::RunningStat);
        });
        let s = b.finish();
        assert_eq!(s.len(), 2);
        assert!(s.get("enc.w").unwrap().tensor.requires_grad());
        assert!(!s.get("enc.running_mean").unwrap().tensor.requires_grad());
        assert_eq!((s.count(), s.trainable_count()), (16, 12));
    }

    #[test]
    fn glorot_bounds_and_precision_agreement() {
        let a = Builder::<f32>::new(5).glorot("w", &[100, 50], 100, 50).to_vec();
        let b = Builder::<f64>::new(5).glorot("w", &[100, 50], 100, 50).to_vec();
        let lim = (6.0f64 / 150.0).sqrt();
        assert!(b.iter().all(|v| v.abs() < lim));
        assert!(a.iter().zip(&b).all(|(x, y)| *x == *y as f32));
    }
}
