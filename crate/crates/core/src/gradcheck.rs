//! Central finite-difference checks of every primitive, layer and
//! miniaturized model, at f64.
//!
//! Each component reduces its output to a scalar with a fixed random
//! projection, then compares analytic gradients against
//! `(f(x + h) - f(x - h)) / 2h` on sampled coordinates. The error of one
//! coordinate is `|a - n| / max(|a|, |n|, 1e-6)`. A coordinate that misses
//! at `h = 1e-4` is measured again at `h = 1e-6` before it counts as a
//! failure: a perturbation can straddle a relu or max-pool kink, which only
//! a smaller step resolves.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::nn::{self, Padding};
use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm1d, Builder, Conv1d, Dropout, ForwardCtx, LayerNorm, Linear, MaxPool1d, MultiHeadAttention, ParamStore,
    PatchEmbed,
};
use crate::model::{Arch, Model, ModelConfig};
use crate::parallel;
use crate::training::weighted_bce;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-4;
const FINE_STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Mini,
    Full,
}

impl std::str::FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Size::Mini),
            "full" => Ok(Size::Full),
            other => Err(Error::Argument(format!("unknown gradcheck size {other:?} (expected mini or full)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub size: Size,
    pub seeds: u64,
    pub workers: usize,
    /// Adds a component whose backward rule is deliberately wrong.
    pub corrupt: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            size: Size::Mini,
            seeds: 20,
            workers: 1,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub component: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub size: Size,
    pub seeds: u64,
    pub tolerance: f64,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.component.len()).max().unwrap_or(9).max(9);
        let mut s = format!("{:<w$}  {:>12}  {:>7}  status\n", "component", "max_rel_err", "checks");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>12.3e}  {:>7}  {}",
                r.component,
                r.max_rel_err,
                r.checked,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Stat {
    max: f64,
    checked: usize,
}

impl Stat {
    fn merge(self, o: Stat) -> Stat {
        Stat {
            max: self.max.max(o.max),
            checked: self.checked + o.checked,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let e = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(random(rng, n, lo, hi), shape).expect("shape matches")
}

/// `sum(y * r)` for a fixed random `r`.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::new(random(&mut rng, y.numel(), -1.0, 1.0), y.shape())?;
    Ok(y.mul(&r)?.sum_all())
}

/// Compares analytic and numeric gradients of `f` for `per_tensor`
/// sampled coordinates of every tensor in `wrt` (all of them when small).
fn check(wrt: &[Tensor<f64>], f: &dyn Fn() -> Result<Tensor<f64>>, rng: &mut ChaCha8Rng, per_tensor: usize) -> Result<Stat> {
    wrt.iter().for_each(Tensor::zero_grad);
    let loss = f()?;
    loss.backward()?;
    let grads: Vec<Option<Vec<f64>>> = wrt.iter().map(Tensor::grad).collect();
    drop(loss);
    let eval = |t: &Tensor<f64>, i: usize, h: f64| -> Result<f64> {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + h;
        let up = no_grad(f)?.item();
        t.data_mut()[i] = orig - h;
        let down = no_grad(f)?.item();
        t.data_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut stat = Stat::default();
    for (t, g) in wrt.iter().zip(&grads) {
        let n = t.numel();
        let coords: Vec<usize> = if n <= 2 * per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let a = g.as_ref().map_or(0.0, |g| g[i]);
            let mut e = rel_err(a, eval(t, i, STEP)?);
            if e >= TOLERANCE {
                e = e.min(rel_err(a, eval(t, i, FINE_STEP)?));
            }
            stat.max = stat.max.max(e);
            stat.checked += 1;
        }
    }
    wrt.iter().for_each(Tensor::zero_grad);
    Ok(stat)
}

fn params(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.trainable().map(|p| p.tensor.clone()).collect()
}

/// Replaces zero-initialized biases and norm parameters with random values
/// so that their gradients are exercised away from the initial point.
fn jitter(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.trainable() {
        for v in p.tensor.data_mut().iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

type Component = (&'static str, fn(u64, Size) -> Result<Stat>);

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&Tensor<f64>) -> Tensor<f64>) -> Result<Stat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = leaf(&mut rng, &[3, 4], lo, hi);
    check(&[x.clone()], &|| project(&op(&x), seed), &mut rng, 12)
}

fn binary(seed: u64, b_shape: &[usize], op: fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>) -> Result<Stat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = leaf(&mut rng, &[3, 4], -1.0, 1.0);
    let mut bv = random(&mut rng, b_shape.iter().product(), 0.5, 1.5);
    bv.iter_mut().enumerate().for_each(|(i, v)| if i % 2 == 1 { *v = -*v });
    let b = Tensor::param(bv, b_shape)?;
    check(&[a.clone(), b.clone()], &|| project(&op(&a, &b)?, seed), &mut rng, 12)
}

fn primitives() -> Vec<Component> {
    vec![
        ("add", |s, _| binary(s, &[3, 4], |a, b| a.add(b))),
        ("add_broadcast", |s, _| binary(s, &[4], |a, b| a.add(b))),
        ("sub", |s, _| binary(s, &[3, 4], |a, b| a.sub(b))),
        ("mul", |s, _| binary(s, &[4], |a, b| a.mul(b))),
        ("div", |s, _| binary(s, &[3, 4], |a, b| a.div(b))),
        ("mul_scalar_broadcast", |s, _| binary(s, &[], |a, b| a.mul(b))),
        ("exp", |s, _| unary(s, -1.0, 1.0, |x| x.exp())),
        ("log", |s, _| unary(s, 0.5, 2.0, |x| x.log())),
        ("sqrt", |s, _| unary(s, 0.5, 2.0, |x| x.sqrt())),
        ("power", |s, _| unary(s, 0.5, 2.0, |x| x.powf(1.7))),
        ("relu", |s, _| unary(s, -1.0, 1.0, |x| x.relu())),
        ("gelu", |s, _| unary(s, -3.0, 3.0, |x| x.gelu())),
        ("sigmoid", |s, _| unary(s, -3.0, 3.0, |x| x.sigmoid())),
        ("tanh", |s, _| unary(s, -2.0, 2.0, |x| x.tanh())),
        ("matmul", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = leaf(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let b = leaf(&mut rng, &[4, 5], -1.0, 1.0);
            let stat = check(&[a.clone(), b.clone()], &|| project(&a.matmul(&b)?, s), &mut rng, 12)?;
            let c = leaf(&mut rng, &[2, 4, 3], -1.0, 1.0);
            Ok(stat.merge(check(&[a.clone(), c.clone()], &|| project(&a.matmul(&c)?, s), &mut rng, 12)?))
        }),
        ("reshape_transpose", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[2, 3, 4], -1.0, 1.0);
            check(
                &[x.clone()],
                &|| project(&x.reshape(&[6, 4])?.transpose(0, 1)?.reshape(&[2, 2, 6])?.permute(&[2, 0, 1])?, s),
                &mut rng,
                24,
            )
        }),
        ("slice_concat", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[3, 5], -1.0, 1.0);
            let y = leaf(&mut rng, &[3, 2], -1.0, 1.0);
            check(
                &[x.clone(), y.clone()],
                &|| project(&Tensor::concat(&[x.slice(1, 1, 4)?, y.clone(), x.exp()], 1)?, s),
                &mut rng,
                15,
            )
        }),
        ("sum_mean", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[3, 4, 2], -1.0, 1.0);
            check(
                &[x.clone()],
                &|| {
                    let a = project(&x.sum(0)?, s)?;
                    let b = project(&x.mean(1)?, s + 1)?;
                    a.add(&b)?.add(&x.mean_all())
                },
                &mut rng,
                24,
            )
        }),
        ("max", |s, _| unary(s, -1.0, 1.0, |x| x.max(1).expect("rank 2"))),
        ("softmax", |s, _| unary(s, -2.0, 2.0, |x| x.softmax(1).expect("rank 2"))),
        ("weighted_bce", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[6], 0.05, 0.95);
            let labels = [0u8, 1, 1, 0, 1, 0];
            check(&[x.clone()], &|| weighted_bce(&x, &labels, [0.7, 1.6]), &mut rng, 6)
        }),
    ]
}

fn layers() -> Vec<Component> {
    vec![
        ("layer:linear", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut b = Builder::new(s);
            let lin = Linear::new(&mut b, "fc", 5, 3);
            let st = b.finish();
            jitter(&st, &mut rng);
            let x = leaf(&mut rng, &[2, 4, 5], -1.0, 1.0);
            let mut wrt = params(&st);
            wrt.push(x.clone());
            check(&wrt, &|| project(&lin.forward(&x)?, s), &mut rng, 6)
        }),
        ("layer:conv1d_same", |s, size| conv_case(s, size, Padding::Same)),
        ("layer:conv1d_valid", |s, size| conv_case(s, size, Padding::Valid)),
        ("layer:batch_norm_train", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut b = Builder::new(s);
            let bn = BatchNorm1d::new(&mut b, "bn", 3);
            let st = b.finish();
            jitter(&st, &mut rng);
            let x = leaf(&mut rng, &[2, 5, 3], -2.0, 2.0);
            let mut wrt = params(&st);
            wrt.push(x.clone());
            check(&wrt, &|| project(&bn.forward(&x, &ForwardCtx::train(0))?, s), &mut rng, 10)
        }),
        ("layer:batch_norm_eval", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut b = Builder::new(s);
            let bn = BatchNorm1d::new(&mut b, "bn", 3);
            let st = b.finish();
            jitter(&st, &mut rng);
            bn.running_mean.data_mut().copy_from_slice(&random(&mut rng, 3, -0.5, 0.5));
            bn.running_var.data_mut().copy_from_slice(&random(&mut rng, 3, 0.5, 2.0));
            let x = leaf(&mut rng, &[2, 5, 3], -2.0, 2.0);
            let mut wrt = params(&st);
            wrt.push(x.clone());
            check(&wrt, &|| project(&bn.forward(&x, &ForwardCtx::eval())?, s), &mut rng, 10)
        }),
        ("layer:layer_norm", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut b = Builder::new(s);
            let ln = LayerNorm::new(&mut b, "ln", 6);
            let st = b.finish();
            jitter(&st, &mut rng);
            let x = leaf(&mut rng, &[2, 3, 6], -2.0, 2.0);
            let mut wrt = params(&st);
            wrt.push(x.clone());
            check(&wrt, &|| project(&ln.forward(&x)?, s), &mut rng, 12)
        }),
        ("layer:max_pool1d", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[2, 9, 3], -1.0, 1.0);
            let pool = MaxPool1d { size: 2, stride: 2 };
            check(&[x.clone()], &|| project(&pool.forward(&x)?, s), &mut rng, 27)
        }),
        ("layer:global_avg_pool", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[2, 7, 3], -1.0, 1.0);
            check(&[x.clone()], &|| project(&crate::layers::global_avg_pool(&x, 1)?, s), &mut rng, 21)
        }),
        ("layer:dropout", |s, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = leaf(&mut rng, &[4, 6], -1.0, 1.0);
            let d = Dropout::new(0.5)?;
            check(&[x.clone()], &|| project(&d.forward(&x, &mut ForwardCtx::train(s))?, s), &mut rng, 24)
        }),
        ("layer:patch_embed", |s, size| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (patch, dim) = if size == Size::Full { (16, 192) } else { (4, 6) };
            let mut b = Builder::new(s);
            let pe = PatchEmbed::new(&mut b, "pe", patch, 1, dim);
            let st = b.finish();
            jitter(&st, &mut rng);
            let img = leaf(&mut rng, &[2, 2 * patch, 2 * patch, 1], 0.0, 1.0);
            let mut wrt = params(&st);
            wrt.push(img.clone());
            check(&wrt, &|| project(&pe.forward(&img)?, s), &mut rng, 8)
        }),
        ("layer:self_attention", |s, size| attention_case(s, size, false)),
        ("layer:cross_attention", |s, size| attention_case(s, size, true)),
        ("layer:fused_conv_bn_relu_pool", |s, size| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (c_in, c_out, k, stride, len) = if size == Size::Full { (64, 128, 16, 4, 96) } else { (2, 3, 4, 2, 17) };
            let mut b = Builder::new(s);
            let conv = Conv1d::new(&mut b, "conv", c_in, c_out, k, stride, Padding::Same);
            let bn = BatchNorm1d::new(&mut b, "bn", c_out);
            let st = b.finish();
            jitter(&st, &mut rng);
            let x = leaf(&mut rng, &[2, len, c_in], -1.0, 1.0);
            let pool = MaxPool1d { size: 2, stride: 2 };
            let mut wrt = params(&st);
            wrt.push(x.clone());
            check(
                &wrt,
                &|| project(&pool.forward(&bn.forward(&conv.forward(&x)?, &ForwardCtx::train(0))?.relu())?, s),
                &mut rng,
                6,
            )
        }),
    ]
}

fn conv_case(s: u64, size: Size, padding: Padding) -> Result<Stat> {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let (c_in, c_out, k, stride, len) = if size == Size::Full { (64, 128, 16, 4, 70) } else { (3, 4, 5, 2, 13) };
    let mut b = Builder::new(s);
    let conv = Conv1d::new(&mut b, "conv", c_in, c_out, k, stride, padding);
    let st = b.finish();
    jitter(&st, &mut rng);
    let x = leaf(&mut rng, &[2, len, c_in], -1.0, 1.0);
    let mut wrt = params(&st);
    wrt.push(x.clone());
    check(&wrt, &|| project(&nn::conv1d(&x, &conv.weight, &conv.bias, stride, padding)?, s), &mut rng, 8)
}

fn attention_case(s: u64, size: Size, cross: bool) -> Result<Stat> {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let (dim, heads) = if size == Size::Full { (192, 8) } else { (8, 2) };
    let mut b = Builder::new(s);
    let att = MultiHeadAttention::new(&mut b, "att", dim, heads)?;
    let st = b.finish();
    jitter(&st, &mut rng);
    let x = leaf(&mut rng, &[2, 3, dim], -1.0, 1.0);
    let c = leaf(&mut rng, &[2, 4, dim], -1.0, 1.0);
    let mut wrt = params(&st);
    wrt.push(x.clone());
    if cross {
        wrt.push(c.clone());
        check(&wrt, &|| project(&att.attend(&x, &c)?.0, s), &mut rng, 6)
    } else {
        check(&wrt, &|| project(&att.forward(&x)?, s), &mut rng, 6)
    }
}

/// Model configuration for the end-to-end rows.
pub fn model_config(size: Size) -> ModelConfig {
    match size {
        Size::Mini => ModelConfig::mini(),
        Size::Full => ModelConfig {
            image_size: 32,
            depth: 2,
            wave_len: 4096,
            head_dropout: 0.5,
            ..ModelConfig::full()
        },
    }
}

fn model_case(s: u64, size: Size, arch: Arch) -> Result<Stat> {
    let cfg = model_config(size).with_arch(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let model = Model::<f64>::new(cfg.clone(), s)?;
    jitter(&model.params, &mut rng);
    let batch = 3;
    let px = cfg.image_size * cfg.image_size;
    let img = Tensor::new(random(&mut rng, batch * px, 0.0, 1.0), &[batch, cfg.image_size, cfg.image_size])?;
    let wav = Tensor::new(random(&mut rng, batch * cfg.wave_len, -1.0, 1.0), &[batch, cfg.wave_len])?;
    let labels = [0u8, 1, 1];
    let per_tensor = if size == Size::Full { 2 } else { 3 };
    check(
        &params(&model.params),
        &|| {
            let p = model.forward(&img, &wav, &mut ForwardCtx::train(s))?;
            weighted_bce(&p, &labels, [1.0, 1.5])
        },
        &mut rng,
        per_tensor,
    )
}

fn models() -> Vec<Component> {
    vec![
        ("model:vit", |s, z| model_case(s, z, Arch::VitOnly)),
        ("model:cnn", |s, z| model_case(s, z, Arch::CnnOnly)),
        ("model:fuse-concat", |s, z| model_case(s, z, Arch::FuseConcat)),
        ("model:fuse-film", |s, z| model_case(s, z, Arch::FuseFilm)),
        ("model:fuse-xattn", |s, z| model_case(s, z, Arch::FuseXattn)),
    ]
}

/// `2x` forward with a backward rule that reports `2.2x`: the harness must
/// flag it.
fn corrupted(s: u64, _: Size) -> Result<Stat> {
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let x = leaf(&mut rng, &[5], -1.0, 1.0);
    let f = || {
        let y: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        let t = Tensor::from_op(
            "corrupted_double",
            y,
            vec![5],
            vec![x.clone()],
            Box::new(|a| vec![Some(a.grad.iter().map(|g| 2.2 * g).collect())]),
        );
        project(&t, s)
    };
    check(&[x.clone()], &f, &mut rng, 5)
}

fn components(corrupt: bool) -> Vec<Component> {
    let mut all = primitives();
    all.extend(layers());
    all.extend(models());
    if corrupt {
        all.push(("fixture:corrupted_backward", corrupted));
    }
    all
}

/// Runs every component over `seeds` seeds; components are spread over
/// `workers` threads, results are independent of the thread count.
pub fn run(opts: &Options) -> Result<Report> {
    let comps = components(opts.corrupt);
    let size = opts.size;
    let seeds = opts.seeds.max(1);
    let stats: Vec<Result<Stat>> = parallel::map_indexed_bounded(opts.workers, comps.len(), |i| {
        let f = comps[i].1;
        (0..seeds).try_fold(Stat::default(), |acc, s| Ok(acc.merge(f(1000 + s, size)?)))
    });
    let rows = comps
        .iter()
        .zip(stats)
        .map(|((name, _), st)| {
            let st = st?;
            Ok(Row {
                component: name.to_string(),
                max_rel_err: st.max,
                checked: st.checked,
                passed: st.max < TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        size,
        seeds,
        tolerance: TOLERANCE,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_rule_is_caught() {
        let st = corrupted(1, Size::Mini).unwrap();
        assert!(st.max > 0.05);
    }

    #[test]
    fn mini_suite_timing() {
        let t = std::time::Instant::now();
        let r = run(&Options::default()).unwrap();
        eprintln!("{}{:?}", r.table(), t.elapsed());
        assert!(r.passed());
    }

    #[test]
    fn primitives_pass_on_a_few_seeds() {
        for (name, f) in primitives() {
            for s in 0..3 {
                let st = f(s, Size::Mini).unwrap();
                assert!(st.max < TOLERANCE, "{name} seed {s}: {}", st.max);
            }
        }
    }
}
