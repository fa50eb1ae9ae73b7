use audiofuse::autodiff::kernels::gemm;
use audiofuse::autodiff::nn::{conv1d, Padding};
use audiofuse::dsp::{Featurizer, FrontendConfig};
use audiofuse::parallel::{force_sequential, Execution};
use audiofuse::signal_io::{synthesize_pcg, CueMode, SynthSpec};
use audiofuse::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm_256");
    let n = 256;
    let (a, b) = (random(n * n, 1), random(n * n, 2));
    let mut out = vec![0.0f32; n * n];
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| gemm(exec, n, n, n, &a, false, &b, false, &mut out, false))
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv1d_8x2500x16_to_32");
    g.sample_size(20);
    let x = Tensor::new(random(8 * 2500 * 16, 3), &[8, 2500, 16]).unwrap();
    let w = Tensor::new(random(16 * 16 * 32, 4), &[16, 16, 32]).unwrap();
    let bias = Tensor::zeros(&[32]);
    for (name, exec) in MODES {
        force_sequential(exec == Execution::Sequential);
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| conv1d(&x, &w, &bias, 4, Padding::Same).unwrap())
        });
    }
    force_sequential(false);
    g.finish();
}

fn bench_featurize(c: &mut Criterion) {
    let mut g = c.benchmark_group("featurize_16_desk_clips");
    g.sample_size(10);
    let clips: Vec<_> = synthesize_pcg(&SynthSpec::new(8, 5, CueMode::Both))
        .unwrap()
        .into_iter()
        .map(|c| c.waveform)
        .collect();
    let fz = Featurizer::new(FrontendConfig::desk()).unwrap();
    for (name, workers) in [("sequential", 1), ("parallel", 4)] {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| fz.featurize_all(&clips, workers).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_featurize);
criterion_main!(benches);
