use std::f64::consts::PI;

use audiofuse::dsp::{
    fft, hz_to_mel, log_mel_image, mel_filterbank, power, resize_bilinear, stft, FrontendConfig, Featurizer, StftConfig,
    Window,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * PI * ((k * t) % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

fn max_rel(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

#[test]
fn fft_matches_naive_dft_on_random_1024_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let x: Vec<Complex64> = (0..1024)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let e = max_rel(&fft(&x).unwrap(), &naive_dft(&x));
        assert!(e < 1e-9, "relative error {e}");
    }
}

#[test]
fn small_closed_forms() {
    let c = |v: &[f64]| v.iter().map(|&r| Complex64::new(r, 0.0)).collect::<Vec<_>>();
    assert_eq!(fft(&c(&[1.0, 0.0, 0.0, 0.0])).unwrap(), c(&[1.0; 4]));
    assert_eq!(fft(&c(&[1.0; 4])).unwrap(), c(&[4.0, 0.0, 0.0, 0.0]));
    assert!(fft(&c(&[1.0; 3])).is_err());
}

#[test]
fn cosine_at_exact_bin() {
    let (n, k) = (64usize, 5usize);
    let x: Vec<f32> = (0..4 * n).map(|i| (2.0 * PI * (k * i) as f64 / n as f64).cos() as f32).collect();
    let cfg = StftConfig {
        n_fft: n,
        hop: n,
        window: Window::Rectangular,
    };
    let s = stft(&x, &cfg).unwrap();
    let p = power(&s);
    assert_eq!(s.frames.len(), 4);
    for (frame, pf) in s.frames.iter().zip(&p.frames) {
        for (b, v) in frame.iter().enumerate() {
            if b == k {
                assert!((v.norm() - n as f64 / 2.0).abs() < 1e-4);
                assert!((pf[b] - (n * n) as f64 / 4.0).abs() < 1e-2);
            } else {
                assert!(v.norm() < 1e-4, "bin {b}: {}", v.norm());
            }
        }
    }
}

#[test]
fn mel_anchor() {
    assert_eq!(hz_to_mel(0.0), 0.0);
    assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
}

#[test]
fn bilinear_hand_case() {
    let out = resize_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 3, 3);
    assert_eq!(out, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
}

fn full_spectrum_energy(frame: &[Complex64], n_fft: usize) -> f64 {
    // Bins above n_fft/2 mirror bins 1..n_fft/2-1 for real input.
    let half = n_fft / 2;
    frame
        .iter()
        .enumerate()
        .map(|(b, v)| if b == 0 || b == half { v.norm_sqr() } else { 2.0 * v.norm_sqr() })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, log_n in 1u32..9) {
        let n = 1usize << log_n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect::<Vec<_>>();
        let (x, y) = (v(), v());
        let mix: Vec<Complex64> = x.iter().zip(&y).map(|(p, q)| p * a + q * b).collect();
        let (fx, fy) = (fft(&x).unwrap(), fft(&y).unwrap());
        let expect: Vec<Complex64> = fx.iter().zip(&fy).map(|(p, q)| p * a + q * b).collect();
        let got = fft(&mix).unwrap();
        let err = got.iter().zip(&expect).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9 * (n as f64));
    }

    #[test]
    fn parseval_per_hann_frame(seed in any::<u64>(), log_n in 4u32..11, extra in 0usize..300) {
        let n_fft = 1usize << log_n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..n_fft + extra).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cfg = StftConfig { n_fft, hop: (n_fft / 4).max(1), window: Window::Hann };
        let s = stft(&x, &cfg).unwrap();
        let w = Window::Hann.coefficients(n_fft);
        prop_assert_eq!(s.frames.len(), (x.len() - n_fft) / cfg.hop + 1);
        for (t, frame) in s.frames.iter().enumerate() {
            let time: f64 = (0..n_fft).map(|i| (x[t * cfg.hop + i] as f64 * w[i]).powi(2)).sum();
            let freq = full_spectrum_energy(frame, n_fft) / n_fft as f64;
            prop_assert!((freq - time).abs() <= 1e-6 * time.max(1.0), "{} vs {}", freq, time);
        }
    }

    #[test]
    fn filterbank_structure(n_mels in 2usize..64, fmin in 0.0f64..200.0, span in 300.0f64..10000.0) {
        let fmax = (fmin + span).min(11025.0);
        let fb = mel_filterbank(22050, 1024, n_mels, fmin, fmax).unwrap();
        prop_assert!(fb.weights.iter().all(|&w| w >= 0.0));
        prop_assert!(fb.centers_hz.windows(2).all(|c| c[1] > c[0]));
        for m in 0..n_mels {
            let nz: Vec<usize> = fb.row(m).iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect();
            prop_assert!(!nz.is_empty());
            prop_assert_eq!(nz.len(), nz[nz.len() - 1] - nz[0] + 1);
        }
        let bin_hz = 22050.0 / 1024.0;
        let lo = (fb.centers_hz[0] / bin_hz).ceil() as usize;
        let hi = (fb.centers_hz[n_mels - 1] / bin_hz).floor() as usize;
        for b in lo..=hi {
            let total: f64 = (0..n_mels).map(|m| fb.row(m)[b]).sum();
            prop_assert!(total > 0.0, "hole at bin {}", b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn image_is_bounded_for_any_length(seed in any::<u64>(), len in 1024usize..20_000) {
        let cfg = FrontendConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let fz = Featurizer::new(cfg.clone()).unwrap();
        let p = power(&stft(&x, &cfg.stft).unwrap());
        let img = log_mel_image(&p, fz.filterbank(), 224).unwrap();
        prop_assert_eq!((img.rows, img.cols, img.image.len()), (224, 224, 224 * 224));
        prop_assert!(img.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
