//! Library metrics against direct-formula oracles.

#[path = "oracle/metrics.rs"]
mod oracle;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdai_core::filter::Plane;
use stdai_core::metrics::{evaluate, mae, pcc, psnr, ssim, Population};
use stdai_core::sample::Mask;
use stdai_core::Tensor;

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// A smooth random field plus noise, so SSIM windows see real structure.
fn map(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let (fx, fy, ph) = (rng.random_range(0.05..0.4), rng.random_range(0.05..0.4), rng.random_range(0.0..6.0));
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f32, (i % n) as f32);
            (0.5 + 0.3 * (fx * x + fy * y + ph).sin() + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)
        })
        .collect()
}

#[test]
fn fifty_random_maps_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (p, t) = (map(&mut rng, 32), map(&mut rng, 32));
        let (pd, td) = (f64s(&p), f64s(&t));
        assert!((psnr(&p, &t, 1.0).unwrap() - oracle::psnr(&pd, &td)).abs() < 1e-6);
        assert!((mae(&p, &t).unwrap() - oracle::mae(&pd, &td)).abs() < 1e-6);
        assert!((pcc(&p, &t).unwrap() - oracle::pcc(&pd, &td)).abs() < 1e-6);
        let s = ssim(&Plane::new(32, 32, p.clone()), &Plane::new(32, 32, t.clone()), None).unwrap();
        let o = oracle::ssim(&pd, &td, 32, 32, |_| true);
        assert!((s - o).abs() < 1e-6, "{s} vs {o}");
    }
}

#[test]
fn unobserved_population_matches_oracle_on_the_complement() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 32;
    for _ in 0..10 {
        let (p, t) = (map(&mut rng, n), map(&mut rng, n));
        let mask = Mask::new(n, n, (0..n * n).map(|i| u8::from((i / n) % 2 == 0 && (i % n) % 2 == 0)).collect()).unwrap();
        let r = evaluate(&Tensor::new(vec![1, n, n], p.clone()).unwrap(), &Tensor::new(vec![1, n, n], t.clone()).unwrap(), &mask, Population::Unobserved)
            .unwrap();
        let keep: Vec<usize> = (0..n * n).filter(|&i| !mask.is_set(i)).collect();
        let pk: Vec<f64> = keep.iter().map(|&i| p[i] as f64).collect();
        let tk: Vec<f64> = keep.iter().map(|&i| t[i] as f64).collect();
        let g = r.per_gene[0];
        assert!((g.psnr - oracle::psnr(&pk, &tk)).abs() < 1e-6);
        assert!((g.mae - oracle::mae(&pk, &tk)).abs() < 1e-6);
        assert!((g.pcc - oracle::pcc(&pk, &tk)).abs() < 1e-6);
        let s = oracle::ssim(&f64s(&p), &f64s(&t), n, n, |i| !mask.is_set(i));
        assert!((g.ssim - s).abs() < 1e-6);
    }
}

#[test]
fn closed_forms() {
    // MSE 0.01 from a constant 0.1 offset.
    let t = vec![0.0f32; 64];
    let p = vec![0.1f32; 64];
    assert!((psnr(&p, &t, 1.0).unwrap() - 20.0).abs() < 1e-6);
    let t: Vec<f32> = (0..64).map(|i| (i % 8) as f32 / 16.0).collect();
    let p: Vec<f32> = t.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&p, &t, 1.0).unwrap() - 20.0).abs() < 1e-5);
    assert!((mae(&p, &t).unwrap() - 0.1).abs() < 1e-7);
    assert_eq!(psnr(&t, &t, 1.0).unwrap(), f64::INFINITY);
    let affine: Vec<f32> = t.iter().map(|v| 2.0 * v + 3.0).collect();
    assert!((pcc(&affine, &t).unwrap() - 1.0).abs() < 1e-9);
    let neg: Vec<f32> = t.iter().map(|v| -v).collect();
    assert!((pcc(&neg, &t).unwrap() + 1.0).abs() < 1e-9);
    let img = Plane::new(16, 16, (0..256).map(|i| ((i * 37) % 17) as f32 / 17.0).collect());
    assert!((ssim(&img, &img, None).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn inverted_binary_phantom_has_negative_ssim() {
    let n = 32;
    let t: Vec<f32> = (0..n * n).map(|i| f32::from(((i / n) / 4 + (i % n) / 4) % 2 == 0)).collect();
    let inv: Vec<f32> = t.iter().map(|v| 1.0 - v).collect();
    let s = ssim(&Plane::new(n, n, inv), &Plane::new(n, n, t), None).unwrap();
    assert!(s < 0.0, "{s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metric_ranges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, t) = (map(&mut rng, 16), map(&mut rng, 16));
        let s = ssim(&Plane::new(16, 16, p.clone()), &Plane::new(16, 16, t.clone()), None).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(mae(&p, &t).unwrap() >= 0.0);
        let c = pcc(&p, &t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
