use proptest::prelude::*;
use streamdiff_core::tensor::{matmul, rms_norm, softmax_lastdim};
use streamdiff_core::{Rng, Tensor};

fn oracle_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
        }
    }
    out
}

fn filled(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(&mut Rng::new(seed), shape)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..12, k in 1usize..40, n in 1usize..12, seed in any::<u64>()) {
        let a = filled(seed, &[m, k]);
        let b = filled(seed ^ 0x9e37, &[k, n]);
        let c = matmul(&a, &b).unwrap();
        prop_assert_eq!(c.shape(), &[m, n]);
        let want = oracle_matmul(a.data(), b.data(), m, k, n);
        for (got, want) in c.data().iter().zip(&want) {
            prop_assert!((*got as f64 - want).abs() <= 1e-4 * (1.0 + want.abs()) * k as f64);
        }
    }

    #[test]
    fn softmax_matches_oracle(rows in 1usize..6, cols in 1usize..20, shift in -50.0f32..50.0, seed in any::<u64>()) {
        let x = filled(seed, &[rows, cols]).scale(4.0);
        let y = softmax_lastdim(&x).unwrap();
        let shifted = softmax_lastdim(&x.map(|v| v + shift)).unwrap();
        for (r, row) in x.data().chunks(cols).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let got = &y.data()[r * cols..(r + 1) * cols];
            let total: f32 = got.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            for (c, &v) in row.iter().enumerate() {
                let want = (v as f64 - max).exp() / z;
                prop_assert!((got[c] as f64 - want).abs() < 1e-6);
                prop_assert!((shifted.data()[r * cols + c] - got[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rms_norm_matches_oracle(rows in 1usize..6, cols in 1usize..32, seed in any::<u64>()) {
        let x = filled(seed, &[rows, cols]).scale(3.0);
        let g = filled(seed.wrapping_add(1), &[cols]);
        let y = rms_norm(&x, &g).unwrap();
        for (r, row) in x.data().chunks(cols).enumerate() {
            let ms: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            for c in 0..cols {
                let want = row[c] as f64 * inv * g.data()[c] as f64;
                prop_assert!((y.data()[r * cols + c] as f64 - want).abs() < 1e-5 * (1.0 + want.abs()));
            }
        }
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(matmul(&a, &b).is_err());
}

#[test]
fn softmax_of_empty_last_dim_errors() {
    assert!(softmax_lastdim(&Tensor::zeros(&[3, 0])).is_err());
}

#[test]
fn rms_norm_of_zero_row_stays_finite() {
    let y = rms_norm(&Tensor::zeros(&[2, 8]), &Tensor::full(&[8], 1.0)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn randn_statistics() {
    let x = Tensor::randn(&mut Rng::new(2024), &[100_000]);
    let n = x.len() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "var {var}");
    assert!(x.all_finite());
}

#[test]
fn reseeding_reproduces_the_stream() {
    let a = Tensor::randn(&mut Rng::new(77), &[257]);
    let b = Tensor::randn(&mut Rng::new(77), &[257]);
    let c = Tensor::randn(&mut Rng::new(78), &[257]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}
