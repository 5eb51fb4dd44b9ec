use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn perfect_prediction() {
    let t = pointwise_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(t.mse, 0.0);
    assert_eq!(t.mae, 0.0);
    assert_eq!(t.bias, 0.0);
    assert_eq!(t.r2, Some(1.0));
    assert_eq!(t.psnr, f64::INFINITY);
    assert!((t.ssim - 1.0).abs() < 1e-12);
    assert!((t.pcc.unwrap() - 1.0).abs() < 1e-12);
    assert!(t.csv_row().contains("inf"));
}

#[test]
fn constant_truth_leaves_r2_undefined() {
    let t = pointwise_metrics(&[2.0, 0.0], &[1.0, 1.0]).unwrap();
    assert_eq!(t.mse, 1.0);
    assert_eq!(t.bias, 0.0);
    assert_eq!(t.std_error, 1.0);
    assert_eq!(t.r2, None);
    assert_eq!(t.pcc, None);
    assert_eq!(t.cv, Some(1.0));
    assert!(t.csv_row().contains("undefined"));
    assert_eq!(pointwise_metrics(&[1.0, -1.0], &[1.0, -1.0]).unwrap().cv, None);
}

#[test]
fn bad_inputs() {
    assert!(pointwise_metrics(&[], &[]).is_err());
    assert!(pointwise_metrics(&[1.0], &[1.0, 2.0]).is_err());
    assert!(matches!(ssim(&[1.0; 5], &[1.0; 5], 6), Err(Error::Config(_))));
    assert!(pattern_correlation(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    assert!(power_spectrum(&[vec![1.0; 3]]).is_err());
    assert!(power_spectrum(&[vec![1.0; 8], vec![1.0; 6]]).is_err());
    assert!(significance_mask(&[vec![0.0; 5]], 0.05).is_err());
    assert!(matches!(significance_mask(&[vec![1.0; 10]], 0.05), Err(Error::Degenerate(_))));
}

#[test]
fn ssim_cases() {
    let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.4).sin()).collect();
    assert!((ssim(&x, &x, 7).unwrap() - 1.0).abs() < 1e-12);
    // zero mean over every window of 7
    let z: Vec<f64> = (0..20).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 7.0).sin()).collect();
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    assert!(ssim(&z, &neg, 7).unwrap() < 0.0);
    assert_eq!(ssim(&[3.0; 10], &[3.0; 10], 7).unwrap(), 1.0);
}

#[test]
fn correlations() {
    let a = [1.0, 3.0, 2.0, 5.0];
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((pattern_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert!((pattern_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
    let series_a = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]];
    let series_b = vec![vec![2.0, 1.0], vec![4.0, 2.0], vec![8.0, 3.0]];
    let tcc = temporal_correlation(&series_a, &series_b).unwrap();
    assert!((tcc[0].unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(tcc[1], None);
}

#[test]
fn spectrum_cases() {
    let l = 32;
    let s = power_spectrum(&[vec![2.5; l]]).unwrap();
    assert_eq!(s.power.len(), l / 2 + 1);
    assert!(s.power[1..].iter().all(|p| *p < 1e-20));
    let sine: Vec<f64> = (0..l).map(|j| (2.0 * std::f64::consts::PI * 3.0 * j as f64 / l as f64).sin()).collect();
    let s = power_spectrum(&[sine.clone()]).unwrap();
    for (k, p) in s.power.iter().enumerate() {
        if k != 3 {
            assert!(s.power[3] >= 1e3 * p);
        }
    }
    let total: f64 = s.power.iter().sum();
    let mean_sq = sine.iter().map(|v| v * v).sum::<f64>() / l as f64;
    assert!((total - mean_sq * l as f64).abs() < 1e-12);
    assert_eq!(s.bin_sizes.iter().sum::<usize>(), l);
    assert!(s.to_csv().starts_with("k,power,bin_size\n0,"));
}

#[test]
fn significance_cases() {
    assert_eq!(significance_mask(&[vec![0.0; 20]], 0.05).unwrap(), vec![false]);
    assert!((effective_sample_size(90, 0.5) - 30.0).abs() < 1e-12);
    let shifted: Vec<f64> = (0..50).map(|i| 5.0 + (i as f64).sin()).collect();
    assert_eq!(significance_mask(&[shifted], 0.05).unwrap(), vec![true]);
    assert!(significance_mask(&[vec![0.0; 20]], 1.5).is_err());
    assert_eq!(mask_csv(&[true, false]), "1,0");
}

#[test]
fn white_noise_false_positive_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let series: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..120).map(|_| rng.sample(normal)).collect())
        .collect();
    let rate = significance_mask(&series, 0.05).unwrap().iter().filter(|m| **m).count() as f64 / 1000.0;
    assert!((rate - 0.05).abs() <= 0.02, "rate {rate}");
}

fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n))
}

proptest! {
    #[test]
    fn identities_hold((p, t) in (8usize..40).prop_flat_map(vecs)) {
        let m = pointwise_metrics(&p, &t).unwrap();
        prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-10);
        prop_assert!((m.bias * m.bias + m.std_error * m.std_error - m.mse).abs() <= 1e-10);
        prop_assert!((-1.0..=1.0).contains(&m.ssim));
        if let Some(c) = m.pcc {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn pcc_is_affine_invariant((a, b) in (4usize..30).prop_flat_map(vecs), s in 0.1f64..10.0, o in -5.0f64..5.0) {
        let scaled: Vec<f64> = a.iter().map(|v| s * v + o).collect();
        if let (Some(x), Some(y)) = (pearson(&a, &b), pearson(&scaled, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_decreases_with_mse(t in prop::collection::vec(-10.0f64..10.0, 6..20), e in 0.01f64..1.0) {
        let p1: Vec<f64> = t.iter().map(|v| v + e).collect();
        let p2: Vec<f64> = t.iter().map(|v| v + 2.0 * e).collect();
        let a = pointwise_metrics(&p1, &t).unwrap();
        let b = pointwise_metrics(&p2, &t).unwrap();
        prop_assert!(b.psnr < a.psnr);
    }
}

#[test]
fn metric_table_averages_ssim_over_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<f64> = (0..40).map(|_| rng.gen::<f64>()).collect();
    let t: Vec<f64> = (0..40).map(|_| rng.gen::<f64>()).collect();
    let m = metric_table(&p, &t, 10).unwrap();
    let rows: f64 = (0..4).map(|r| ssim(&p[r * 10..r * 10 + 10], &t[r * 10..r * 10 + 10], 7).unwrap()).sum();
    assert!((m.ssim - rows / 4.0).abs() < 1e-15);
    assert!(metric_table(&p, &t, 7).is_err());
}
