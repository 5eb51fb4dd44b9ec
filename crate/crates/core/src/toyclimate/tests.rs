use super::*;
use crate::artifact::{self, Header, Version};
use proptest::prelude::*;

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        windows_per_epoch: 40,
        train_epochs: vec![0, 1],
        test_epochs: vec![2],
        sample_stride: 2,
        subsample: 1,
    }
}

#[test]
fn zero_coupling_slow_step_equals_free_step() {
    let cfg = SystemConfig {
        coupling: 0.0,
        ..SystemConfig::default()
    };
    let mut s = initial_state(&cfg, 3);
    for _ in 0..50 {
        let next = step_truth(&s, &cfg).unwrap();
        assert_eq!(next.slow, step_free(&s.slow, &cfg).unwrap());
        s = next;
    }
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = SystemConfig {
        spinup_steps: 2000,
        ..SystemConfig::default()
    };
    let a = reference_run(&cfg, 11, 20).unwrap();
    let b = reference_run(&cfg, 11, 20).unwrap();
    assert_eq!(a, b);
    let c = reference_run(&cfg, 12, 20).unwrap();
    assert_ne!(a.snapshots[1], c.snapshots[1]);
    let x0 = &a.snapshots[0];
    assert_eq!(free_run(&cfg, x0, 10).unwrap(), free_run(&cfg, x0, 10).unwrap());
}

fn integrate_free(x0: &[f64], forcing: f64, dt: f64, steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = rk4_step(&x, 0.0, dt, |y, _| free_tendency(y, forcing));
    }
    x
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn rk4_error_shrinks_sixteenfold_per_halving() {
    let x0: Vec<f64> = (0..12).map(|k| 8.0 + (k as f64 * 0.7).sin()).collect();
    let (dt, steps) = (0.02, 25);
    let reference = integrate_free(&x0, 8.0, dt / 4.0, steps * 4);
    let coarse = max_diff(&integrate_free(&x0, 8.0, dt, steps), &reference);
    let fine = max_diff(&integrate_free(&x0, 8.0, dt / 2.0, steps * 2), &reference);
    let ratio = coarse / fine;
    assert!((14.0..=20.0).contains(&ratio), "error ratio {ratio}");

    let cfg = SystemConfig {
        sites: 8,
        fast_per_site: 4,
        ..SystemConfig::default()
    };
    let s0 = initial_state(&cfg, 5);
    let run = |dt: f64, n: usize| {
        let c = SystemConfig { dt, ..cfg.clone() };
        let mut s = s0.clone();
        for _ in 0..n {
            s = step_truth(&s, &c).unwrap();
        }
        s.slow
    };
    let reference = run(0.0005, 400);
    let coarse = max_diff(&run(0.002, 100), &reference);
    let fine = max_diff(&run(0.001, 200), &reference);
    let ratio = coarse / fine;
    assert!((14.0..=20.0).contains(&ratio), "two-scale error ratio {ratio}");
}

#[test]
fn unforced_origin_is_fixed() {
    let cfg = SystemConfig {
        forcing: 0.0,
        ..SystemConfig::default()
    };
    let x = vec![0.0; cfg.sites];
    assert_eq!(free_run(&cfg, &x, 5).unwrap().last().unwrap(), &x);
}

#[test]
fn nudging_arithmetic() {
    assert_eq!(nudging_tendency(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), vec![0.0, 0.0]);
    assert_eq!(nudging_tendency(&[0.0], &[3.0], 6.0).unwrap(), vec![0.5]);
    assert!(matches!(nudging_tendency(&[0.0], &[1.0], 0.0), Err(Error::Config(_))));
    assert!(matches!(nudging_tendency(&[0.0], &[1.0], -1.0), Err(Error::Config(_))));
    assert!(nudging_tendency(&[0.0], &[1.0, 2.0], 1.0).is_err());
}

#[test]
fn relaxation_gap_decays_exponentially() {
    let (a, tau, gap0) = (2.0, 0.5, 3.0);
    let steps = 100;
    let dt = tau / steps as f64;
    let mut x = vec![a - gap0];
    for _ in 0..steps {
        x = rk4_step(&x, 0.0, dt, |y, _| nudging_tendency(y, &[a], tau).unwrap());
    }
    let gap = a - x[0];
    let expected = gap0 * (-1.0f64).exp();
    assert!((gap - expected).abs() <= 0.02 * expected);
}

#[test]
fn weak_nudging_matches_free_run() {
    let cfg = SystemConfig {
        spinup_steps: 2000,
        ..SystemConfig::default()
    };
    let reference = reference_run(&cfg, 4, 10).unwrap();
    let weak = SystemConfig { tau: 1e12, ..cfg.clone() };
    let nudged = run_nudged(&weak, &reference, 10).unwrap();
    let free = free_run(&cfg, &reference.snapshots[0], 10).unwrap();
    for (a, b) in nudged.boundaries.iter().zip(&free) {
        assert!(max_diff(a, b) < 1e-8);
    }
}

#[test]
fn archived_tendency_is_window_mean() {
    let cfg = SystemConfig {
        spinup_steps: 2000,
        ..SystemConfig::default()
    };
    let reference = reference_run(&cfg, 8, 30).unwrap();
    let run = run_nudged(&cfg, &reference, 30).unwrap();
    let w = cfg.window;
    for p in &run.pairs {
        let steps = &run.step_tendencies[p.window * w..(p.window + 1) * w];
        for k in 0..cfg.sites {
            let mut sum = 0.0;
            for s in steps {
                sum += s[k];
            }
            assert_eq!(p.tendency[k], sum / w as f64);
        }
        assert_eq!(p.state, run.boundaries[p.window]);
    }
}

#[test]
fn nudged_run_tracks_reference() {
    let cfg = SystemConfig::default();
    let horizon = 100;
    for seed in 0..5 {
        let reference = reference_run(&cfg, seed, horizon).unwrap();
        let nudged = run_nudged(&cfg, &reference, horizon).unwrap();
        let free = free_run(&cfg, &reference.snapshots[0], horizon).unwrap();
        let nudged_rmse = trajectory_rmse(&nudged.boundaries, &reference.snapshots).unwrap();
        let free_rmse = trajectory_rmse(&free, &reference.snapshots).unwrap();
        assert!(nudged_rmse <= 0.2 * free_rmse, "seed {seed}: {nudged_rmse} vs {free_rmse}");
    }
}

/// RMS of archived tendencies without slow-fast coupling, relative to the
/// normalization scale of the coupled system's tendencies.
fn residual_tendency_ratio(seed: u64, windows: usize) -> f64 {
    let coupled = SystemConfig::default();
    let reference = reference_run(&coupled, seed, windows).unwrap();
    let scale = run_nudged(&coupled, &reference, windows)
        .unwrap()
        .pairs
        .iter()
        .flat_map(|p| p.tendency.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let exact = SystemConfig {
        coupling: 0.0,
        ..coupled
    };
    let reference = reference_run(&exact, seed, windows).unwrap();
    let all: Vec<f64> = run_nudged(&exact, &reference, windows)
        .unwrap()
        .pairs
        .into_iter()
        .flat_map(|p| p.tendency)
        .collect();
    rms(&all) / scale
}

#[test]
fn exact_model_needs_no_correction() {
    let ratio = residual_tendency_ratio(1, 200);
    assert!(ratio < 5e-3, "ratio {ratio}");
}

#[test]
fn nudging_contracts_toward_reference() {
    // Contraction holds while 1/tau exceeds the tangent growth rate of the
    // one-scale model (about 20 per unit time at F = 10).
    let base = SystemConfig {
        coupling: 0.0,
        ..SystemConfig::default()
    };
    for tau in [base.tau, base.tau / 2.0] {
        let cfg = SystemConfig { tau, ..base.clone() };
        let truth = reference_run(&cfg, 2, 8).unwrap();
        let x0: Vec<f64> = truth.snapshots[0]
            .iter()
            .enumerate()
            .map(|(k, v)| v + if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let run = run_nudged_from(&cfg, &truth, &x0, 8).unwrap().boundaries;
        let gaps: Vec<f64> = run
            .iter()
            .zip(&truth.snapshots)
            .map(|(m, p)| rms(&m.iter().zip(p).map(|(m, p)| m - p).collect::<Vec<_>>()))
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] < w[0], "tau {tau}: gaps {gaps:?}");
        }
    }
}

#[test]
fn horizon_beyond_reference_is_rejected() {
    let cfg = SystemConfig {
        spinup_steps: 2000,
        ..SystemConfig::default()
    };
    let reference = reference_run(&cfg, 1, 3).unwrap();
    assert!(matches!(run_nudged(&cfg, &reference, 4), Err(Error::Config(_))));
}

#[test]
fn masked_sites_receive_no_nudging() {
    let cfg = SystemConfig {
        spinup_steps: 2000,
        masked_sites: vec![0, 5],
        ..SystemConfig::default()
    };
    let reference = reference_run(&cfg, 1, 5).unwrap();
    let run = run_nudged(&cfg, &reference, 5).unwrap();
    for p in &run.pairs {
        assert_eq!(p.tendency[0], 0.0);
        assert_eq!(p.tendency[5], 0.0);
        assert_ne!(p.tendency[1], 0.0);
    }
}

#[test]
fn invalid_configs_list_every_problem() {
    let cfg = SystemConfig {
        dt: 0.0,
        tau: -1.0,
        window: 0,
        spinup_steps: 10,
        ..SystemConfig::default()
    };
    let msg = cfg.validate().unwrap_err().to_string();
    for needle in ["dt", "tau", "window", "transient"] {
        assert!(msg.contains(needle), "{msg}");
    }
}

fn stats_for(lo: f64, hi: f64) -> NormalizationStats {
    NormalizationStats {
        channels: vec!["x".into()],
        state_min: vec![lo],
        state_max: vec![hi],
        tendency_min: vec![-hi.abs()],
        tendency_max: vec![hi.abs()],
    }
}

#[test]
fn normalization_endpoints() {
    let stats = stats_for(-2.0, 6.0);
    let f = Field::slow(&[-2.0, 6.0, 2.0]).unwrap();
    let n = normalize(&f, &stats, Quantity::State).unwrap();
    assert_eq!(n.values.data(), &[-1.0, 1.0, 0.0]);
    let other = Field::new(vec!["q".into()], Tensor::zeros([1, 3])).unwrap();
    assert!(matches!(normalize(&other, &stats, Quantity::State), Err(Error::Config(_))));
}

#[test]
fn constant_channel_is_degenerate() {
    let s = vec![1.0; 6];
    let t = vec![0.5, -0.5, 0.1, 0.2, 0.0, 0.3];
    let err = NormalizationStats::from_samples(&["x".into()], 6, [s.as_slice()].into_iter(), [t.as_slice()].into_iter())
        .unwrap_err();
    assert!(err.to_string().contains("degenerate channel"));
}

proptest! {
    #[test]
    fn normalization_round_trip(
        lo in -50.0f64..0.0,
        span in 0.1f64..100.0,
        values in prop::collection::vec(-100.0f64..100.0, 1..40),
    ) {
        let stats = stats_for(lo, lo + span);
        let f = Field::slow(&values).unwrap();
        for q in [Quantity::State, Quantity::Tendency] {
            let back = denormalize(&normalize(&f, &stats, q).unwrap(), &stats, q).unwrap();
            for (a, b) in back.values.data().iter().zip(&values) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}

#[test]
fn dataset_splits_and_stats() {
    let cfg = SystemConfig::default();
    let (train, test) = build_dataset(&cfg, &small_spec(), 6, "cfg").unwrap();
    assert_eq!(train.len(), 40);
    assert_eq!(test.len(), 20);
    assert!(train.samples.iter().all(|s| s.epoch < 2));
    assert!(test.samples.iter().all(|s| s.epoch == 2));
    assert_eq!(train.stats, test.stats);

    let min_max = |ds: &Dataset| {
        let v: Vec<f64> = ds.samples.iter().flat_map(|s| s.state.clone()).collect();
        (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    };
    let (lo, hi) = min_max(&train);
    assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    let t_abs = train
        .samples
        .iter()
        .flat_map(|s| s.tendency.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    assert!((t_abs - 1.0).abs() < 1e-12);

    // statistics recomputed on the test split differ from the header
    let phys: Vec<(Vec<f64>, Vec<f64>)> = test
        .samples
        .iter()
        .map(|s| {
            (
                test.stats.denormalize_values(Quantity::State, &s.state),
                test.stats.denormalize_values(Quantity::Tendency, &s.tendency),
            )
        })
        .collect();
    let test_stats = NormalizationStats::from_samples(
        &test.channels,
        test.length,
        phys.iter().map(|p| p.0.as_slice()),
        phys.iter().map(|p| p.1.as_slice()),
    )
    .unwrap();
    assert_ne!(test_stats, train.stats);
}

#[test]
fn overlapping_splits_are_rejected() {
    let spec = DatasetSpec {
        test_epochs: vec![1],
        ..small_spec()
    };
    assert!(matches!(build_dataset(&SystemConfig::default(), &spec, 1, "c"), Err(Error::Config(_))));
    let spec = DatasetSpec {
        subsample: 3,
        ..small_spec()
    };
    assert!(spec.validate().is_err());
}

#[test]
fn dataset_bytes_are_deterministic_and_round_trip() {
    let cfg = SystemConfig::default();
    let spec = DatasetSpec {
        subsample: 2,
        ..small_spec()
    };
    let (a, _) = build_dataset(&cfg, &spec, 9, "abc").unwrap();
    let (b, _) = build_dataset(&cfg, &spec, 9, "abc").unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.length, 18);
    let back = Dataset::from_bytes(&a.to_bytes()).unwrap();
    assert_eq!(back, a);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.nodc");
    a.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), a);

    let bytes = a.to_bytes();
    assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Digest { .. })));
}

#[test]
fn older_dataset_version_migrates() {
    let cfg = SystemConfig::default();
    let (a, _) = build_dataset(&cfg, &small_spec(), 2, "abc").unwrap();
    let current = artifact::decode(&a.to_bytes(), DATASET_MAGIC, DATASET_VERSION).unwrap();
    let mut h = Header::default();
    for (k, v) in &current.header.entries {
        if k != "subsample" {
            h.push(k, v);
        }
    }
    let old = artifact::encode(DATASET_MAGIC, Version::new(1, 0), &h, &current.payload);
    let back = Dataset::from_bytes(&old).unwrap();
    assert_eq!(back.subsample, 1);
    assert_eq!(back.samples, a.samples);
    assert_eq!(back.migration.as_deref(), Some("migrated NODC1 1.0 -> 1.1"));

    let newer = artifact::encode(DATASET_MAGIC, Version::new(1, 2), &current.header, &current.payload);
    assert!(matches!(Dataset::from_bytes(&newer), Err(Error::Version(_))));
}
