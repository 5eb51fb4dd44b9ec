use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t3(b: usize, c: usize, l: usize, v: &[f64]) -> Tensor {
    Tensor::new([b, c, l], v.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct nested-loop cross-correlation with explicit zero padding.
fn conv_oracle(x: &[f64], w: &[f64], pad: usize, stride: usize) -> Vec<f64> {
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(x);
    padded.extend(std::iter::repeat(0.0).take(pad));
    let mut out = Vec::new();
    let mut t = 0;
    while t + w.len() <= padded.len() {
        out.push((0..w.len()).map(|k| padded[t + k] * w[k]).sum());
        t += stride;
    }
    out
}

#[test]
fn conv1d_examples() {
    let x = t3(1, 1, 3, &[1.0, 2.0, 3.0]);
    let id = t3(1, 1, 3, &[0.0, 1.0, 0.0]);
    let y = conv1d(&x, &id, None, 1, 1, PadMode::Zero).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);

    let w = t3(1, 1, 3, &[1.0, 0.0, -1.0]);
    let y = conv1d(&x, &w, None, 1, 1, PadMode::Zero).unwrap();
    let expect = conv_oracle(&[1.0, 2.0, 3.0], &[1.0, 0.0, -1.0], 1, 1);
    assert_eq!(expect, vec![-2.0, -2.0, 2.0]);
    assert_eq!(y.data(), expect.as_slice());

    let x = t3(1, 1, 4, &[1.0; 4]);
    let w = t3(1, 1, 2, &[1.0, 1.0]);
    let y = conv1d(&x, &w, None, 2, 0, PadMode::Zero).unwrap();
    assert_eq!(conv_oracle(&[1.0; 4], &[1.0, 1.0], 0, 2), vec![2.0, 2.0]);
    assert_eq!(y.data(), &[2.0, 2.0]);
}

#[test]
fn conv1d_matches_oracle_on_random_multichannel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5), (3, 2, 4)] {
        let x = random(&[2, 3, 11], &mut rng);
        let w = random(&[4, 3, k], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv1d(&x, &w, Some(&b), stride, pad, PadMode::Zero).unwrap();
        for bi in 0..2 {
            for co in 0..4 {
                let mut acc = vec![b.data()[co]; y.shape()[2]];
                for ci in 0..3 {
                    let o = conv_oracle(x.row(bi, ci), &w.data()[(co * 3 + ci) * k..(co * 3 + ci + 1) * k], pad, stride);
                    for (a, v) in acc.iter_mut().zip(o) {
                        *a += v;
                    }
                }
                for (a, v) in acc.iter().zip(y.row(bi, co)) {
                    assert!((a - v).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv1d_errors() {
    let x = t3(1, 2, 4, &[0.0; 8]);
    let w = t3(1, 3, 3, &[0.0; 9]);
    assert!(matches!(conv1d(&x, &w, None, 1, 1, PadMode::Zero), Err(crate::Error::Shape(_))));
    let w = t3(1, 2, 3, &[0.0; 6]);
    assert!(conv1d(&x, &w, None, 0, 1, PadMode::Zero).is_err());
}

#[test]
fn circular_padding_wraps() {
    let x = t3(1, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
    let w = t3(1, 1, 3, &[1.0, 0.0, 0.0]);
    let y = conv1d(&x, &w, None, 1, 1, PadMode::Circular).unwrap();
    assert_eq!(y.data(), &[4.0, 1.0, 2.0, 3.0]);
}

#[test]
fn conv_transpose_examples() {
    let x = t3(1, 1, 2, &[1.0, 2.0]);
    let w = t3(1, 1, 2, &[1.0, 1.0]);
    let y = conv_transpose1d(&x, &w, None, 2).unwrap();
    // scatter-add oracle
    let mut expect = vec![0.0; 4];
    for (i, xv) in [1.0, 2.0].iter().enumerate() {
        for (k, wv) in [1.0, 1.0].iter().enumerate() {
            expect[i * 2 + k] += xv * wv;
        }
    }
    assert_eq!(y.data(), expect.as_slice());
    assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);

    let y = conv_transpose1d(&t3(1, 1, 1, &[5.0]), &t3(1, 1, 1, &[1.0]), None, 1).unwrap();
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 3, 8], &mut rng);
    let w = random(&[3, 5, 3], &mut rng);
    let tx = conv_transpose1d(&x, &w, None, 2).unwrap();
    let y = random(tx.shape(), &mut rng);
    let cy = conv1d(&y, &w, None, 2, 0, PadMode::Zero).unwrap();
    assert_eq!(cy.shape(), x.shape());
    assert!((tx.dot(&y) - x.dot(&cy)).abs() < 1e-12);
}

#[test]
fn pooling_examples() {
    let x = t3(1, 1, 4, &[1.0, 3.0, 2.0, 0.0]);
    assert_eq!(pool1d(&x, PoolKind::Max, 2, 2).unwrap().data(), &[3.0, 2.0]);
    assert_eq!(pool1d(&x, PoolKind::Avg, 2, 2).unwrap().data(), &[2.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.leaf(t3(1, 1, 2, &[2.0, 2.0]), true);
    let p = tape.pool1d(v, PoolKind::Max, 2, 2).unwrap();
    assert_eq!(tape.value(p).data(), &[2.0]);
    let z = tape.constant(Tensor::zeros([1, 1, 1]));
    let loss = tape.mse(p, z).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(v).unwrap().data();
    assert!(g[0] != 0.0 && g[1] == 0.0);

    assert!(pool1d(&t3(1, 1, 2, &[0.0; 2]), PoolKind::Max, 3, 1).is_err());
}

#[test]
fn upsample_examples() {
    let y = upsample_linear1d(&t3(1, 1, 2, &[0.0, 2.0]), 2).unwrap();
    // coordinate formula: src = (i + 0.5)/2 - 0.5 clamped to [0, 1]
    let oracle: Vec<f64> = (0..4)
        .map(|i| {
            let s: f64 = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
            2.0 * s
        })
        .collect();
    assert_eq!(oracle, vec![0.0, 0.5, 1.5, 2.0]);
    assert_eq!(y.data(), oracle.as_slice());

    for factor in [2, 3, 4] {
        let y = upsample_linear1d(&t3(1, 1, 5, &[3.5; 5]), factor).unwrap();
        assert!(y.data().iter().all(|v| (*v - 3.5).abs() < 1e-15));
    }
    assert_eq!(upsample_linear1d(&t3(1, 1, 1, &[7.0]), 2).unwrap().data(), &[7.0, 7.0]);
    assert!(upsample_linear1d(&t3(1, 1, 1, &[7.0]), 1).is_err());
}

#[test]
fn pixel_shuffle_examples() {
    let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
    let x = t3(1, 2, 2, &[a, b, c, d]);
    let y = pixel_shuffle1d(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4]);
    assert_eq!(y.data(), &[a, c, b, d]);
    assert_eq!(pixel_unshuffle1d(&y, 2).unwrap(), x);
    assert_eq!(pixel_shuffle1d(&x, 1).unwrap(), x);
    assert!(pixel_shuffle1d(&t3(1, 3, 2, &[0.0; 6]), 2).is_err());
}

#[test]
fn batch_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([2, 1, 3], 5.0), false);
    let g = tape.leaf(Tensor::full([1], 1.0), true);
    let b = tape.leaf(Tensor::full([1], 4.0), true);
    let (y, _) = tape.batch_norm(x, g, b, &[0.0], &[1.0], Mode::Train, BN_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v - 4.0).abs() < 1e-12));

    let x = tape.leaf(t3(1, 1, 2, &[-1.0, 1.0]), false);
    let (y, _) = tape.batch_norm(x, g, b, &[0.0], &[1.0], Mode::Train, 0.0).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);

    let x1 = tape.leaf(t3(1, 1, 1, &[2.0]), false);
    assert!(tape.batch_norm(x1, g, b, &[0.0], &[1.0], Mode::Train, BN_EPS).is_err());
}

#[test]
fn batch_norm_eval_reproduces_train_after_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random(&[4, 3, 6], &mut rng);
    let gamma = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    let mut stats = RunningStats::new(3);
    let mut train_out = None;
    for _ in 0..400 {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let g = tape.constant(gamma.clone());
        let b = tape.constant(beta.clone());
        let (y, s) = tape
            .batch_norm(x, g, b, &stats.mean, &stats.var, Mode::Train, BN_EPS)
            .unwrap();
        stats.update(&s.unwrap());
        train_out = Some(tape.value(y).clone());
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let g = tape.constant(gamma);
    let b = tape.constant(beta);
    let (y, s) = tape
        .batch_norm(x, g, b, &stats.mean, &stats.var, Mode::Eval, BN_EPS)
        .unwrap();
    assert!(s.is_none());
    let train_out = train_out.unwrap();
    for (a, e) in tape.value(y).data().iter().zip(train_out.data()) {
        assert!((a - e).abs() < 1e-6);
    }
}

#[test]
fn elementwise_examples() {
    assert_eq!(relu(&t3(1, 1, 3, &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.leaf(t3(1, 1, 3, &[1.0, 2.0, 3.0]), false);
    let d = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.value(d).data(), &[1.0, 2.0, 3.0]);
    let d = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(d).data(), &[1.0, 2.0, 3.0]);
    let d = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    assert!(tape
        .value(d)
        .data()
        .iter()
        .zip([1.0, 2.0, 3.0])
        .all(|(v, o)| *v == 0.0 || (*v - 2.0 * o).abs() < 1e-15));

    let a = Tensor::zeros([1, 2, 4]);
    let b = Tensor::zeros([1, 3, 4]);
    assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 5, 4]);
    assert!(concat_channels(&[&a, &Tensor::zeros([1, 3, 5])]).is_err());

    let x = tape.leaf(t3(1, 1, 2, &[1.0, -1.0]), false);
    let y = tape.affine(x, 1.0, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
}

#[test]
fn mse_examples_and_gradient() {
    let a = t3(1, 1, 2, &[2.0, 0.0]);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert_eq!(mse(&a, &t3(1, 1, 2, &[1.0, 1.0])).unwrap(), 1.0);
    assert!(mse(&a, &Tensor::zeros([1, 1, 3])).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random(&[2, 2, 5], &mut rng);
    let t = random(&[2, 2, 5], &mut rng);
    let r = gradient_check(&[p, t], |tape, v| tape.mse(v[0], v[1]), 1e-6, &GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn adam_first_step_closed_form() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new([1], vec![0.0]).unwrap(), true).unwrap();
    let mut st = OptimizerState::new(&store, 1e-3, 0.0);
    adam_step(&mut store, &[Some(Tensor::new([1], vec![1.0]).unwrap())], &mut st).unwrap();
    let dw = store.value(0).data()[0];
    assert!((dw + 1e-3).abs() < 1e-6);
    assert_eq!(st.step(), 1);
}

#[test]
fn adam_zero_gradient_is_noop_and_deterministic() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(), true).unwrap();
    store.insert("rm", Tensor::new([1], vec![0.0]).unwrap(), false).unwrap();
    let before = store.clone();
    let mut st = OptimizerState::new(&store, 5e-4, 0.0);
    adam_step(&mut store, &[Some(Tensor::zeros([3])), None], &mut st).unwrap();
    assert_eq!(store, before);

    let g = vec![Some(Tensor::new([3], vec![0.3, -0.1, 0.7]).unwrap()), None];
    let (mut s1, mut s2) = (before.clone(), before.clone());
    let (mut o1, mut o2) = (OptimizerState::new(&s1, 5e-4, 1e-5), OptimizerState::new(&s2, 5e-4, 1e-5));
    adam_step(&mut s1, &g, &mut o1).unwrap();
    adam_step(&mut s2, &g, &mut o2).unwrap();
    for (a, b) in s1.value(0).data().iter().zip(s2.value(0).data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn adam_missing_gradient_is_an_error() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::zeros([2]), true).unwrap();
    let mut st = OptimizerState::new(&store, 1e-3, 0.0);
    assert!(matches!(
        adam_step(&mut store, &[None], &mut st),
        Err(crate::Error::MissingGradient(_))
    ));
}

#[test]
fn parameter_blob_round_trip() {
    let mut store = ParameterStore::new();
    store.insert("enc.w", Tensor::new([2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true).unwrap();
    store.insert("enc.b", Tensor::new([2], vec![-0.5, 0.25]).unwrap(), true).unwrap();
    store.insert("bn.rm", Tensor::new([2], vec![0.0, 1.0]).unwrap(), false).unwrap();
    assert!(store.insert("enc.b", Tensor::zeros([1]), true).is_err());
    assert_eq!(store.param_count(), 10);
    let blob = store.to_blob();
    let text = String::from_utf8_lossy(&blob[..blob.len() - 80]);
    assert!(text.starts_with("params 3 10\nenc.w 2x1x3 0 param\nenc.b 2 6 param\nbn.rm 2 8 buffer\n"));
    let back = ParameterStore::from_blob(&blob).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.to_blob(), blob);
    assert!(ParameterStore::from_blob(&blob[..blob.len() - 3]).is_err());
}

#[test]
fn single_conv_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 8], &mut rng);
    let w = random(&[3, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let target = random(&[1, 3, 8], &mut rng);
    let r = gradient_check(
        &[x, w, b],
        |tape, v| {
            let y = tape.conv1d(v[0], v[1], Some(v[2]), 1, 1, PadMode::Zero)?;
            let t = tape.constant(target.clone());
            tape.mse(y, t)
        },
        1e-6,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn affine_gradient_is_exact() {
    let x = Tensor::new([1, 1, 3], vec![0.3, -0.2, 0.9]).unwrap();
    let r = gradient_check(
        &[x],
        |tape, v| {
            let y = tape.affine(v[0], 1.0, 0.0)?;
            let z = tape.constant(Tensor::zeros([1, 1, 3]));
            tape.mse(y, z)
        },
        1e-6,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(t3(1, 1, 2, &[1e308, 1e308]), false);
    assert!(matches!(tape.affine(x, 10.0, 0.0), Err(crate::Error::NonFinite(_))));
}
