use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct nested-loop cross-correlation, accumulated in f64.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut s = 0.0f64;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * cin + ci) * h + ii as usize) * wd + jj as usize];
                                let wv = w.data()[((co * cin + ci) * k + ki) * k + kj];
                                s += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oi) * wo + oj] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_pointwise_scalar() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn conv_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[2, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (xs, ws, stride, pad) in [
        ([1, 2, 4, 4], [3, 2, 3, 3], 1, 1),
        ([2, 3, 7, 6], [4, 3, 3, 3], 2, 1),
        ([2, 5, 3, 3], [2, 5, 1, 1], 1, 0),
    ] {
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &ws);
        let expected = conv_oracle(&x, &w, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert_abs_diff_eq!(*a as f64, *e, epsilon = 1e-5);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 5, 3, 3]));
    let err = tape.conv2d(x, w, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("input channels"), "{err}");
}

#[test]
fn batchnorm_constant_channel_gives_beta() {
    let mut tape = Tape::new();
    let mut data = vec![0.0; 2 * 2 * 3 * 3];
    for (i, v) in data.iter_mut().enumerate() {
        *v = if (i / 9) % 2 == 0 { 4.0 } else { -2.5 };
    }
    let x = tape.constant(Tensor::new(vec![2, 2, 3, 3], data).unwrap());
    let g = tape.constant(Tensor::from_vec(vec![1.7, 0.3]));
    let b = tape.constant(Tensor::from_vec(vec![0.25, -1.0]));
    let mut stats = BatchNormStats::new(2);
    let y = tape
        .batchnorm2d(x, g, b, &mut stats, BnMode::Train, BatchNormConfig::default())
        .unwrap();
    for (i, &v) in tape.value(y).data().iter().enumerate() {
        let beta = if (i / 9) % 2 == 0 { 0.25 } else { -1.0 };
        assert_abs_diff_eq!(v, beta, epsilon = 1e-6);
    }
    // running mean moved 10% toward the batch mean
    assert_abs_diff_eq!(stats.mean.data()[0], 0.4, epsilon = 1e-6);
}

#[test]
fn batchnorm_eval_identity_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&mut rng, &[2, 3, 4, 4]);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut stats = BatchNormStats::new(3);
    let cfg = BatchNormConfig::default();
    let y = tape.batchnorm2d(x, g, b, &mut stats, BnMode::Eval, cfg).unwrap();
    let scale = 1.0 / (1.0 + cfg.eps).sqrt();
    for (o, i) in tape.value(y).data().iter().zip(input.data()) {
        assert_abs_diff_eq!(*o, i * scale, epsilon = 1e-7);
    }
    assert_eq!(stats, BatchNormStats::new(3));
}

#[test]
fn batchnorm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[2, 3, 4, 4]).map(|v| 3.0 * v + 1.0));
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut stats = BatchNormStats::new(3);
    let y = tape
        .batchnorm2d(x, g, b, &mut stats, BnMode::Train, BatchNormConfig::default())
        .unwrap();
    let out = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| out[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
    }
}

#[test]
fn batchnorm_rejects_single_value_channel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let mut stats = BatchNormStats::new(2);
    let err = tape
        .batchnorm2d(x, g, b, &mut stats, BnMode::Train, BatchNormConfig::default())
        .unwrap_err();
    assert!(matches!(err, Error::Domain { .. }));
}

#[test]
fn elementwise_basics() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);

    let u = tape.constant(Tensor::zeros(&[4]));
    let sm = tape.softmax(u).unwrap();
    assert_eq!(tape.value(sm).data(), &[0.25; 4]);

    let m = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let total = tape.sum(m).unwrap();
    assert_eq!(tape.value(total).item(), 10.0);
    let rows = tape.sum_axes(m, &[1]).unwrap();
    assert_eq!(tape.value(rows).data(), &[3.0, 7.0]);
    let cols = tape.reduce(m, ReduceOp::Mean, &[0]).unwrap();
    assert_eq!(tape.value(cols).data(), &[2.0, 3.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[6, 9]).map(|v| 20.0 * v));
    let y = tape.softmax(x).unwrap();
    for row in tape.value(y).data().chunks(9) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn log_rejects_nonpositive() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
}

#[test]
fn mismatched_elementwise_shapes_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn bce_values() {
    let ln2 = std::f32::consts::LN_2;
    assert_abs_diff_eq!(logistic_bce_value(0.0, 1.0), ln2, epsilon = 1e-7);
    assert_abs_diff_eq!(logistic_bce_value(0.0, 0.0), ln2, epsilon = 1e-7);
    // reference: 30 + ln(1 + e^-30), evaluated in f64
    let reference = 30.0f64 + (-30.0f64).exp().ln_1p();
    let v = logistic_bce_value(30.0, 0.0);
    assert!(v.is_finite());
    assert_abs_diff_eq!(v as f64, reference, epsilon = 1e-5);
    assert!(logistic_bce_value(-100.0, 1.0).is_finite());
}

#[test]
fn bce_gradient_is_sigmoid_minus_target() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
    let t = Tensor::from_vec(vec![1.0, 0.0, 0.25]);
    let l = tape.logistic_bce(x, &t).unwrap();
    let s = tape.sum(l).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for ((&gx, &xv), &tv) in g.data().iter().zip(&[-2.0f32, 0.0, 3.0]).zip(t.data()) {
        assert_abs_diff_eq!(gx, sigmoid(xv) - tv, epsilon = 1e-7);
    }
}

#[test]
fn backward_quadratic_and_detach() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.mul(x, x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![3.0]));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    assert!(tape.grad(d).is_none());
}

#[test]
fn second_backward_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0]));
    let l = tape.sum(x).unwrap();
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
}

#[test]
fn sgd_update_rule() {
    let mut params = vec![Tensor::from_vec(vec![1.0, -2.0]), Tensor::from_vec(vec![0.5])];
    let mut state = SgdState::new(
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.1,
        },
        params.iter().map(|p| p.shape()),
    );
    let grads = vec![Some(Tensor::from_vec(vec![0.5, 0.5])), None];
    state.step(&mut params, &grads, &[0.1, 0.1]).unwrap();
    // v = g + wd p = [0.6, 0.3]; p -= 0.1 v
    assert_abs_diff_eq!(params[0].data()[0], 0.94, epsilon = 1e-6);
    assert_abs_diff_eq!(params[0].data()[1], -2.03, epsilon = 1e-6);
    assert_eq!(params[1].data(), &[0.5]);
    state.step(&mut params, &grads, &[0.1, 0.1]).unwrap();
    // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94
    assert_abs_diff_eq!(state.velocity[0].data()[0], 0.54 + 0.5 + 0.094, epsilon = 1e-6);
}

#[test]
fn masked_and_nonzero_mean_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, 2, 2], vec![5.0, 1.0, 3.0, 2.0]).unwrap());
    let m = tape.mask(x, vec![true, false, true, false]).unwrap();
    let s = tape.nonzero_mean(m).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0]);
    let l = tape.sum(s).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
}

#[test]
fn gradcheck_small_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(&mut rng, &[1, 2, 4, 4]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let r = check_gradients(&[x, w], 1e-3, |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1)?;
        let s = t.sigmoid(y)?;
        t.sum(s)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn tensor_roundtrips() {
    let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
    assert_eq!(t.index(1).unwrap().data(), &[3.0, 4.0, 5.0]);
    let s = Tensor::stack(&[t.clone(), t.clone()]).unwrap();
    assert_eq!(s.shape(), &[2, 2, 3]);
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(t.reshape(&[4]).is_err());
}

#[test]
fn channel_bias_values_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 3, 2, 2]);
    let b = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let (xv, bv) = (tape.param(x.clone()), tape.param(b));
    let y = tape.channel_bias(xv, bv).unwrap();
    for (i, (&out, &inp)) in tape.value(y).data().iter().zip(x.data()).enumerate() {
        let want = inp + [1.0, -2.0, 0.5][(i / 4) % 3];
        assert!((out - want).abs() < 1e-6);
    }
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(bv).unwrap().data(), &[8.0, 8.0, 8.0]);
    assert!(tape.grad(xv).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let (xv, bv) = (tape.param(x), tape.param(Tensor::zeros(&[2])));
    assert!(tape.channel_bias(xv, bv).is_err());
}
