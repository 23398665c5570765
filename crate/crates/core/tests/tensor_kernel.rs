mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgn_core::tensor::{
    gradcheck, BatchNormMode, GradcheckOptions, PoolMode, RunningStats, Tape, BN_EPS,
};
use sgn_core::{Error, Tensor64};

fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor64::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(Tensor64::eye(2));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    let b = tape.constant(t(&[2, 1], &[5., 6.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[17., 39.]);
}

#[test]
fn matmul_random_matches_triple_loop() {
    let mut r = rng(1);
    let a = rand_tensor(&[3, 4], &mut r);
    let b = rand_tensor(&[4, 2], &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let oracle = naive_matmul(a.data(), b.data(), 3, 4, 2);
    assert!(max_abs_diff(tape.value(c).data(), &oracle) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor64::zeros(&[2, 3]));
    let b = tape.constant(Tensor64::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn affine_identity_zero_and_oracle() {
    let mut r = rng(2);
    let x = rand_tensor(&[5, 4], &mut r);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let eye = tape.constant(Tensor64::eye(4));
    let zero_b = tape.constant(Tensor64::zeros(&[4]));
    let y = tape.affine(vx, eye, Some(zero_b)).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let w = rand_tensor(&[3, 4], &mut r);
    let b = rand_tensor(&[3], &mut r);
    let (vw, vb) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let zeros = tape.constant(Tensor64::zeros(&[4]));
    let y0 = tape.affine(zeros, vw, Some(vb)).unwrap();
    assert_eq!(tape.value(y0).data(), b.data());

    // leading axes broadcast: [5, 4] -> [5, 3]
    let y = tape.affine(vx, vw, Some(vb)).unwrap();
    let mut wt = vec![0.0; 12];
    for o in 0..3 {
        for i in 0..4 {
            wt[i * 3 + o] = w.data()[o * 4 + i];
        }
    }
    let mut oracle = naive_matmul(x.data(), &wt, 5, 4, 3);
    for row in oracle.chunks_mut(3) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    assert!(max_abs_diff(tape.value(y).data(), &oracle) < 1e-12);
    assert!(tape.affine(vx, vb, None).is_err());
    assert!(tape.affine(vb, vw, None).is_err());
}

#[test]
fn relu_cases() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1., 0., 2.]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    let neg = tape.constant(t(&[2, 2], &[-1., -2., -0.5, -3.]));
    let z = tape.relu(neg).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    // subgradient at exactly 0 is 0
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0., 0., 1.]);
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let x0 = [-1.0, 2.0];
    let numeric = finite_diff(|x| x.iter().map(|v| v.max(0.0)).sum(), &x0, 1e-6);
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &x0));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(max_abs_diff(g.get(x).unwrap().data(), &numeric) < 1e-9);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[1, 3], &[7., 7., 7.]));
    let y = tape.softmax_rows(c).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
    let y = tape.softmax_rows(x).unwrap();
    assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let r = rand_tensor(&[5, 5], &mut rng(3)).map(|v| v * 10.0);
    let x = tape.constant(r);
    let y = tape.softmax_rows(x).unwrap();
    for row in tape.value(y).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn batchnorm_train_normalizes_and_constant_channel_is_zero() {
    let mut x = rand_tensor(&[6, 4, 3], &mut rng(4)).map(|v| 3.0 * v + 1.5);
    for o in 0..6 {
        for i in 0..4 {
            x.set(&[o, i, 2], 5.0);
        }
    }
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let g = tape.constant(Tensor64::ones(&[3]));
    let b = tape.constant(Tensor64::zeros(&[3]));
    let mut stats = RunningStats::new(3);
    let y = tape.batchnorm(vx, 2, g, b, &mut stats, BatchNormMode::Train).unwrap();
    let out = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = out.data().iter().skip(c).step_by(3).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-7, "channel {c} mean {mean}");
        if c == 2 {
            assert!(vals.iter().all(|&v| v == 0.0));
        } else {
            let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }
    // momentum 0.1 from (0, 1): running mean of the constant channel is 0.5
    assert!((stats.mean[2] - 0.5).abs() < 1e-12);
    assert!((stats.var[2] - 0.9).abs() < 1e-12);
}

#[test]
fn batchnorm_eval_matches_formula_and_checks_channels() {
    let mut r = rng(5);
    let x = rand_tensor(&[4, 3], &mut r);
    let gamma = rand_tensor(&[3], &mut r);
    let beta = rand_tensor(&[3], &mut r);
    let mut stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 2.0, 1.5],
    };
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let before = stats.clone();
    let y = tape.batchnorm(vx, 1, vg, vb, &mut stats, BatchNormMode::Eval).unwrap();
    assert_eq!(stats, before);
    for r_ in 0..4 {
        for c in 0..3 {
            let want = (x.at(&[r_, c]) - stats.mean[c]) / (stats.var[c] + BN_EPS).sqrt()
                * gamma.data()[c]
                + beta.data()[c];
            assert!((tape.value(y).at(&[r_, c]) - want).abs() < 1e-12);
        }
    }
    let mut wrong = RunningStats::new(2);
    assert!(matches!(
        tape.batchnorm(vx, 1, vg, vb, &mut wrong, BatchNormMode::Eval),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn conv1d_identity_average_and_oracle() {
    let mut r = rng(6);
    let x = rand_tensor(&[1, 5, 3], &mut r);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let k_id = tape.constant(Tensor64::eye(3).reshape(vec![3, 3, 1]).unwrap());
    let y = tape.conv1d_temporal(vx, k_id, None).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    // each output channel averages its two inputs over a 3-tap window
    let konst = tape.constant(Tensor64::full(&[1, 6, 2], 0.7));
    let avg = tape.constant(Tensor64::full(&[2, 2, 3], 1.0 / 6.0));
    let y = tape.conv1d_temporal(konst, avg, None).unwrap();
    for ti in 1..5 {
        for c in 0..2 {
            assert!((tape.value(y).at(&[0, ti, c]) - 0.7).abs() < 1e-12);
        }
    }

    let x = rand_tensor(&[1, 6, 4], &mut r);
    let k = rand_tensor(&[3, 4, 3], &mut r);
    let (vx, vk) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv1d_temporal(vx, vk, None).unwrap();
    let oracle = naive_conv1d(x.data(), 6, 4, k.data(), 3, 3);
    assert!(max_abs_diff(tape.value(y).data(), &oracle) < 1e-12);

    let even = tape.constant(Tensor64::zeros(&[3, 4, 2]));
    assert!(matches!(tape.conv1d_temporal(vx, even, None), Err(Error::Config(_))));
}

#[test]
fn pool_cases() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor64::full(&[2, 4, 3], 1.25));
    let (y, idx) = tape.pool_axis(c, 1, PoolMode::Max).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
    assert!(idx.iter().all(|&i| i == 0));

    let x = tape.constant(t(&[4], &[3., 1., 4., 1.]));
    let (y, idx) = tape.pool_axis(x, 0, PoolMode::Max).unwrap();
    assert_eq!(tape.value(y).item(), 4.0);
    assert_eq!(idx, vec![2]);

    let x = tape.constant(t(&[2], &[2., 4.]));
    let (y, idx) = tape.pool_axis(x, 0, PoolMode::Avg).unwrap();
    assert_eq!(tape.value(y).item(), 3.0);
    assert!(idx.is_empty());

    assert!(matches!(
        tape.pool_axis(x, 1, PoolMode::Max),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn backward_linear_quadratic_and_contracts() {
    let mut r = rng(7);
    let x0 = rand_tensor(&[3, 2], &mut r);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let unused = tape.param(Tensor64::ones(&[4]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.get(unused).unwrap().data().iter().all(|&v| v == 0.0));

    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    let numeric = finite_diff(|v| v.iter().map(|a| a * a).sum(), x0.data(), 1e-6);
    assert!(max_abs_diff(g.get(x).unwrap().data(), &numeric) < 1e-8);
    let twice: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
    assert!(max_abs_diff(g.get(x).unwrap().data(), &twice) < 1e-15);

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn backward_replay_is_bitwise_deterministic() {
    let mut r = rng(8);
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[4, 5], &mut r));
    let w = tape.param(rand_tensor(&[3, 5], &mut r));
    let h = tape.affine(x, w, None).unwrap();
    let h = tape.relu(h).unwrap();
    let p = tape.softmax_rows(h).unwrap();
    let l = tape.smoothed_cross_entropy(p, &[0, 1, 2, 1], 0.1).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    assert!(g1.get(x).unwrap().bits_eq(g2.get(x).unwrap()));
    assert!(g1.get(w).unwrap().bits_eq(g2.get(w).unwrap()));
}

#[test]
fn strict_mode_rejects_non_finite_outputs() {
    let mut tape = Tape::<f64>::new();
    tape.set_scope("probe");
    let x = tape.constant(t(&[2], &[1e300, 1e300]));
    let err = tape.mul(x, x).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("probe"));
    tape.set_strict(false);
    assert!(tape.mul(x, x).is_ok());
}

#[test]
fn gradcheck_examples() {
    let mut r = rng(9);
    let opts = GradcheckOptions::default();
    let x = rand_tensor(&[3, 4], &mut r);
    let w = rand_tensor(&[2, 4], &mut r);
    let b = rand_tensor(&[2], &mut r);
    // linear readout, so central differences are exact up to rounding
    let readout = rand_tensor(&[3, 2], &mut r);
    let affine = gradcheck(
        |tape, v| {
            let y = tape.affine(v[0], v[1], Some(v[2]))?;
            let c = tape.constant(readout.clone());
            let weighted = tape.mul(y, c)?;
            tape.sum(weighted)
        },
        &[x.clone(), w.clone(), b.clone()],
        GradcheckOptions { eps: 1e-3, ..opts },
    )
    .unwrap();
    assert!(affine.max_rel_error < 1e-8, "{affine:?}");

    let ce = gradcheck(
        |tape, v| {
            let y = tape.affine(v[0], v[1], Some(v[2]))?;
            tape.smoothed_cross_entropy(y, &[0, 1, 1], 0.1)
        },
        &[x.clone(), w, b],
        opts,
    )
    .unwrap();
    assert!(ce.max_rel_error < 1e-6, "{ce:?}");

    // inputs bounded away from the kink
    let away = x.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v });
    let relu = gradcheck(
        |tape, v| {
            let y = tape.relu(v[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        &[away],
        opts,
    )
    .unwrap();
    assert!(relu.max_rel_error < 1e-8, "{relu:?}");

    let bad = GradcheckOptions { eps: 0.1, ..opts };
    assert!(matches!(
        gradcheck(|tape, v| tape.sum(v[0]), &[x], bad),
        Err(Error::Contract(_))
    ));
}

/// Every op against central differences on random inputs in [-1, 1].
#[test]
fn every_op_matches_finite_differences() {
    let opts = GradcheckOptions {
        max_coords_per_tensor: 64,
        ..Default::default()
    };
    for seed in 0..4u64 {
        let mut r = rng(100 + seed);
        // keep relu/max inputs away from kinks and ties
        let kinkless = |t: Tensor64| t.map(|v| if v.abs() < 1e-3 { v + 2e-3 } else { v });
        let a = rand_tensor(&[3, 4], &mut r);
        let b = rand_tensor(&[4, 5], &mut r);
        let w = rand_tensor(&[5, 4], &mut r);
        let bias = rand_tensor(&[5], &mut r);
        let labels = [0usize, 2, 4];
        let checks: Vec<(&str, f64)> = vec![
            ("matmul", gradcheck(|tp, v| { let c = tp.matmul(v[0], v[1])?; tp.smoothed_cross_entropy(c, &labels, 0.1) }, &[a.clone(), b.clone()], opts).unwrap().max_rel_error),
            ("bmm", gradcheck(|tp, v| {
                let x = tp.reshape(v[0], &[1, 3, 4])?;
                let y = tp.reshape(v[1], &[1, 5, 4])?;
                let s = tp.bmm(x, y, true)?;
                let s = tp.reshape(s, &[3, 5])?;
                tp.smoothed_cross_entropy(s, &labels, 0.0)
            }, &[a.clone(), w.clone()], opts).unwrap().max_rel_error),
            ("affine+relu", gradcheck(|tp, v| { let y = tp.affine(v[0], v[1], Some(v[2]))?; let y = tp.relu(y)?; tp.smoothed_cross_entropy(y, &labels, 0.1) }, &[a.clone(), kinkless(w.clone()), bias.clone()], opts).unwrap().max_rel_error),
            ("softmax", gradcheck(|tp, v| { let y = tp.softmax_rows(v[0])?; let q = tp.mul(y, v[1])?; tp.sum(q) }, &[a.clone(), a.map(|x| x * 0.5 + 0.2)], opts).unwrap().max_rel_error),
            ("batchnorm", gradcheck(|tp, v| {
                let mut rs = RunningStats::new(4);
                let y = tp.batchnorm(v[0], 1, v[1], v[2], &mut rs, BatchNormMode::Train)?;
                let q = tp.mul(y, v[3])?;
                tp.sum(q)
            }, &[a.clone(), rand_tensor(&[4], &mut r), rand_tensor(&[4], &mut r), rand_tensor(&[3, 4], &mut r)], opts).unwrap().max_rel_error),
            ("conv1d", gradcheck(|tp, v| {
                let y = tp.conv1d_temporal(v[0], v[1], Some(v[2]))?;
                let q = tp.mul(y, v[3])?;
                tp.sum(q)
            }, &[rand_tensor(&[2, 5, 3], &mut r), rand_tensor(&[4, 3, 3], &mut r), rand_tensor(&[4], &mut r), rand_tensor(&[2, 5, 4], &mut r)], opts).unwrap().max_rel_error),
            ("pool max/avg", gradcheck(|tp, v| {
                let (m, _) = tp.pool_axis(v[0], 1, PoolMode::Max)?;
                let (a, _) = tp.pool_axis(v[0], 0, PoolMode::Avg)?;
                let m = tp.mul(m, m)?;
                let a = tp.mul(a, a)?;
                let (sm, sa) = (tp.sum(m)?, tp.sum(a)?);
                tp.add(sm, sa)
            }, &[rand_tensor(&[3, 4, 2], &mut r)], opts).unwrap().max_rel_error),
            ("swap/broadcast/concat", gradcheck(|tp, v| {
                let s = tp.swap_axes(v[0], 0, 2)?; // [2,4,3]
                let bcast = tp.broadcast_to(v[1], &[2, 4, 3])?;
                let c = tp.concat_last(s, bcast)?;
                let sq = tp.mul(c, c)?;
                let sc = tp.scale(sq, 0.5)?;
                tp.sum(sc)
            }, &[rand_tensor(&[3, 4, 2], &mut r), rand_tensor(&[4, 1], &mut r)], opts).unwrap().max_rel_error),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "seed {seed}: {name} relative error {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_oracle_small_dims(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = rand_tensor(&[m, k], &mut r);
        let b = rand_tensor(&[k, n], &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        prop_assert!(max_abs_diff(tape.value(c).data(), &naive_matmul(a.data(), b.data(), m, k, n)) <= 1e-12);
    }

    #[test]
    fn conv_matches_oracle_small_dims(t_len in 1usize..=8, c_in in 1usize..=8, c_out in 1usize..=8, half in 0usize..=2, seed in any::<u64>()) {
        let ks = 2 * half + 1;
        let mut r = rng(seed);
        let x = rand_tensor(&[1, t_len, c_in], &mut r);
        let k = rand_tensor(&[c_out, c_in, ks], &mut r);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv1d_temporal(vx, vk, None).unwrap();
        prop_assert!(max_abs_diff(tape.value(y).data(), &naive_conv1d(x.data(), t_len, c_in, k.data(), c_out, ks)) <= 1e-12);
    }

    #[test]
    fn pool_matches_oracle_small_dims(d0 in 1usize..=8, d1 in 1usize..=8, d2 in 1usize..=8, axis in 0usize..3, seed in any::<u64>()) {
        let x = rand_tensor(&[d0, d1, d2], &mut rng(seed));
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let (m, idx) = tape.pool_axis(vx, axis, PoolMode::Max).unwrap();
        let (want, want_idx) = naive_max_axis(&x, axis);
        prop_assert!(max_abs_diff(tape.value(m).data(), &want) <= 1e-12);
        prop_assert_eq!(idx, want_idx);
        let (a, _) = tape.pool_axis(vx, axis, PoolMode::Avg).unwrap();
        prop_assert!(max_abs_diff(tape.value(a).data(), &naive_mean_axis(&x, axis)) <= 1e-12);
    }

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(rows in 1usize..=8, cols in 1usize..=8, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let x = rand_tensor(&[rows, cols], &mut rng(seed)).map(|v| 5.0 * v);
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vs = tape.constant(x.map(|v| v + shift));
        let y = tape.softmax_rows(vx).unwrap();
        let ys = tape.softmax_rows(vs).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)).unwrap() <= 1e-12);
    }
}
