mod common;

use hcl_core::tensor::{finite_difference_grad, ops, read_tensor, write_tensor, BatchNormInput, BatchNormState};
use hcl_core::{Graph, Mode, Precision, Tensor};
use proptest::prelude::*;
use rand::Rng;

use common::{conv_reference, max_rel, rng, scaled_err};

#[test]
fn conv2d_matches_loop_reference_on_random_shapes() {
    let mut r = rng(11);
    for case in 0..120 {
        let n = r.random_range(1..3);
        let cin = r.random_range(1..6);
        let cout = r.random_range(1..6);
        let kh = [1, 3, 5][r.random_range(0..3)];
        let kw = [1, 3, 5, 7][r.random_range(0..4)];
        let dil = r.random_range(1..4);
        let h = r.random_range(1..14);
        let w = r.random_range(1..14);
        let x = Tensor::randn(&[n, cin, h, w], 1.0, &mut r);
        let k = Tensor::randn(&[cout, cin, kh, kw], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let bias = (case % 2 == 0).then_some(&b);
        let got = ops::conv2d(&x, &k, bias, dil).unwrap();
        let want = conv_reference(&x, &k, bias, dil);
        assert!(max_rel(&got, &want) < 1e-12, "case {case}: {:e}", max_rel(&got, &want));
    }
}

#[test]
fn conv2d_spec_example_dilation_two() {
    let mut r = rng(1);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let got = ops::conv2d(&x, &k, None, 2).unwrap();
    assert!(max_rel(&got, &conv_reference(&x, &k, None, 2)) < 1e-12);
}

#[test]
fn conv2d_delta_kernel_is_identity_and_zero_kernel_gives_bias() {
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 3.5);
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    assert_eq!(ops::conv2d(&x, &delta, None, 1).unwrap(), x);

    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(2));
    let zero = Tensor::zeros(&[2, 3, 3, 3]);
    let b = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
    let y = ops::conv2d(&x, &zero, Some(&b), 1).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[(i / 20) % 2]);
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    assert!(ops::conv2d(&x, &Tensor::zeros(&[1, 2, 2, 3]), None, 1).is_err());
    assert!(ops::conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1).is_err());
    assert!(ops::conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&Tensor::zeros(&[2])), 1).is_err());
    assert!(ops::conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 0).is_err());
}

#[test]
fn conv2d_is_linear_in_input_and_kernel() {
    let mut r = rng(3);
    for dil in [1, 2] {
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut r);
        let y = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut r);
        let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let l = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let (a, b) = (0.7, -1.3);
        let combo = |p: &Tensor, q: &Tensor| p.zip_map(q, |u, v| a * u + b * v).unwrap();

        let lhs = ops::conv2d(&combo(&x, &y), &k, None, dil).unwrap();
        let rhs = combo(&ops::conv2d(&x, &k, None, dil).unwrap(), &ops::conv2d(&y, &k, None, dil).unwrap());
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);

        let lhs = ops::conv2d(&x, &combo(&k, &l), None, dil).unwrap();
        let rhs = combo(&ops::conv2d(&x, &k, None, dil).unwrap(), &ops::conv2d(&x, &l, None, dil).unwrap());
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}

#[test]
fn fast_precision_agrees_with_exact() {
    let mut r = rng(4);
    for (n, cin, cout, h, w, k, dil) in [
        (2, 1, 8, 64, 64, 5, 1),
        (2, 8, 16, 32, 32, 5, 1),
        (1, 16, 8, 16, 16, 3, 2),
        (3, 3, 5, 9, 7, 7, 1),
        (1, 4, 4, 11, 13, 17, 1),
        (2, 5, 3, 6, 6, 1, 1),
    ] {
        let x = Tensor::randn(&[n, cin, h, w], 1.0, &mut r);
        let kern = Tensor::randn(&[cout, cin, k, k], 0.2, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let exact = ops::conv2d_with(&x, &kern, Some(&b), dil, Precision::Exact).unwrap();
        let fast = ops::conv2d_with(&x, &kern, Some(&b), dil, Precision::Fast).unwrap();
        assert!(scaled_err(&fast, &exact) < 1e-5, "forward {n} {cin} {cout} {h} {w} {k}");

        let go = Tensor::randn(exact.shape(), 1.0, &mut r);
        let e = ops::conv2d_backward(&x, &kern, &go, dil, true, true, true, Precision::Exact).unwrap();
        let f = ops::conv2d_backward(&x, &kern, &go, dil, true, true, true, Precision::Fast).unwrap();
        assert!(scaled_err(f.input.as_ref().unwrap(), e.input.as_ref().unwrap()) < 1e-5);
        assert!(scaled_err(f.kernel.as_ref().unwrap(), e.kernel.as_ref().unwrap()) < 1e-5);
        assert!(scaled_err(f.bias.as_ref().unwrap(), e.bias.as_ref().unwrap()) < 1e-5);
    }
}

#[test]
fn fast_precision_is_deterministic() {
    let mut r = rng(5);
    let x = Tensor::randn(&[4, 8, 32, 32], 1.0, &mut r);
    let k = Tensor::randn(&[8, 8, 5, 5], 0.2, &mut r);
    let a = ops::conv2d_with(&x, &k, None, 1, Precision::Fast).unwrap();
    let b = ops::conv2d_with(&x, &k, None, 1, Precision::Fast).unwrap();
    assert_eq!(a, b);
}

#[test]
fn maxpool_matches_window_max_and_routes_to_first_argmax() {
    let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng(6));
    let (y, _) = ops::maxpool2(&x).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let at = |i: usize, j: usize| x.data()[(2 * r + i) * 8 + 2 * c + j];
            let m = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            assert_eq!(y.data()[r * 4 + c], m);
        }
    }
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::maxpool2(&w).unwrap().0.data(), &[4.0]);

    let ties = Tensor::full(&[1, 1, 2, 2], 3.0);
    let (y, arg) = ops::maxpool2(&ties).unwrap();
    assert_eq!(y.data(), &[3.0]);
    let g = ops::maxpool2_backward(&[1, 1, 2, 2], &arg, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    assert!(ops::maxpool2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
}

#[test]
fn upsample_replicates_and_maxpool_inverts_it() {
    let v = Tensor::full(&[1, 1, 1, 1], 2.5);
    assert_eq!(ops::upsample_nearest2(&v).unwrap(), Tensor::full(&[1, 1, 2, 2], 2.5));
    let x = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng(7));
    let up = ops::upsample_nearest2(&x).unwrap();
    assert_eq!(ops::maxpool2(&up).unwrap().0, x);

    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let u = g.upsample2(xi).unwrap();
    let s = g.sum(u).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xi).unwrap().data().iter().all(|&v| v == 4.0));
}

#[test]
fn activation_examples() {
    let x = Tensor::new(vec![3], vec![2.0, -2.0, 0.0]).unwrap();
    let y = ops::leaky_relu(&x, 0.1).unwrap();
    assert_eq!(y.data()[0], 2.0);
    assert!((y.data()[1] + 0.2).abs() < 1e-15);
    assert_eq!(ops::leaky_relu(&x, 1.0).unwrap(), x);
    let g = ops::leaky_relu_backward(&x, 0.1, &Tensor::full(&[3], 1.0)).unwrap();
    assert_eq!(g.data(), &[1.0, 0.1, 1.0]);
    let r = ops::relu(&Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap()).unwrap();
    assert_eq!(r.data(), &[0.0, 3.0]);
}

#[test]
fn dropout_survivor_fraction_and_identities() {
    let x = Tensor::full(&[100_000], 1.0);
    let y = ops::dropout(&x, 0.5, Mode::Train, &mut rng(8)).unwrap();
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
    assert!((kept - 0.5).abs() < 0.01, "{kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));

    let x = Tensor::randn(&[1000], 1.0, &mut rng(9));
    assert_eq!(ops::dropout(&x, 0.0, Mode::Train, &mut rng(1)).unwrap(), x);
    assert_eq!(ops::dropout(&x, 0.9, Mode::Eval, &mut rng(1)).unwrap(), x);
    assert!(ops::dropout(&x, 1.0, Mode::Train, &mut rng(1)).is_err());
    assert_eq!(
        ops::dropout(&x, 0.3, Mode::Train, &mut rng(42)).unwrap(),
        ops::dropout(&x, 0.3, Mode::Train, &mut rng(42)).unwrap()
    );
}

#[test]
fn batchnorm_train_mode_standardizes_and_updates_running_stats() {
    let x = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut rng(10)).map(|v| v + 1.5);
    let gamma = Tensor::full(&[3], 1.0);
    let beta = Tensor::zeros(&[3]);
    let mut st = BatchNormState::new(3);
    let y = ops::batchnorm2d(&x, &gamma, &beta, &mut st, Mode::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 100.0;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 100.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4, "{v}");
        assert!(st.running_mean[c] != 0.0);
    }

    let mut st = BatchNormState::new(3);
    let z = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng(1));
    let eval = ops::batchnorm2d(&z, &gamma, &beta, &mut st, Mode::Eval).unwrap();
    let scale = 1.0 / (1.0 + st.eps).sqrt();
    assert!(eval.max_abs_diff(&z.map(|v| v * scale)).unwrap() < 1e-12);
    assert!(ops::batchnorm2d(&Tensor::zeros(&[1, 3, 1, 1]), &gamma, &beta, &mut st, Mode::Train).is_err());
}

#[test]
fn backprop_basic_examples() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let s = g.sum(xi).unwrap();
    assert_eq!(g.backward(s).unwrap().get(xi).unwrap().data(), &[1.0, 1.0]);

    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let sq = g.mul(xi, xi).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    assert_eq!(g.backward(half).unwrap().get(xi).unwrap(), &x);

    let mut g = Graph::new();
    let xi = g.param(x);
    assert!(g.backward(xi).is_err());
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::randn(&[6], 1.0, &mut rng(12));
    let ones = finite_difference_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
    assert!(ones.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    let zeros = finite_difference_grad(|_| Ok(0.0), &x, 1e-5).unwrap();
    assert!(zeros.data().iter().all(|&v| v == 0.0));
    let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let q = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v * v).sum::<f64>() / 2.0), &p, 1e-5).unwrap();
    assert!((q.data()[0] - 1.0).abs() < 1e-9 && (q.data()[1] - 2.0).abs() < 1e-9);
}

/// Builds `sum(relu(conv(x, k)) * w) + sum(sigmoid(x2))` with the two
/// independent branches recorded in either order.
fn two_branch_grads(swap: bool) -> Vec<Tensor> {
    let mut r = rng(13);
    let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let w = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
    let x2 = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
    let mut g = Graph::new();
    let (xi, ki, wi, x2i) = (g.param(x), g.param(k), g.param(w), g.param(x2));
    let conv_branch = |g: &mut Graph| {
        let c = g.conv2d(xi, ki, None, 1).unwrap();
        let a = g.relu(c).unwrap();
        let m = g.mul(a, wi).unwrap();
        g.sum(m).unwrap()
    };
    let sig_branch = |g: &mut Graph| {
        let s = g.sigmoid(x2i).unwrap();
        let m = g.mul(s, wi).unwrap();
        g.sum(m).unwrap()
    };
    let (a, b) = if swap {
        let b = sig_branch(&mut g);
        (conv_branch(&mut g), b)
    } else {
        let a = conv_branch(&mut g);
        (a, sig_branch(&mut g))
    };
    let loss = g.add(a, b).unwrap();
    g.backward(loss).unwrap().params()
}

#[test]
fn gradients_do_not_depend_on_recording_order() {
    let a = two_branch_grads(false);
    let b = two_branch_grads(true);
    for (p, q) in a.iter().zip(&b) {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn graph_batchnorm_reports_batch_statistics() {
    let x = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng(14));
    let mut g = Graph::new();
    let xi = g.constant(x);
    let gamma = g.param(Tensor::full(&[2], 1.0));
    let beta = g.param(Tensor::zeros(&[2]));
    let (_, stats) = g.batchnorm2d(xi, gamma, beta, BatchNormInput::Train { eps: 1e-5 }).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.count, 48);
    assert_eq!(stats.mean.len(), 2);
}

#[test]
fn tensor_files_round_trip_through_f32() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(15)).quantize_f32();
    let stem = dir.path().join("t");
    write_tensor(&stem, &t).unwrap();
    assert_eq!(read_tensor(&stem).unwrap(), t);
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(header["dtype"], "f32");
    assert_eq!(header["order"], "row-major");
    assert_eq!(std::fs::metadata(dir.path().join("t.bin")).unwrap().len(), 24 * 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relu_is_leaky_relu_with_zero_slope(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let x = Tensor::new(vec![v.len()], v).unwrap();
        prop_assert_eq!(ops::relu(&x).unwrap(), ops::leaky_relu(&x, 0.0).unwrap());
    }

    #[test]
    fn sigmoid_lies_in_unit_interval(v in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let y = ops::sigmoid(&Tensor::new(vec![v.len()], v).unwrap());
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn conv_output_keeps_spatial_shape(h in 1usize..10, w in 1usize..10, k in prop::sample::select(vec![1usize, 3, 5]), dil in 1usize..4, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[1, 2, h, w], 1.0, &mut r);
        let kern = Tensor::randn(&[3, 2, k, k], 1.0, &mut r);
        let y = ops::conv2d(&x, &kern, None, dil).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, h, w]);
    }
}
