mod common;

use hcl_core::data::{synth_split, Split, SyntheticDataConfig};
use hcl_core::nets::{ArchitectureSpec, ConvKind, Network};
use hcl_core::tensor::{finite_difference_grad, max_rel_error, ops};
use hcl_core::training::{
    adam_step, augment, dice_score, soft_dice_loss, train, AdamState, AugmentConfig, TrainConfig, TrainHistory,
    Transform,
};
use hcl_core::{Graph, Tensor};
use proptest::prelude::*;

use common::rng;

/// Textbook Adam on one scalar.
fn scalar_adam(theta0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        theta -= lr * mhat / (vhat.sqrt() + eps);
        out.push(theta);
    }
    out
}

#[test]
fn adam_matches_scalar_reference_over_ten_steps() {
    let theta0 = [0.3, -1.2, 4.0, 0.0];
    let grads: Vec<[f64; 4]> = (0..10)
        .map(|t| {
            let t = t as f64;
            [0.5 - 0.1 * t, (t * 0.7).sin(), 1e-3 * (t + 1.0), if t < 5.0 { 2.0 } else { -3.0 }]
        })
        .collect();
    let mut p = Tensor::new(vec![4], theta0.to_vec()).unwrap();
    let mut state = AdamState::new([&p]);
    let mut traj = Vec::new();
    for g in &grads {
        adam_step(&mut [&mut p], &[Tensor::new(vec![4], g.to_vec()).unwrap()], &mut state, 1e-2).unwrap();
        traj.push(p.data().to_vec());
    }
    assert_eq!(state.t, 10);
    for i in 0..4 {
        let g: Vec<f64> = grads.iter().map(|g| g[i]).collect();
        let want = scalar_adam(theta0[i], &g, 1e-2);
        for (step, w) in want.iter().enumerate() {
            assert!((traj[step][i] - w).abs() < 1e-12, "param {i} step {step}");
        }
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut st = AdamState::new([&p]);
    adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 1e-3).unwrap();
    assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
    assert_eq!(st.t, 1);

    let mut q = Tensor::zeros(&[3]);
    let mut st = AdamState::new([&q]);
    let g = Tensor::new(vec![3], vec![5.0, -0.2, 1e3]).unwrap();
    adam_step(&mut [&mut q], &[g], &mut st, 1e-4).unwrap();
    for (d, s) in q.data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((d - s * 1e-4).abs() < 1e-4 * 1e-6);
    }
    let nan = Tensor::new(vec![3], vec![0.0, f64::NAN, 0.0]).unwrap();
    assert!(adam_step(&mut [&mut q], &[nan], &mut st, 1e-4).is_err());
}

#[test]
fn soft_dice_examples() {
    let g = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 2) as f64);
    assert!(soft_dice_loss(&g, &g, 1e-5).unwrap().abs() < 1e-9);
    assert!((soft_dice_loss(&Tensor::zeros(&[2, 1, 4, 4]), &g, 1e-5).unwrap() - 1.0).abs() < 1e-6);
    let half = Tensor::full(&[2, 1, 4, 4], 0.5);
    assert!((soft_dice_loss(&half, &g, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(soft_dice_loss(&Tensor::full(&[1, 1, 2, 2], 1.5), &Tensor::zeros(&[1, 1, 2, 2]), 1e-5).is_err());
}

#[test]
fn soft_dice_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let pred = Tensor::uniform(&[2, 1, 5, 5], 0.05, 0.95, &mut r);
    let target = Tensor::uniform(&[2, 1, 5, 5], 0.0, 1.0, &mut r).map(|v| (v < 0.4) as u8 as f64);
    let mut g = Graph::new();
    let p = g.param(pred.clone());
    let t = g.constant(target.clone());
    let l = g.soft_dice(p, t, 1e-5).unwrap();
    let analytic = g.backward(l).unwrap().get(p).unwrap().clone();
    let numeric = finite_difference_grad(|x| ops::soft_dice(x, &target, 1e-5), &pred, 1e-5).unwrap();
    assert!(max_rel_error(&analytic, &numeric).unwrap() < 1e-4);
}

#[test]
fn dice_score_examples() {
    let m = |v: &[f64]| Tensor::new(vec![1, 1, 1, v.len()], v.to_vec()).unwrap();
    assert_eq!(dice_score(&m(&[1.0, 1.0, 0.0]), &m(&[1.0, 1.0, 0.0])).unwrap(), 1.0);
    assert_eq!(dice_score(&m(&[1.0, 0.0, 0.0]), &m(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
    assert_eq!(dice_score(&m(&[1.0, 1.0, 0.0]), &m(&[0.0, 1.0, 1.0])).unwrap(), 0.5);
    assert_eq!(dice_score(&m(&[0.0, 0.0]), &m(&[0.0, 0.0])).unwrap(), 1.0);
    assert_eq!(dice_score(&m(&[0.7, 0.2]), &m(&[1.0, 0.0])).unwrap(), 1.0);
}

#[test]
fn augment_identity_and_flip_involution() {
    let image = Tensor::uniform(&[1, 9, 11], 0.0, 1.0, &mut rng(2));
    let mask = image.map(|v| (v > 0.6) as u8 as f64);
    let (a, b) = augment(&image, &mask, &AugmentConfig::none(), &mut rng(0)).unwrap();
    assert_eq!((a, b), (image.clone(), mask.clone()));

    for (h, v) in [(true, false), (false, true), (true, true)] {
        let t = Transform { flip_h: h, flip_v: v, ..Transform::IDENTITY };
        let (i1, m1) = t.apply(&image, &mask).unwrap();
        assert_ne!(i1, image);
        let (i2, m2) = t.apply(&i1, &m1).unwrap();
        assert_eq!((i2, m2), (image.clone(), mask.clone()));
    }
}

#[test]
fn augment_draws_within_configured_ranges() {
    let cfg = AugmentConfig::default();
    let mut r = rng(3);
    let (mut fh, mut fv) = (0, 0);
    for _ in 0..2000 {
        let t = Transform::sample(&cfg, &mut r);
        assert!(t.angle_deg.abs() <= 30.0);
        assert!((0.9..=1.1).contains(&t.scale));
        fh += t.flip_h as usize;
        fv += t.flip_v as usize;
    }
    assert!((800..1200).contains(&fh) && (800..1200).contains(&fv));
}

#[test]
fn training_is_deterministic_and_selects_min_val_loss() {
    let data = SyntheticDataConfig {
        image_size: 32,
        num_train: 12,
        num_val: 6,
        num_test: 0,
        lesion_radius_range: [2.0, 5.0],
        seed: 4,
        ..Default::default()
    };
    let train_set = synth_split(&data, Split::Train).unwrap();
    let val_set = synth_split(&data, Split::Val).unwrap();
    let net = Network::build(&ArchitectureSpec::unet(ConvKind::Hyper, 3, 4), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 7,
        checkpoint_dir: Some(dir.path().join("best")),
        ..Default::default()
    };
    let a = train(&net, &train_set, &val_set, &cfg).unwrap();
    let b = train(&net, &train_set, &val_set, &TrainConfig { checkpoint_dir: None, ..cfg.clone() }).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_eq!(a.history.epochs.len(), 6);

    let best = a
        .history
        .epochs
        .iter()
        .min_by(|x, y| x.val_loss.total_cmp(&y.val_loss))
        .unwrap();
    assert_eq!(a.history.best_epoch, best.epoch);
    assert_eq!(a.history.best().unwrap(), best);

    let saved = Network::load(&dir.path().join("best")).unwrap();
    assert_eq!(saved.param_names(), a.best.param_names());

    let csv = dir.path().join("history.csv");
    a.history.write_csv(&csv).unwrap();
    assert_eq!(TrainHistory::read_csv(&csv).unwrap(), a.history);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_dice"));
}

#[test]
fn train_config_json_accepts_camel_case_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"learningRate": 0.001, "batchSize": 16, "epochs": 3, "dropoutP": 0.2, "diceEpsilon": 1e-6}"#).unwrap();
    let c = TrainConfig::from_json_file(&p).unwrap();
    assert_eq!((c.learning_rate, c.batch_size, c.epochs, c.dropout_p, c.dice_epsilon), (1e-3, 16, 3, 0.2, 1e-6));
    assert_eq!(c.augment, AugmentConfig::default());
    std::fs::write(&p, r#"{"learning_rate": -1}"#).unwrap();
    assert!(TrainConfig::from_json_file(&p).is_err());
    let bad_scale = TrainConfig {
        augment: AugmentConfig { scale_range: [1.2, 0.8], ..Default::default() },
        ..Default::default()
    };
    assert!(bad_scale.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        let p = Tensor::new(vec![bits.len()], bits.iter().map(|b| b.0 as u8 as f64).collect()).unwrap();
        let g = Tensor::new(vec![bits.len()], bits.iter().map(|b| b.1 as u8 as f64).collect()).unwrap();
        let d = dice_score(&p, &g).unwrap();
        prop_assert_eq!(d, dice_score(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        let inter = bits.iter().filter(|b| b.0 && b.1).count() as f64;
        let total = bits.iter().map(|b| b.0 as usize + b.1 as usize).sum::<usize>() as f64;
        if total > 0.0 {
            prop_assert!((d - 2.0 * inter / total).abs() < 1e-15);
            // Binary predictions: hard Dice equals one minus the eps-free soft loss.
            let soft = soft_dice_loss(&p, &g, 0.0).unwrap();
            prop_assert!((d - (1.0 - soft)).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_preserves_shape_and_binarity(seed in 0u64..10_000, h in 4usize..20, w in 4usize..20) {
        let mut r = rng(seed);
        let image = Tensor::uniform(&[2, h, w], 0.0, 1.0, &mut r);
        let mask = Tensor::uniform(&[1, h, w], 0.0, 1.0, &mut r).map(|v| (v > 0.5) as u8 as f64);
        let (i, m) = augment(&image, &mask, &AugmentConfig::default(), &mut r).unwrap();
        prop_assert_eq!(i.shape(), image.shape());
        prop_assert_eq!(m.shape(), mask.shape());
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let cfg = AugmentConfig::default();
        prop_assert_eq!(
            augment(&image, &mask, &cfg, &mut rng(seed)).unwrap(),
            augment(&image, &mask, &cfg, &mut rng(seed)).unwrap()
        );
    }
}
