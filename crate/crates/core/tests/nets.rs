mod common;

use hcl_core::checks;
use hcl_core::nets::{ArchitectureSpec, Backbone, ConvKind, ConvUnit, Network};
use hcl_core::{Graph, Mode, Precision, Tensor};
use proptest::prelude::*;

use common::rng;

fn small(kind: ConvKind, k: usize) -> ArchitectureSpec {
    ArchitectureSpec::unet(kind, k, 4).with_last_width(4)
}

fn small_flat(kind: ConvKind) -> ArchitectureSpec {
    let mut s = ArchitectureSpec::flat(kind);
    s.flat_channels = vec![4, 8, 4];
    s.flat_dilations = vec![1, 2, 1];
    s
}

#[test]
fn receptive_field_examples() {
    for (k, rf) in [(3, 68), (5, 128), (7, 188)] {
        assert_eq!(ArchitectureSpec::unet(ConvKind::Standard, k, 32).receptive_field(), rf);
    }
    assert_eq!(ArchitectureSpec::flat(ConvKind::Standard).receptive_field(), 89);
    assert_eq!(ArchitectureSpec::flat(ConvKind::Standard).receptive_field(), 1 + 2 * 2 * (1 + 2 + 4 + 8 + 4 + 2 + 1));

    let mut single = ArchitectureSpec::flat(ConvKind::Standard);
    single.flat_channels = vec![8];
    single.flat_dilations = vec![1];
    single.convs_per_block = 1;
    assert_eq!(single.receptive_field(), 3);
}

#[test]
fn receptive_field_is_monotone_in_kernel_and_dilation() {
    let mut last = 0;
    for k in [1, 3, 5, 7, 9] {
        for d in 1..4 {
            let mut s = ArchitectureSpec::unet(ConvKind::Standard, k, 8);
            s.dilation = d;
            let rf = s.receptive_field();
            if d > 1 {
                let mut prev = s.clone();
                prev.dilation = d - 1;
                assert!(rf >= prev.receptive_field());
            }
            if d == 1 {
                assert!(rf >= last);
                last = rf;
            }
        }
    }
}

#[test]
fn parameter_totals_are_near_reference_values() {
    for (name, target) in [
        ("unet3", 2.1e6),
        ("unet5", 5.3e6),
        ("hyperunet5-nl2", 0.73e6),
        ("hyperunet5-nl4", 1.2e6),
        ("hyperunet5-nl8", 2.2e6),
        ("flat", 0.45e6),
        ("hyperflat", 0.45e6),
    ] {
        let n = Network::build(&ArchitectureSpec::from_name(name).unwrap(), 0).unwrap().param_count() as f64;
        assert!((n - target).abs() <= 0.15 * target, "{name}: {n}");
    }
}

#[test]
fn single_conv_count() {
    let unit = ConvUnit::standard("c", 16, 32, 3, 1, &mut rng(0));
    assert_eq!(unit.param_count(), 4640);
}

#[test]
fn hyper_counts_ignore_kernel_size_and_standard_counts_grow() {
    let count = |kind, k| {
        let mut s = ArchitectureSpec::unet(kind, k, 8);
        s.up_kernel_size = k;
        Network::build(&s, 0).unwrap().param_count()
    };
    let hyper: Vec<usize> = [3, 5, 7].iter().map(|&k| count(ConvKind::Hyper, k)).collect();
    let standard: Vec<usize> = [3, 5, 7].iter().map(|&k| count(ConvKind::Standard, k)).collect();
    assert!(hyper.iter().all(|&c| c == hyper[0]));
    assert!(standard.windows(2).all(|p| p[1] > p[0]));
}

#[test]
fn forward_keeps_resolution_and_outputs_probabilities() {
    for spec in [
        small(ConvKind::Standard, 3),
        small(ConvKind::Hyper, 5),
        small_flat(ConvKind::Standard),
        small_flat(ConvKind::Hyper),
    ] {
        let net = Network::build(&spec, 1).unwrap();
        let x = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng(2));
        let mut g = Graph::with_precision(Precision::Fast);
        let xi = g.constant(x.clone());
        let out = net.forward(&mut g, xi, Mode::Train, &mut rng(3)).unwrap().output;
        let y = g.value(out);
        assert_eq!(y.shape(), &[2, 1, 64, 64], "{}", spec.label());
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0), "{}", spec.label());

        // Untrained running statistics can saturate the sigmoid.
        let y = net.predict(&x, Precision::Fast).unwrap();
        assert_eq!(y.shape(), &[2, 1, 64, 64]);
        assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn every_conv_but_the_last_is_hyper_in_hyper_networks() {
    for spec in [small(ConvKind::Hyper, 3), small_flat(ConvKind::Hyper)] {
        let net = Network::build(&spec, 0).unwrap();
        let units = net.conv_units();
        let (last, rest) = units.split_last().unwrap();
        assert!(!last.is_hyper());
        assert_eq!(last.kernel_size, 1);
        let hyper = rest.iter().filter(|u| u.is_hyper()).count();
        match spec.backbone {
            Backbone::Unet => assert_eq!(hyper, rest.len()),
            // Residual projections stay 1x1 standard convolutions.
            Backbone::Flat => assert!(rest.iter().all(|u| u.is_hyper() || u.kernel_size == 1)),
        }
    }
    let flat = Network::build(&small_flat(ConvKind::Hyper), 0).unwrap();
    let sizes: Vec<usize> = flat.conv_units().iter().filter(|u| u.is_hyper()).map(|u| u.kernel_size).collect();
    assert_eq!(sizes, vec![3, 3, 5, 5, 3, 3]);
}

#[test]
fn frozen_hyper_network_predicts_identically() {
    for spec in [small(ConvKind::Hyper, 5), small_flat(ConvKind::Hyper)] {
        let net = Network::build(&spec, 3).unwrap();
        let frozen = net.frozen().unwrap();
        assert!(frozen.conv_units().iter().all(|u| !u.is_hyper()));
        let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng(4));
        let a = net.predict(&x, Precision::Exact).unwrap();
        let b = frozen.predict(&x, Precision::Exact).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&small(ConvKind::Hyper, 3), 5).unwrap();
    net.save(dir.path()).unwrap();
    let back = Network::load(dir.path()).unwrap();
    assert_eq!(back.spec(), net.spec());
    assert_eq!(back.param_names(), net.param_names());
    let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng(6));
    let d = net
        .predict(&x, Precision::Exact)
        .unwrap()
        .max_abs_diff(&back.predict(&x, Precision::Exact).unwrap())
        .unwrap();
    assert!(d < 1e-5);

    let again = tempfile::tempdir().unwrap();
    back.save(again.path()).unwrap();
    assert_eq!(Network::load(again.path()).unwrap(), back);
}

#[test]
fn rejects_bad_inputs_and_specs() {
    let net = Network::build(&small(ConvKind::Standard, 3), 0).unwrap();
    assert!(net.predict(&Tensor::zeros(&[1, 1, 12, 12]), Precision::Exact).is_err());
    assert!(net.predict(&Tensor::zeros(&[1, 2, 16, 16]), Precision::Exact).is_err());
    let mut bad = small_flat(ConvKind::Standard);
    bad.flat_dilations.pop();
    assert!(Network::build(&bad, 0).is_err());
    assert!(ArchitectureSpec::from_name("resnet50").is_err());
    assert!(ArchitectureSpec::from_name("unet4").is_err());
    assert!(ArchitectureSpec::from_name("hyperunet5-q3").is_err());
}

#[test]
fn spec_names_and_json_round_trip() {
    let s = ArchitectureSpec::from_name("hyperunet7-nl8-c16").unwrap();
    assert_eq!((s.conv_kind, s.kernel_size, s.hyper.last_width, s.init_channels), (ConvKind::Hyper, 7, 8, 16));
    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<ArchitectureSpec>(&json).unwrap(), s);
    assert_eq!(ArchitectureSpec::from_name("dilated-unet3").unwrap().receptive_field(), 128);
}

#[test]
fn networks_pass_end_to_end_gradient_checks() {
    for spec in [
        small(ConvKind::Standard, 3),
        small(ConvKind::Hyper, 3),
        small_flat(ConvKind::Standard),
        small_flat(ConvKind::Hyper),
    ] {
        let c = checks::check_network(&spec, 16, 3, 1).unwrap();
        assert!(c.passed() && c.max_rel_error < 1e-3, "{}: {:e}", c.name, c.max_rel_error);
        assert!(c.entries > 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn build_is_deterministic(seed in 0u64..1000, hyper: bool) {
        let kind = if hyper { ConvKind::Hyper } else { ConvKind::Standard };
        let spec = small(kind, 3);
        prop_assert_eq!(Network::build(&spec, seed).unwrap(), Network::build(&spec, seed).unwrap());
    }
}
