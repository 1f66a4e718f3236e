//! Finite-difference gradient checks for every differentiable operation, a
//! hyper-convolution layer, and a complete hyper-convolution UNet.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::hyperconv::{HyperConvLayer, HyperNetSpec};
use crate::nets::{ArchitectureSpec, ConvKind, Network};
use crate::tensor::{finite_difference_at, rel_error, BatchNormInput, Graph, Mode, NodeId, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Names accepted by [`check_op`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_dilated",
    "maxpool2",
    "upsample2",
    "leaky_relu",
    "relu",
    "sigmoid",
    "batchnorm_train",
    "batchnorm_eval",
    "dropout",
    "concat",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "linear",
    "add_row_bias",
    "transpose2",
    "reshape",
    "soft_dice",
    "hyperconv",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

/// Reduces an op output to a scalar with fixed random weights, so every
/// output element contributes a distinct amount.
fn weighted_loss(g: &mut Graph, out: NodeId, weights: &Option<Tensor>) -> Result<NodeId> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let w = g.constant(w.clone());
            let p = g.mul(out, w)?;
            g.sum(p)
        }
    }
}

/// Compares analytic and central-difference gradients for every input of
/// `build`, checking at most `max_entries` entries per input (all if `None`).
fn check_inputs(name: &str, inputs: &[Tensor], build: &Build, max_entries: Option<usize>, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let shape = g.value(out).shape().to_vec();
    let weights = (shape != [1]).then(|| Tensor::randn(&shape, 1.0, &mut rng));
    let loss = weighted_loss(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let loss = weighted_loss(&mut g, out, &weights)?;
        g.value(loss).item()
    };

    let (mut worst, mut entries) = (0.0f64, 0);
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let idx: Vec<usize> = match max_entries {
            Some(m) if m < x.numel() => sample(&mut rng, x.numel(), m).into_vec(),
            _ => (0..x.numel()).collect(),
        };
        let mut xs = inputs.to_vec();
        let numeric = finite_difference_at(
            |probe| {
                xs[k] = probe.clone();
                eval(&xs)
            },
            x,
            STEP,
            &idx,
        )?;
        for (&i, n) in idx.iter().zip(numeric) {
            worst = worst.max(rel_error(analytic.data()[i], n));
        }
        entries += idx.len();
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
        tolerance: OP_TOLERANCE,
    })
}

/// Standard normal values pushed at least 0.1 away from zero, keeping
/// every sample clear of the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| v + 0.1 * v.signum())
}

/// Distinct values at least 0.05 apart in random order, so max-pool windows
/// have no near ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), order.iter().map(|&i| i as f64 * 0.05 - n as f64 * 0.025).collect()).expect("shape")
}

/// A hyper layer whose trunk pre-activations all stay clear of the leaky
/// ReLU kink, trying successive seeds.
fn hyper_layer(spec: HyperNetSpec, seed: u64) -> Result<HyperConvLayer> {
    let grid = spec.grid()?;
    for s in seed..seed + 100 {
        let layer = HyperConvLayer::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(s))?;
        if layer.min_abs_preactivation(&grid)? > 1e-3 {
            return Ok(layer);
        }
    }
    Err(invalid!("no kink-free hyper layer found near seed {seed}"))
}

/// Gradient check for one named operation (see [`OPS`]). `kernel` and
/// `last_width` configure the convolution and hyper-convolution cases.
pub fn check_op(name: &str, kernel: usize, last_width: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let randn = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, r);
    match name {
        "conv2d" | "conv2d_dilated" => {
            let dil = if name == "conv2d" { 1 } else { 2 };
            let ins = [randn(&[2, 2, 6, 5], r), randn(&[3, 2, kernel, kernel], r), randn(&[3], r)];
            check_inputs(name, &ins, &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), dil), None, seed)
        }
        "maxpool2" => check_inputs(name, &[distinct(&[2, 2, 4, 6], r)], &|g, v| g.maxpool2(v[0]), None, seed),
        "upsample2" => check_inputs(name, &[randn(&[1, 2, 3, 2], r)], &|g, v| g.upsample2(v[0]), None, seed),
        "leaky_relu" => check_inputs(name, &[off_kink(&[3, 7], r)], &|g, v| g.leaky_relu(v[0], 0.1), None, seed),
        "relu" => check_inputs(name, &[off_kink(&[3, 7], r)], &|g, v| g.relu(v[0]), None, seed),
        "sigmoid" => check_inputs(name, &[randn(&[3, 7], r)], &|g, v| g.sigmoid(v[0]), None, seed),
        "batchnorm_train" => {
            let ins = [randn(&[2, 3, 3, 2], r), randn(&[3], r), randn(&[3], r)];
            let build = |g: &mut Graph, v: &[NodeId]| Ok(g.batchnorm2d(v[0], v[1], v[2], BatchNormInput::Train { eps: 1e-5 })?.0);
            check_inputs(name, &ins, &build, None, seed)
        }
        "batchnorm_eval" => {
            let ins = [randn(&[2, 3, 3, 2], r), randn(&[3], r), randn(&[3], r)];
            let mean: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
            let build = |g: &mut Graph, v: &[NodeId]| {
                let how = BatchNormInput::Eval { mean: &mean, var: &var, eps: 1e-5 };
                Ok(g.batchnorm2d(v[0], v[1], v[2], how)?.0)
            };
            check_inputs(name, &ins, &build, None, seed)
        }
        "dropout" => {
            let build = move |g: &mut Graph, v: &[NodeId]| g.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            check_inputs(name, &[randn(&[4, 6], r)], &build, None, seed)
        }
        "concat" => {
            let ins = [randn(&[2, 1, 3, 3], r), randn(&[2, 2, 3, 3], r)];
            check_inputs(name, &ins, &|g, v| g.concat(v[0], v[1]), None, seed)
        }
        "add" | "sub" | "mul" => {
            let ins = [randn(&[3, 4], r), randn(&[3, 4], r)];
            let build = |g: &mut Graph, v: &[NodeId]| match name {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            };
            check_inputs(name, &ins, &build, None, seed)
        }
        "scale" => check_inputs(name, &[randn(&[3, 4], r)], &|g, v| g.scale(v[0], -1.7), None, seed),
        "sum" => check_inputs(name, &[randn(&[3, 4], r)], &|g, v| g.sum(v[0]), None, seed),
        "mean" => check_inputs(name, &[randn(&[3, 4], r)], &|g, v| g.mean(v[0]), None, seed),
        "linear" => {
            let ins = [randn(&[3, 4], r), randn(&[4, 5], r), randn(&[5], r)];
            check_inputs(name, &ins, &|g, v| g.linear(v[0], v[1], Some(v[2])), None, seed)
        }
        "add_row_bias" => {
            let ins = [randn(&[3, 4], r), randn(&[4], r)];
            check_inputs(name, &ins, &|g, v| g.add_row_bias(v[0], v[1]), None, seed)
        }
        "transpose2" => check_inputs(name, &[randn(&[3, 5], r)], &|g, v| g.transpose2(v[0]), None, seed),
        "reshape" => check_inputs(name, &[randn(&[2, 6], r)], &|g, v| g.reshape(v[0], &[3, 2, 2]), None, seed),
        "soft_dice" => {
            let pred = Tensor::uniform(&[2, 1, 4, 4], 0.05, 0.95, r);
            let target = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, r).map(|v| if v < 0.4 { 1.0 } else { 0.0 });
            let build = move |g: &mut Graph, v: &[NodeId]| {
                let t = g.constant(target.clone());
                g.soft_dice(v[0], t, 1e-5)
            };
            check_inputs(name, &[pred], &build, None, seed)
        }
        "hyperconv" => check_hyper_layer(kernel, last_width, seed),
        other => Err(invalid!("unknown operation {other:?}; expected one of {}", OPS.join(", "))),
    }
}

/// Gradient check of one hyper-convolution with respect to its input and
/// every hypernetwork parameter (pair offsets enabled).
pub fn check_hyper_layer(kernel: usize, last_width: usize, seed: u64) -> Result<GradCheck> {
    let spec = HyperNetSpec::new(2, 3, kernel, last_width).with_pair_offset(true);
    let layer = hyper_layer(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ins = vec![Tensor::randn(&[2, 2, 6, 7], 1.0, &mut rng)];
    ins.extend(layer.parameters().into_iter().cloned());
    let build = |g: &mut Graph, v: &[NodeId]| {
        let bound = layer.bind_nodes(&v[1..])?;
        layer.forward_bound(g, &bound, v[0], 1)
    };
    let mut c = check_inputs("hyperconv", &ins, &build, None, seed)?;
    c.name = format!("hyperconv k={kernel} N_L={last_width}");
    Ok(c)
}

/// Loss and kink pattern of one eval-mode pass.
fn network_loss(net: &Network, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<usize>)> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let f = net.forward(&mut g, xi, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let t = g.constant(target.clone());
    let l = g.soft_dice(f.output, t, 1e-5)?;
    Ok((g.value(l).item()?, g.kink_pattern()))
}

/// End-to-end check of a hyper-convolution UNet on a `size x size` input.
/// See [`check_network`].
pub fn check_hyper_unet(kernel: usize, last_width: usize, init_channels: usize, size: usize, per_tensor: usize, seed: u64) -> Result<GradCheck> {
    let spec = ArchitectureSpec::unet(ConvKind::Hyper, kernel, init_channels).with_last_width(last_width);
    let mut c = check_network(&spec, size, per_tensor, seed)?;
    c.name = format!("hyper-unet k={kernel} N_L={last_width} {size}x{size}");
    Ok(c)
}

/// End-to-end check of any network on a `size x size` input: eval-mode
/// batch norm (running statistics taken from one train-mode pass), dropout
/// off, soft Dice loss. At most `per_tensor` random entries of each
/// parameter tensor are compared.
pub fn check_network(spec: &ArchitectureSpec, size: usize, per_tensor: usize, seed: u64) -> Result<GradCheck> {
    let mut net = Network::build(spec, seed)?;
    net.set_dropout(0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[2, spec.in_channels, size, size], 0.0, 1.0, &mut rng);
    let target = Tensor::uniform(&[2, spec.out_classes, size, size], 0.0, 1.0, &mut rng).map(|v| if v < 0.3 { 1.0 } else { 0.0 });
    {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let f = net.forward(&mut g, xi, Mode::Train, &mut rng)?;
        net.apply_batch_stats(&f.batch_stats)?;
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let f = net.forward(&mut g, xi, Mode::Eval, &mut rng)?;
    let t = g.constant(target.clone());
    let l = g.soft_dice(f.output, t, 1e-5)?;
    let analytic = g.backward(l)?.params();

    let (_, pattern) = network_loss(&net, &x, &target)?;

    // Entries whose +-STEP probes change the kink pattern straddle a point
    // of non-differentiability; they are skipped and another entry is drawn.
    let (mut worst, mut entries) = (0.0f64, 0);
    let mut probe_net = net.clone();
    for k in 0..analytic.len() {
        let p = net.parameters()[k].clone();
        let mut order: Vec<usize> = (0..p.numel()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut checked = 0;
        for &i in &order {
            if checked == per_tensor {
                break;
            }
            let mut side = |delta: f64| -> Result<(f64, bool)> {
                let mut t = p.clone();
                t.data_mut()[i] += delta;
                *probe_net.parameters_mut()[k] = t;
                let (l, pat) = network_loss(&probe_net, &x, &target)?;
                Ok((l, pat == pattern))
            };
            let (up, same_up) = side(STEP)?;
            let (down, same_down) = side(-STEP)?;
            if !(same_up && same_down) {
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[k].data()[i], numeric));
            checked += 1;
        }
        *probe_net.parameters_mut()[k] = p;
        entries += checked;
    }
    Ok(GradCheck {
        name: format!("{} {size}x{size}", spec.label()),
        max_rel_error: worst,
        entries,
        tolerance: NETWORK_TOLERANCE,
    })
}

/// Every operation in [`OPS`] followed by the end-to-end network check.
pub fn check_all(kernel: usize, last_width: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = OPS.iter().map(|op| check_op(op, kernel, last_width, seed)).collect::<Result<Vec<_>>>()?;
    out.push(check_hyper_unet(kernel, last_width, 4, 16, 6, seed)?);
    Ok(out)
}
