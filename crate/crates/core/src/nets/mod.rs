//! UNet and flat residual segmentation backbones, in standard and
//! hyper-convolution flavours, as an ordered list of layers.

mod spec;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use spec::{ArchitectureSpec, Backbone, ConvKind, HyperDefaults};

use crate::error::{invalid, shape_err, Error, Result};
use crate::hyperconv::HyperConvLayer;
use crate::tensor::{
    read_tensor, write_tensor, BatchNormInput, BatchNormState, BatchStats, Graph, Mode, NodeId, Precision, Tensor,
};

/// Learnable state of a convolution.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvParams {
    Standard { weight: Tensor, bias: Tensor },
    Hyper(HyperConvLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub params: ConvParams,
}

impl ConvUnit {
    /// Standard convolution with uniform fan-in init (variance `1/fan_in`) and zero bias.
    pub fn standard<R: Rng + ?Sized>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (3.0 / (cin * k * k) as f64).sqrt();
        ConvUnit {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            dilation,
            params: ConvParams::Standard {
                weight: Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
                bias: Tensor::zeros(&[cout]),
            },
        }
    }

    pub fn hyper<R: Rng + ?Sized>(
        name: impl Into<String>,
        defaults: &HyperDefaults,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvUnit {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            dilation,
            params: ConvParams::Hyper(HyperConvLayer::init(defaults.layer_spec(cin, cout, k), rng)?),
        })
    }

    pub fn is_hyper(&self) -> bool {
        matches!(self.params, ConvParams::Hyper(_))
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match &self.params {
            ConvParams::Standard { weight, bias } => vec![weight, bias],
            ConvParams::Hyper(h) => h.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.params {
            ConvParams::Standard { weight, bias } => vec![weight, bias],
            ConvParams::Hyper(h) => h.parameters_mut(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match &self.params {
            ConvParams::Standard { .. } => vec![format!("{}.weight", self.name), format!("{}.bias", self.name)],
            ConvParams::Hyper(h) => h.param_names().into_iter().map(|n| format!("{}.{n}", self.name)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// The `[Cout, Cin, k, k]` kernel this unit convolves with.
    pub fn kernel(&self) -> Result<Tensor> {
        match &self.params {
            ConvParams::Standard { weight, .. } => Ok(weight.clone()),
            ConvParams::Hyper(h) => h.materialize(),
        }
    }

    /// The same convolution with its kernel materialized into a standard one.
    pub fn frozen(&self) -> Result<ConvUnit> {
        let bias = match &self.params {
            ConvParams::Standard { bias, .. } => bias.clone(),
            ConvParams::Hyper(h) => h.out_bias().clone(),
        };
        Ok(ConvUnit {
            params: ConvParams::Standard {
                weight: self.kernel()?,
                bias,
            },
            ..self.clone()
        })
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match &self.params {
            ConvParams::Standard { weight, bias } => {
                let w = g.param(weight.clone());
                let b = g.param(bias.clone());
                g.conv2d(x, w, Some(b), self.dilation)
            }
            ConvParams::Hyper(h) => h.forward(g, x, self.dilation),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormUnit {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BatchNormUnit {
    fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNormUnit {
            name: name.into(),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            state: BatchNormState::new(channels),
        }
    }
}

/// One step of a [`Network`]'s forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvUnit),
    BatchNorm(BatchNormUnit),
    Relu,
    MaxPool,
    Upsample,
    /// Saves the current activation for a later [`Layer::ConcatSkip`].
    PushSkip,
    /// Concatenates the most recently saved activation (first) with the current one.
    ConcatSkip,
    Dropout(f64),
    /// Saves the current activation as a residual shortcut.
    ResidualStart,
    /// Adds the shortcut, projected by the 1x1 convolution if present.
    ResidualEnd(Option<ConvUnit>),
    Sigmoid,
}

/// A built network: its spec plus the ordered layer list holding all
/// parameters and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    layers: Vec<Layer>,
}

/// Output of [`Network::forward`].
#[derive(Debug)]
pub struct Forward {
    pub output: NodeId,
    /// Batch statistics observed by each train-mode batch norm, keyed by layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

struct Builder<'a> {
    spec: &'a ArchitectureSpec,
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
}

impl Builder<'_> {
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, dilation: usize) -> Result<ConvUnit> {
        match self.spec.conv_kind {
            ConvKind::Standard => Ok(ConvUnit::standard(name, cin, cout, k, dilation, &mut self.rng)),
            ConvKind::Hyper => ConvUnit::hyper(name, &self.spec.hyper, cin, cout, k, dilation, &mut self.rng),
        }
    }

    /// conv -> batch norm -> ReLU
    fn conv_block(&mut self, name: String, cin: usize, cout: usize, k: usize, dilation: usize) -> Result<()> {
        let conv = self.conv(name.clone(), cin, cout, k, dilation)?;
        self.layers.push(Layer::Conv(conv));
        self.layers.push(Layer::BatchNorm(BatchNormUnit::new(format!("{name}.bn"), cout)));
        self.layers.push(Layer::Relu);
        Ok(())
    }

    fn head(&mut self, cin: usize) {
        let out = self.spec.out_classes;
        let head = ConvUnit::standard("head", cin, out, 1, 1, &mut self.rng);
        self.layers.push(Layer::Conv(head));
        self.layers.push(Layer::Sigmoid);
    }
}

impl Network {
    /// Builds the network described by `spec`, initializing parameters from `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        match spec.backbone {
            Backbone::Unet => Self::build_unet(spec, seed),
            Backbone::Flat => Self::build_flat(spec, seed),
        }
    }

    /// Encoder of `num_pools + 1` scales with two conv blocks each and 2x2 max
    /// pooling between them, widths doubling per pool; dropout after the
    /// bottleneck; a decoder that upsamples, halves the width with a conv
    /// block, concatenates the skip and applies two conv blocks; finally a
    /// standard 1x1 convolution and a sigmoid.
    pub fn build_unet(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.backbone != Backbone::Unet {
            return Err(Error::InvalidArgument("build_unet needs a unet spec".into()));
        }
        let mut b = Builder {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
        };
        let (k, d, reps) = (spec.kernel_size, spec.dilation, spec.convs_per_block);
        let width = |s: usize| spec.init_channels << s;
        let mut cin = spec.in_channels;
        for s in 0..spec.num_pools {
            for i in 0..reps {
                b.conv_block(format!("enc{s}.conv{}", i + 1), cin, width(s), k, d)?;
                cin = width(s);
            }
            b.layers.push(Layer::PushSkip);
            b.layers.push(Layer::MaxPool);
        }
        for i in 0..reps {
            b.conv_block(format!("bottleneck.conv{}", i + 1), cin, width(spec.num_pools), k, d)?;
            cin = width(spec.num_pools);
        }
        if spec.dropout_p > 0.0 {
            b.layers.push(Layer::Dropout(spec.dropout_p));
        }
        for s in (0..spec.num_pools).rev() {
            b.layers.push(Layer::Upsample);
            b.conv_block(format!("dec{s}.up"), cin, width(s), spec.up_kernel_size, 1)?;
            b.layers.push(Layer::ConcatSkip);
            cin = 2 * width(s);
            for i in 0..reps {
                b.conv_block(format!("dec{s}.conv{}", i + 1), cin, width(s), k, d)?;
                cin = width(s);
            }
        }
        b.head(cin);
        Ok(Network {
            spec: spec.clone(),
            layers: b.layers,
        })
    }

    /// Residual blocks of `convs_per_block` conv blocks at the listed widths
    /// and dilations, with a standard 1x1 projection on the shortcut when the
    /// width changes. Hyper variants replace each dilated `k x k` convolution
    /// by a dense hyper-convolution of size `d (k - 1) + 1` at dilation 1.
    pub fn build_flat(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.backbone != Backbone::Flat {
            return Err(Error::InvalidArgument("build_flat needs a flat spec".into()));
        }
        let mut b = Builder {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
        };
        let mut cin = spec.in_channels;
        for (blk, (&c, &d)) in spec.flat_channels.iter().zip(&spec.flat_dilations).enumerate() {
            let (k, dil) = match spec.conv_kind {
                ConvKind::Standard => (spec.kernel_size, d),
                ConvKind::Hyper => (d * (spec.kernel_size - 1) + 1, 1),
            };
            b.layers.push(Layer::ResidualStart);
            let block_in = cin;
            for i in 0..spec.convs_per_block {
                b.conv_block(format!("block{blk}.conv{}", i + 1), cin, c, k, dil)?;
                cin = c;
            }
            let proj = (block_in != c).then(|| ConvUnit::standard(format!("block{blk}.proj"), block_in, c, 1, 1, &mut b.rng));
            b.layers.push(Layer::ResidualEnd(proj));
        }
        b.head(cin);
        Ok(Network {
            spec: spec.clone(),
            layers: b.layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Every convolution in forward order, including shortcut projections and the head.
    pub fn conv_units(&self) -> Vec<&ConvUnit> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                Layer::ResidualEnd(Some(c)) => Some(c),
                _ => None,
            })
            .collect()
    }

    /// Parameters in the order [`forward`](Self::forward) registers them.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) | Layer::ResidualEnd(Some(c)) => v.extend(c.parameters()),
                Layer::BatchNorm(bn) => {
                    v.push(&bn.gamma);
                    v.push(&bn.beta);
                }
                _ => {}
            }
        }
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) | Layer::ResidualEnd(Some(c)) => v.extend(c.parameters_mut()),
                Layer::BatchNorm(bn) => {
                    v.push(&mut bn.gamma);
                    v.push(&mut bn.beta);
                }
                _ => {}
            }
        }
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) | Layer::ResidualEnd(Some(c)) => v.extend(c.param_names()),
                Layer::BatchNorm(bn) => {
                    v.push(format!("{}.gamma", bn.name));
                    v.push(format!("{}.beta", bn.name));
                }
                _ => {}
            }
        }
        v
    }

    /// Number of trainable scalars: convolution weights and biases,
    /// hypernetwork parameters and batch-norm affine parameters.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(shape_err!("network expects {} input channels, got {c}", self.spec.in_channels));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!("input size {h}x{w} is not divisible by {m}"));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Parameters are registered as graph
    /// parameters in [`parameters`](Self::parameters) order; `rng` drives
    /// dropout in train mode.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, input: NodeId, mode: Mode, rng: &mut R) -> Result<Forward> {
        self.check_input(g.value(input))?;
        let mut x = input;
        let mut skips = Vec::new();
        let mut shortcuts = Vec::new();
        let mut batch_stats = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv(c) => c.forward(g, x)?,
                Layer::BatchNorm(bn) => {
                    let gamma = g.param(bn.gamma.clone());
                    let beta = g.param(bn.beta.clone());
                    let how = match mode {
                        Mode::Train => BatchNormInput::Train { eps: bn.state.eps },
                        Mode::Eval => BatchNormInput::Eval {
                            mean: &bn.state.running_mean,
                            var: &bn.state.running_var,
                            eps: bn.state.eps,
                        },
                    };
                    let (y, stats) = g.batchnorm2d(x, gamma, beta, how)?;
                    batch_stats.extend(stats.map(|s| (idx, s)));
                    y
                }
                Layer::Relu => g.relu(x)?,
                Layer::MaxPool => g.maxpool2(x)?,
                Layer::Upsample => g.upsample2(x)?,
                Layer::PushSkip => {
                    skips.push(x);
                    x
                }
                Layer::ConcatSkip => {
                    let skip = skips.pop().ok_or_else(|| shape_err!("concat without a saved skip"))?;
                    g.concat(skip, x)?
                }
                Layer::Dropout(p) => match mode {
                    Mode::Train => g.dropout(x, *p, rng)?,
                    Mode::Eval => x,
                },
                Layer::ResidualStart => {
                    shortcuts.push(x);
                    x
                }
                Layer::ResidualEnd(proj) => {
                    let s = shortcuts.pop().ok_or_else(|| shape_err!("residual end without a start"))?;
                    let s = match proj {
                        Some(p) => p.forward(g, s)?,
                        None => s,
                    };
                    g.add(x, s)?
                }
                Layer::Sigmoid => g.sigmoid(x)?,
            };
        }
        Ok(Forward {
            output: x,
            batch_stats,
        })
    }

    /// Sets the drop probability of every dropout layer.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid!("dropout probability must lie in [0, 1), got {p}"));
        }
        for l in &mut self.layers {
            if let Layer::Dropout(q) = l {
                *q = p;
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (idx, s) in stats {
            match self.layers.get_mut(*idx) {
                Some(Layer::BatchNorm(bn)) => bn.state.update(&s.mean, &s.var, s.count),
                _ => return Err(shape_err!("layer {idx} is not a batch norm")),
            }
        }
        Ok(())
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, input: &Tensor, precision: Precision) -> Result<Tensor> {
        let mut g = Graph::with_precision(precision);
        let x = g.constant(input.clone());
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&mut g, x, Mode::Eval, &mut unused)?;
        Ok(g.value(f.output).clone())
    }

    /// A copy where every hyper-convolution is replaced by a standard
    /// convolution holding its current generated kernel.
    pub fn frozen(&self) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.frozen().map(Layer::Conv),
                other => Ok(other.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Network {
            spec: ArchitectureSpec {
                conv_kind: ConvKind::Standard,
                ..self.spec.clone()
            },
            layers,
        })
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for l in &self.layers {
            if let Layer::BatchNorm(bn) = l {
                let c = bn.state.running_mean.len();
                v.push((format!("{}.running_mean", bn.name), Tensor::new(vec![c], bn.state.running_mean.clone()).expect("shape")));
                v.push((format!("{}.running_var", bn.name), Tensor::new(vec![c], bn.state.running_var.clone()).expect("shape")));
            }
        }
        v
    }

    /// Writes a checkpoint directory: one tensor file pair per parameter and
    /// batch-norm buffer, plus `manifest.json` with the architecture spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names = self.param_names();
        for (name, t) in names.iter().zip(self.parameters()) {
            write_tensor(&dir.join(name), t)?;
        }
        let buffers = self.buffers();
        for (name, t) in &buffers {
            write_tensor(&dir.join(name), t)?;
        }
        let manifest = CheckpointManifest {
            spec: self.spec.clone(),
            params: names,
            buffers: buffers.into_iter().map(|(n, _)| n).collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut net = Network::build(&manifest.spec, 0)?;
        if net.param_names() != manifest.params {
            return Err(Error::Checkpoint(format!("{}: parameter list does not match the spec", path.display())));
        }
        let names = net.param_names();
        for (name, slot) in names.iter().zip(net.parameters_mut()) {
            let t = read_tensor(&dir.join(name))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("{name}: expected {:?}, found {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        for l in &mut net.layers {
            if let Layer::BatchNorm(bn) = l {
                let c = bn.state.running_mean.len();
                for (suffix, slot) in [("running_mean", &mut bn.state.running_mean), ("running_var", &mut bn.state.running_var)] {
                    let t = read_tensor(&dir.join(format!("{}.{suffix}", bn.name)))?;
                    if t.shape() != [c] {
                        return Err(Error::Checkpoint(format!("{}.{suffix}: wrong shape {:?}", bn.name, t.shape())));
                    }
                    *slot = t.into_data();
                }
            }
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ArchitectureSpec,
    params: Vec<String>,
    buffers: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn millions(spec: &ArchitectureSpec) -> f64 {
        Network::build(spec, 0).unwrap().param_count() as f64 / 1e6
    }

    #[test]
    fn single_standard_conv_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ConvUnit::standard("c", 16, 32, 3, 1, &mut rng).param_count(), 4640);
    }

    #[test]
    fn single_hyper_conv_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let defaults = HyperDefaults {
            pair_offset: true,
            ..HyperDefaults::default()
        };
        let unit = ConvUnit::hyper("h", &defaults, 32, 32, 3, 1, &mut rng).unwrap();
        assert_eq!(unit.param_count(), 6836);
    }

    #[test]
    fn printed_totals() {
        for name in ["unet3", "unet5", "hyperunet5-nl2", "hyperunet5-nl4", "hyperunet5-nl8", "flat", "hyperflat"] {
            let spec = ArchitectureSpec::from_name(name).unwrap();
            println!("{name}: {:.3}M", millions(&spec));
        }
    }

    #[test]
    fn unet_shapes_and_range() {
        for kind in [ConvKind::Standard, ConvKind::Hyper] {
            let spec = ArchitectureSpec::unet(kind, 3, 2);
            let net = Network::build(&spec, 1).unwrap();
            let x = Tensor::uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            let y = net.predict(&x, Precision::Exact).unwrap();
            assert_eq!(y.shape(), &[2, 1, 16, 16]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let net = Network::build(&ArchitectureSpec::unet(ConvKind::Standard, 3, 2), 1).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 1, 12, 12]), Precision::Exact).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::build(&ArchitectureSpec::unet(ConvKind::Hyper, 3, 2), 5).unwrap();
        net.save(dir.path()).unwrap();
        let back = Network::load(dir.path()).unwrap();
        for (a, b) in back.parameters().iter().zip(net.parameters()) {
            assert_eq!(a.data(), b.quantize_f32().data());
        }
    }
}
