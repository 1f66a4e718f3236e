//! Hyper-convolutions: a convolution whose kernel is the output of a small
//! leaky-ReLU MLP evaluated at every kernel grid coordinate.
//!
//! For a kernel of `h x w` taps the MLP sees the `h*w` integer offsets
//! `(i, j)` relative to the kernel center, runs four hidden layers
//! `2 -> N1 -> N2 -> N3 -> N_L`, and projects linearly to `Nin * Nout`
//! values per tap. Output channel `q*Nin + c` becomes slice `[q, c]` of the
//! generated `[Nout, Nin, h, w]` kernel. Since the MLP never sees the kernel
//! size, the number of learnable parameters does not depend on it.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{ops, read_tensor, write_tensor, Graph, NodeId, Tensor};

pub const DEFAULT_TRUNK_WIDTHS: [usize; 3] = [16, 16, 16];
pub const DEFAULT_LEAK_SLOPE: f64 = 0.1;

/// Integer kernel-tap offsets centred at `(0, 0)`.
///
/// Channel 0 holds the row offset and channel 1 the column offset, so for a
/// 3x3 kernel channel 0 is `[[-1,-1,-1],[0,0,0],[1,1,1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
    values: Tensor,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        for d in [height, width] {
            if d == 0 || d % 2 == 0 {
                return Err(invalid!("coordinate grid dimensions must be odd and positive, got {height}x{width}"));
            }
        }
        let (ch, cw) = ((height / 2) as f64, (width / 2) as f64);
        let plane = height * width;
        let values = Tensor::from_fn(&[2, height, width], |idx| {
            let (c, r) = (idx / plane, idx % plane);
            if c == 0 {
                (r / width) as f64 - ch
            } else {
                (r % width) as f64 - cw
            }
        });
        Ok(CoordinateGrid { height, width, values })
    }

    /// Same grid with offsets divided by the half-extent of the larger axis,
    /// so every coordinate lies in `[-1, 1]`.
    pub fn normalized(height: usize, width: usize) -> Result<Self> {
        let mut grid = Self::new(height, width)?;
        let half = (height.max(width) / 2).max(1) as f64;
        grid.values = grid.values.map(|v| v / half);
        Ok(grid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The `[2, h, w]` coordinate planes.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// One `(row, col)` pair per tap in row-major tap order, as `[h*w, 2]`.
    pub fn points(&self) -> Tensor {
        let plane = self.height * self.width;
        let v = self.values.data();
        Tensor::from_fn(&[plane, 2], |idx| v[(idx % 2) * plane + idx / 2])
    }
}

/// Shape of one hyper-convolution: hypernetwork widths and the geometry of
/// the kernel it generates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNetSpec {
    /// Widths `N1, N2, N3` of the first three hidden layers.
    pub hidden_widths: [usize; 3],
    /// Width `N_L` of the last hidden layer.
    pub last_width: usize,
    pub leak_slope: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Adds a learnable scalar per (in, out) kernel slice on top of the
    /// projection bias.
    #[serde(default)]
    pub pair_offset: bool,
    /// Feed coordinates scaled into `[-1, 1]` instead of raw offsets.
    #[serde(default)]
    pub normalize_coords: bool,
}

impl HyperNetSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, last_width: usize) -> Self {
        HyperNetSpec {
            hidden_widths: DEFAULT_TRUNK_WIDTHS,
            last_width,
            leak_slope: DEFAULT_LEAK_SLOPE,
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            pair_offset: false,
            normalize_coords: false,
        }
    }

    pub fn with_pair_offset(mut self, on: bool) -> Self {
        self.pair_offset = on;
        self
    }

    pub fn with_kernel(mut self, kernel_h: usize, kernel_w: usize) -> Self {
        self.kernel_h = kernel_h;
        self.kernel_w = kernel_w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.iter().any(|&w| w == 0) || self.last_width == 0 {
            return Err(invalid!("hypernetwork widths must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("hyper-convolution channel counts must be positive"));
        }
        if !(self.leak_slope >= 0.0) {
            return Err(invalid!("leak slope must be non-negative"));
        }
        self.grid().map(|_| ())
    }

    /// Widths of all layers from the 2-d input through `N_L`.
    pub fn layer_widths(&self) -> [usize; 5] {
        let [a, b, c] = self.hidden_widths;
        [2, a, b, c, self.last_width]
    }

    /// Number of generated kernel slices, `Nin * Nout`.
    pub fn pairs(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn grid(&self) -> Result<CoordinateGrid> {
        if self.normalize_coords {
            CoordinateGrid::normalized(self.kernel_h, self.kernel_w)
        } else {
            CoordinateGrid::new(self.kernel_h, self.kernel_w)
        }
    }

    /// Learnable scalars: trunk `sum (N_j + 1) N_{j+1}`, projection
    /// `(N_L + 1) Nin Nout`, optional pair offsets `Nin Nout`, output bias `Nout`.
    /// The kernel size does not enter.
    pub fn param_count(&self) -> usize {
        let widths = self.layer_widths();
        let trunk: usize = widths.windows(2).map(|p| (p[0] + 1) * p[1]).sum();
        let projection = (self.last_width + 1) * self.pairs();
        let offsets = if self.pair_offset { self.pairs() } else { 0 };
        trunk + projection + offsets + self.out_channels
    }
}

/// Learnable state of one hyper-convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperConvLayer {
    spec: HyperNetSpec,
    /// `(weight [in, out], bias [out])` for the four hidden layers.
    trunk: Vec<(Tensor, Tensor)>,
    final_weight: Tensor,
    final_bias: Tensor,
    pair_offset: Option<Tensor>,
    out_bias: Tensor,
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct HyperBinding {
    trunk: Vec<(NodeId, NodeId)>,
    final_weight: NodeId,
    final_bias: NodeId,
    pair_offset: Option<NodeId>,
    pub out_bias: NodeId,
}

impl HyperConvLayer {
    /// A layer with every parameter zero.
    pub fn zeros(spec: HyperNetSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.layer_widths();
        let trunk = widths
            .windows(2)
            .map(|p| (Tensor::zeros(&[p[0], p[1]]), Tensor::zeros(&[p[1]])))
            .collect();
        let pairs = spec.pairs();
        Ok(HyperConvLayer {
            trunk,
            final_weight: Tensor::zeros(&[spec.last_width, pairs]),
            final_bias: Tensor::zeros(&[pairs]),
            pair_offset: spec.pair_offset.then(|| Tensor::zeros(&[pairs])),
            out_bias: Tensor::zeros(&[spec.out_channels]),
            spec,
        })
    }

    /// Random initialization, deterministic in `rng`.
    ///
    /// Trunk layers get He-uniform weights and fan-in-uniform biases. The
    /// projection is uniform with standard deviation
    /// `1 / (rms * sqrt(N_L * h * w * Nin))`, where `rms` is the root mean
    /// square of the last hidden layer over this layer's own grid, so that
    /// generated kernel entries have variance `1 / (h * w * Nin)` like a
    /// fan-in initialized convolution. Projection bias, pair offsets and
    /// output bias start at zero.
    pub fn init<R: Rng + ?Sized>(spec: HyperNetSpec, rng: &mut R) -> Result<Self> {
        let mut layer = Self::zeros(spec)?;
        let slope = layer.spec.leak_slope;
        for (w, b) in &mut layer.trunk {
            let fan_in = w.shape()[0] as f64;
            let wb = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            *w = Tensor::uniform(w.shape(), -wb, wb, rng);
            *b = Tensor::uniform(b.shape(), -bb, bb, rng);
        }
        let hidden = layer.hidden_features(&layer.spec.grid()?)?;
        let rms = (hidden.data().iter().map(|v| v * v).sum::<f64>() / hidden.numel() as f64)
            .sqrt()
            .max(1e-12);
        let s = &layer.spec;
        let fan = (s.last_width * s.kernel_h * s.kernel_w * s.in_channels) as f64;
        let std = 1.0 / (rms * fan.sqrt());
        let bound = std * 3f64.sqrt();
        layer.final_weight = Tensor::uniform(layer.final_weight.shape(), -bound, bound, rng);
        Ok(layer)
    }

    pub fn spec(&self) -> &HyperNetSpec {
        &self.spec
    }

    pub fn out_bias(&self) -> &Tensor {
        &self.out_bias
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Parameter tensors in binding order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut v = Vec::with_capacity(12);
        for (w, b) in &self.trunk {
            v.push(w);
            v.push(b);
        }
        v.push(&self.final_weight);
        v.push(&self.final_bias);
        v.extend(self.pair_offset.as_ref());
        v.push(&self.out_bias);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::with_capacity(12);
        for (w, b) in &mut self.trunk {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.final_weight);
        v.push(&mut self.final_bias);
        v.extend(self.pair_offset.as_mut());
        v.push(&mut self.out_bias);
        v
    }

    /// Names matching [`parameters`](Self::parameters).
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.trunk.len())
            .flat_map(|i| [format!("trunk{i}.weight"), format!("trunk{i}.bias")])
            .collect();
        v.push("final.weight".into());
        v.push("final.bias".into());
        if self.pair_offset.is_some() {
            v.push("pair_offset".into());
        }
        v.push("out_bias".into());
        v
    }

    /// Registers every parameter with `g` in [`parameters`](Self::parameters) order.
    pub fn bind(&self, g: &mut Graph) -> HyperBinding {
        let trunk = self
            .trunk
            .iter()
            .map(|(w, b)| (g.param(w.clone()), g.param(b.clone())))
            .collect();
        let final_weight = g.param(self.final_weight.clone());
        let final_bias = g.param(self.final_bias.clone());
        let pair_offset = self.pair_offset.as_ref().map(|t| g.param(t.clone()));
        let out_bias = g.param(self.out_bias.clone());
        HyperBinding {
            trunk,
            final_weight,
            final_bias,
            pair_offset,
            out_bias,
        }
    }

    /// A binding over nodes already holding this layer's parameters, given in
    /// [`parameters`](Self::parameters) order.
    pub fn bind_nodes(&self, ids: &[NodeId]) -> Result<HyperBinding> {
        let n = self.parameters().len();
        if ids.len() != n {
            return Err(invalid!("expected {n} parameter nodes, got {}", ids.len()));
        }
        let trunk = (0..self.trunk.len()).map(|i| (ids[2 * i], ids[2 * i + 1])).collect();
        let t = 2 * self.trunk.len();
        let pair_offset = self.pair_offset.is_some().then(|| ids[t + 2]);
        Ok(HyperBinding {
            trunk,
            final_weight: ids[t],
            final_bias: ids[t + 1],
            pair_offset,
            out_bias: ids[n - 1],
        })
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> HyperBinding {
        let trunk = self
            .trunk
            .iter()
            .map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone())))
            .collect();
        HyperBinding {
            trunk,
            final_weight: g.constant(self.final_weight.clone()),
            final_bias: g.constant(self.final_bias.clone()),
            pair_offset: self.pair_offset.as_ref().map(|t| g.constant(t.clone())),
            out_bias: g.constant(self.out_bias.clone()),
        }
    }

    fn check_grid(&self, grid: &CoordinateGrid) -> Result<()> {
        if (grid.height(), grid.width()) != (self.spec.kernel_h, self.spec.kernel_w) {
            return Err(shape_err!(
                "grid is {}x{} but the layer generates {}x{} kernels",
                grid.height(),
                grid.width(),
                self.spec.kernel_h,
                self.spec.kernel_w
            ));
        }
        Ok(())
    }

    /// Records kernel generation on `g`, returning the `[Nout, Nin, h, w]`
    /// kernel node. Any grid size is accepted here; the MLP is evaluated
    /// independently at each coordinate.
    pub fn kernel_node(&self, g: &mut Graph, bound: &HyperBinding, grid: &CoordinateGrid) -> Result<NodeId> {
        let mut h = g.constant(grid.points());
        for &(w, b) in &bound.trunk {
            h = g.linear(h, w, Some(b))?;
            h = g.leaky_relu(h, self.spec.leak_slope)?;
        }
        let mut k = g.linear(h, bound.final_weight, Some(bound.final_bias))?;
        if let Some(off) = bound.pair_offset {
            k = g.add_row_bias(k, off)?;
        }
        let kt = g.transpose2(k)?;
        g.reshape(
            kt,
            &[self.spec.out_channels, self.spec.in_channels, grid.height(), grid.width()],
        )
    }

    /// The generated kernel for `grid`, which must match the layer's kernel size.
    pub fn generate_kernel(&self, grid: &CoordinateGrid) -> Result<Tensor> {
        self.check_grid(grid)?;
        self.evaluate_on(grid)
    }

    /// Kernel evaluated on an arbitrary grid (e.g. a sub-grid or a larger one).
    pub fn evaluate_on(&self, grid: &CoordinateGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let k = self.kernel_node(&mut g, &bound, grid)?;
        Ok(g.value(k).clone())
    }

    /// The kernel at the layer's own kernel size.
    pub fn materialize(&self) -> Result<Tensor> {
        self.generate_kernel(&self.spec.grid()?)
    }

    /// Smallest |pre-activation| of any hidden unit over `grid`; the trunk is
    /// not differentiable where this is zero.
    pub fn min_abs_preactivation(&self, grid: &CoordinateGrid) -> Result<f64> {
        let mut h = grid.points();
        let mut m = f64::INFINITY;
        for (w, b) in &self.trunk {
            let z = ops::linear(&h, w, Some(b))?;
            m = z.data().iter().fold(m, |a, v| a.min(v.abs()));
            h = ops::leaky_relu(&z, self.spec.leak_slope)?;
        }
        Ok(m)
    }

    /// Last hidden layer activations `[h*w, N_L]` on `grid`.
    fn hidden_features(&self, grid: &CoordinateGrid) -> Result<Tensor> {
        let mut h = grid.points();
        for (w, b) in &self.trunk {
            h = ops::leaky_relu(&ops::linear(&h, w, Some(b))?, self.spec.leak_slope)?;
        }
        Ok(h)
    }

    /// Replaces the projection (weight, bias, pair offsets) with the least
    /// squares fit of `target` (`[Nout, Nin, h, w]`) given the current trunk.
    /// The generated kernel is linear in these parameters, so this is the
    /// exact optimum over them.
    pub fn fit_projection(&mut self, target: &Tensor) -> Result<()> {
        let s = &self.spec;
        if target.shape() != [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
            return Err(shape_err!("projection target {:?} does not match the layer", target.shape()));
        }
        let hidden = self.hidden_features(&s.grid()?)?;
        let (points, nl, pairs) = (s.kernel_h * s.kernel_w, s.last_width, s.pairs());
        let features = DMatrix::from_fn(points, nl + 1, |p, l| if l < nl { hidden.data()[p * nl + l] } else { 1.0 });
        let rhs = DMatrix::from_fn(points, pairs, |p, q| target.data()[q * points + p]);
        let x = features
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| invalid!("least squares projection fit failed: {e}"))?;
        self.final_weight = Tensor::from_fn(&[nl, pairs], |i| x[(i / pairs, i % pairs)]);
        self.final_bias = Tensor::from_fn(&[pairs], |q| x[(nl, q)]);
        if let Some(off) = &mut self.pair_offset {
            *off = Tensor::zeros(&[pairs]);
        }
        Ok(())
    }

    /// Records a full hyper-convolution of `input` on `g`: kernel generation
    /// followed by a same-padded convolution with the output bias.
    pub fn forward_bound(&self, g: &mut Graph, bound: &HyperBinding, input: NodeId, dilation: usize) -> Result<NodeId> {
        let cin = g.value(input).dims4()?.1;
        if cin != self.spec.in_channels {
            return Err(shape_err!(
                "hyper-convolution expects {} input channels, got {cin}",
                self.spec.in_channels
            ));
        }
        let kernel = self.kernel_node(g, bound, &self.spec.grid()?)?;
        g.conv2d(input, kernel, Some(bound.out_bias), dilation)
    }

    /// Binds the parameters and records the convolution in one go.
    pub fn forward(&self, g: &mut Graph, input: NodeId, dilation: usize) -> Result<NodeId> {
        let bound = self.bind(g);
        self.forward_bound(g, &bound, input, dilation)
    }

    /// Saves the parameters as tensor files plus a `manifest.json` holding the spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.param_names().iter().zip(self.parameters()) {
            write_tensor(&dir.join(name), t)?;
        }
        let manifest = LayerManifest {
            spec: self.spec.clone(),
            tensors: self.param_names(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: LayerManifest = serde_json::from_str(&text)?;
        let mut layer = Self::zeros(manifest.spec)?;
        let names = layer.param_names();
        if names != manifest.tensors {
            return Err(Error::Checkpoint(format!(
                "{}: tensor list does not match the spec",
                path.display()
            )));
        }
        for (name, slot) in names.iter().zip(layer.parameters_mut()) {
            let t = read_tensor(&dir.join(name))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(layer)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    spec: HyperNetSpec,
    tensors: Vec<String>,
}
