//! Kernel smoothness statistics and hypernetwork kernel reconstruction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::hyperconv::{HyperConvLayer, HyperNetSpec};
use crate::nets::{ConvKind, Network};
use crate::tensor::{write_tensor, Graph, Tensor};
use crate::training::{adam_step, AdamState};

pub const RECONSTRUCT_STEPS: usize = 5000;
pub const RECONSTRUCT_LR: f64 = 1e-3;

/// Applies the 5-point Laplacian stencil at every interior cell of an
/// `h x w` slice; returns the `(h-2) x (w-2)` map.
fn laplacian_map(s: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let c = s[i * w + j];
            out.push(s[(i - 1) * w + j] + s[(i + 1) * w + j] + s[i * w + j - 1] + s[i * w + j + 1] - 4.0 * c);
        }
    }
    out
}

/// Mean absolute 5-point Laplacian over the interior of a 2-D kernel slice.
pub fn kernel_laplacian(kernel: &Tensor) -> Result<f64> {
    let (h, w) = kernel.dims2()?;
    slice_laplacian(kernel.data(), h, w)
}

fn slice_laplacian(s: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < 3 || w < 3 {
        return Err(invalid!("Laplacian needs a kernel of at least 3x3, got {h}x{w}"));
    }
    let map = laplacian_map(s, h, w);
    Ok(map.iter().map(|v| v.abs()).sum::<f64>() / map.len() as f64)
}

/// Mean over every `(out, in)` slice of a `[Nout, Nin, h, w]` kernel of the
/// per-slice mean absolute Laplacian.
pub fn mean_kernel_laplacian(kernel: &Tensor) -> Result<f64> {
    let (o, i, h, w) = kernel.dims4()?;
    let mut total = 0.0;
    for s in kernel.data().chunks(h * w) {
        total += slice_laplacian(s, h, w)?;
    }
    Ok(total / (o * i) as f64)
}

/// Kernel and smoothness statistic of one convolution layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKernel {
    pub name: String,
    pub conv_kind: ConvKind,
    pub shape: Vec<usize>,
    pub laplacian: f64,
    #[serde(skip)]
    pub kernel: Option<Tensor>,
}

/// Outcome of fitting a hypernetwork to one kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub layer: String,
    pub last_width: usize,
    pub steps: usize,
    pub lr: f64,
    pub mse: f64,
    pub relative_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub label: String,
    /// In network layer order.
    pub layers: Vec<LayerKernel>,
    /// Mean of the per-layer values.
    pub network_laplacian: f64,
    #[serde(default)]
    pub reconstructions: Vec<ReconstructionRecord>,
}

/// Materializes every non-1x1 convolution kernel of `net` and its Laplacian.
pub fn network_kernel_report(net: &Network) -> Result<KernelReport> {
    let mut layers = Vec::new();
    for unit in net.conv_units() {
        if unit.kernel_size == 1 {
            continue;
        }
        let kernel = unit.kernel()?;
        layers.push(LayerKernel {
            name: unit.name.clone(),
            conv_kind: if unit.is_hyper() { ConvKind::Hyper } else { ConvKind::Standard },
            shape: kernel.shape().to_vec(),
            laplacian: mean_kernel_laplacian(&kernel)?,
            kernel: Some(kernel),
        });
    }
    let network_laplacian = if layers.is_empty() {
        0.0
    } else {
        layers.iter().map(|l| l.laplacian).sum::<f64>() / layers.len() as f64
    };
    Ok(KernelReport {
        label: net.spec().label(),
        layers,
        network_laplacian,
        reconstructions: Vec::new(),
    })
}

impl KernelReport {
    pub fn layer(&self, name: &str) -> Option<&LayerKernel> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Writes `report.json`, and per layer the kernel tensor, a CSV grid
    /// (`out,in,row,col,weight,laplacian`) and, with `pgm`, grayscale montages
    /// of the kernels and their Laplacian maps.
    pub fn write(&self, dir: &Path, pgm: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        for layer in &self.layers {
            let Some(k) = &layer.kernel else { continue };
            write_tensor(&dir.join(&layer.name), k)?;
            write_kernel_csv(&dir.join(format!("{}.csv", layer.name)), k)?;
            if pgm {
                let (kimg, limg) = kernel_montages(k)?;
                kimg.write(&dir.join(format!("{}.kernel.pgm", layer.name)))?;
                limg.write(&dir.join(format!("{}.laplacian.pgm", layer.name)))?;
            }
        }
        Ok(())
    }
}

fn write_kernel_csv(path: &Path, k: &Tensor) -> Result<()> {
    let (no, ni, h, w) = k.dims4()?;
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["out", "in", "row", "col", "weight", "laplacian"])?;
    for o in 0..no {
        for i in 0..ni {
            let s = &k.data()[(o * ni + i) * h * w..(o * ni + i + 1) * h * w];
            let lap = if h >= 3 && w >= 3 { laplacian_map(s, h, w) } else { Vec::new() };
            for r in 0..h {
                for c in 0..w {
                    let l = if r >= 1 && r + 1 < h && c >= 1 && c + 1 < w {
                        lap[(r - 1) * (w - 2) + c - 1].to_string()
                    } else {
                        String::new()
                    };
                    wtr.write_record([o.to_string(), i.to_string(), r.to_string(), c.to_string(), s[r * w + c].to_string(), l])?;
                }
            }
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// An 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

const TILE_SCALE: usize = 6;
const TILE_GAP: usize = 2;

/// Lays `slices` (each `h x w`) out in a `rows x cols` grid, scaling each
/// cell up and mapping `[-m, m]` to `[0, 255]` (`m` = max |value|).
fn montage(slices: &[f64], rows: usize, cols: usize, h: usize, w: usize) -> GrayImage {
    let m = slices.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let (th, tw) = (h * TILE_SCALE + TILE_GAP, w * TILE_SCALE + TILE_GAP);
    let (width, height) = (cols * tw + TILE_GAP, rows * th + TILE_GAP);
    let mut pixels = vec![255u8; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let s = &slices[(r * cols + c) * h * w..][..h * w];
            for y in 0..h * TILE_SCALE {
                for x in 0..w * TILE_SCALE {
                    let v = s[(y / TILE_SCALE) * w + x / TILE_SCALE];
                    let px = ((v / m + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    pixels[(TILE_GAP + r * th + y) * width + TILE_GAP + c * tw + x] = px;
                }
            }
        }
    }
    GrayImage { width, height, pixels }
}

/// Montages of a `[Nout, Nin, h, w]` kernel (rows = outputs) and of its
/// interior Laplacian maps.
pub fn kernel_montages(k: &Tensor) -> Result<(GrayImage, GrayImage)> {
    let (no, ni, h, w) = k.dims4()?;
    if h < 3 || w < 3 {
        return Err(invalid!("kernel montage needs at least 3x3 kernels"));
    }
    let laps: Vec<f64> = k.data().chunks(h * w).flat_map(|s| laplacian_map(s, h, w)).collect();
    Ok((montage(k.data(), no, ni, h, w), montage(&laps, no, ni, h - 2, w - 2)))
}

/// Fits a fresh hypernetwork (with pair offsets) so its generated kernel
/// matches `target` (`[Nout, Nin, h, w]`) in mean squared error.
///
/// Adam runs for `steps` steps with the learning rate annealed from `lr` to
/// zero along a half cosine; the projection is then refit by least squares
/// on the learned trunk, kept only if it lowers the error. Returns the fitted
/// layer and its final MSE.
pub fn reconstruct_kernel(target: &Tensor, last_width: usize, steps: usize, lr: f64, seed: u64) -> Result<(HyperConvLayer, f64)> {
    let (no, ni, h, w) = target.dims4()?;
    if h != w {
        return Err(shape_err!("reconstruction needs square kernels, got {h}x{w}"));
    }
    if !target.is_finite() {
        return Err(invalid!("reconstruction target contains NaN or Inf"));
    }
    if !(lr > 0.0) {
        return Err(invalid!("learning rate must be positive"));
    }
    let spec = HyperNetSpec::new(ni, no, h, last_width).with_pair_offset(true);
    let grid = spec.grid()?;
    let mut layer = HyperConvLayer::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut adam = AdamState::new(layer.parameters());
    for step in 0..steps {
        let mut g = Graph::new();
        let bound = layer.bind(&mut g);
        let k = layer.kernel_node(&mut g, &bound, &grid)?;
        let t = g.constant(target.clone());
        let d = g.sub(k, t)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean(sq)?;
        let grads = g
            .backward(loss)
            .map_err(|e| Error::Divergence(format!("reconstruction step {step}: {e}")))?
            .params();
        let rate = lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        adam_step(&mut layer.parameters_mut(), &grads, &mut adam, rate)
            .map_err(|e| Error::Divergence(format!("reconstruction step {step}: {e}")))?;
    }
    let mse_of = |l: &HyperConvLayer| -> Result<f64> {
        Ok(l.generate_kernel(&grid)?.zip_map(target, |a, b| (a - b) * (a - b))?.mean())
    };
    let mut mse = mse_of(&layer)?;
    let mut refit = layer.clone();
    refit.fit_projection(target)?;
    let refit_mse = mse_of(&refit)?;
    if refit_mse < mse {
        layer = refit;
        mse = refit_mse;
    }
    if !mse.is_finite() {
        return Err(Error::Divergence("reconstruction MSE is not finite".into()));
    }
    Ok((layer, mse))
}

/// A `[nout, nin, k, k]` bank of white-noise slices, each blurred with a
/// Gaussian of width `sigma` (edge clamped). Deterministic in `seed`.
pub fn smooth_random_kernels(nout: usize, nin: usize, k: usize, sigma: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = Tensor::randn(&[nout * nin, k * k], 1.0, &mut rng);
    let data: Vec<f64> = white.data().chunks(k * k).flat_map(|s| crate::data::blur(s, k, sigma)).collect();
    Tensor::new(vec![nout, nin, k, k], data).expect("kernel bank shape")
}

/// Population variance of every entry.
pub fn variance(t: &Tensor) -> f64 {
    let m = t.mean();
    t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.numel() as f64
}

/// Renders a report as an aligned text table.
pub fn format_report(r: &KernelReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", r.label);
    for l in &r.layers {
        let _ = writeln!(s, "  {:<20} {:?} {:>12.6}", l.name, l.shape, l.laplacian);
    }
    let _ = writeln!(s, "  network mean |Laplacian| {:.6}", r.network_laplacian);
    for rec in &r.reconstructions {
        let _ = writeln!(s, "  reconstruct {} N_L={} mse={:.3e} rel={:.3e}", rec.layer, rec.last_width, rec.mse, rec.relative_mse);
    }
    s
}
