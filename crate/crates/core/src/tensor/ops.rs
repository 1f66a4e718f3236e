//! Pure forward and backward kernels. The [`Graph`](super::Graph) records
//! calls to these and replays the backward halves in reverse order.
//!
//! Reductions run in a fixed row-major order, and batch-parallel work is
//! reduced sample by sample in index order, so results do not depend on the
//! number of worker threads.

use rand::Rng;
use rayon::prelude::*;

use super::blas::{GemmScalar, Layout};
use super::direct;
use super::{Precision, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Upper bound on the number of im2col elements materialized at once.
const IM2COL_TILE_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub dil: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], dilation: usize) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input must be [N,C,H,W], got {input:?}")),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(shape_err!("conv2d kernel must be [Cout,Cin,h,w], got {kernel:?}")),
        };
        if kcin != cin {
            return Err(shape_err!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid!("conv2d kernel dimensions must be odd, got {kh}x{kw}"));
        }
        if dilation == 0 {
            return Err(invalid!("conv2d dilation must be positive"));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            dil: dilation,
        })
    }

    fn pad_h(&self) -> isize {
        ((self.kh - 1) / 2 * self.dil) as isize
    }

    fn pad_w(&self) -> isize {
        ((self.kw - 1) / 2 * self.dil) as isize
    }

    /// Rows of the im2col matrix.
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn rows_per_tile(&self) -> usize {
        (IM2COL_TILE_ELEMS / (self.patch() * self.w)).clamp(1, self.h)
    }

    /// For kernel tap offset `d` along an axis of length `len`, the output
    /// coordinate range whose source coordinate `o + d` lies inside the axis.
    fn valid_range(d: isize, len: usize) -> (usize, usize) {
        let lo = (-d).clamp(0, len as isize) as usize;
        let hi = (len as isize - d).clamp(0, len as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Fills `cols` (`patch x ((y1-y0)*w)`) for output rows `y0..y1`.
    fn im2col<T: GemmScalar>(&self, x: &[f64], y0: usize, y1: usize, cols: &mut [T]) {
        let tp = (y1 - y0) * self.w;
        let (ph, pw) = (self.pad_h(), self.pad_w());
        for c in 0..self.cin {
            let xc = &x[c * self.plane()..(c + 1) * self.plane()];
            for i in 0..self.kh {
                let dy = (i * self.dil) as isize - ph;
                for j in 0..self.kw {
                    let dx = (j * self.dil) as isize - pw;
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &mut cols[r * tp..(r + 1) * tp];
                    let (xlo, xhi) = Self::valid_range(dx, self.w);
                    for y in y0..y1 {
                        let seg = &mut row[(y - y0) * self.w..(y - y0 + 1) * self.w];
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= self.h as isize {
                            seg.fill(T::default());
                            continue;
                        }
                        let src = &xc[sy as usize * self.w..(sy as usize + 1) * self.w];
                        seg[..xlo].fill(T::default());
                        seg[xhi..].fill(T::default());
                        for xo in xlo..xhi {
                            seg[xo] = T::from_f64(src[(xo as isize + dx) as usize]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input-gradient plane set `dx`.
    fn col2im<T: GemmScalar>(&self, cols: &[T], y0: usize, y1: usize, dx: &mut [f64]) {
        let tp = (y1 - y0) * self.w;
        let (ph, pw) = (self.pad_h(), self.pad_w());
        let plane = self.plane();
        for c in 0..self.cin {
            let dxc = &mut dx[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                let dy = (i * self.dil) as isize - ph;
                for j in 0..self.kw {
                    let dxo = (j * self.dil) as isize - pw;
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &cols[r * tp..(r + 1) * tp];
                    let (xlo, xhi) = Self::valid_range(dxo, self.w);
                    for y in y0..y1 {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        let seg = &row[(y - y0) * self.w..(y - y0 + 1) * self.w];
                        let dst = &mut dxc[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for xo in xlo..xhi {
                            dst[(xo as isize + dxo) as usize] += seg[xo].to_f64();
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv2d bias must be [{cout}], got {:?}", b.shape()));
        }
    }
    Ok(())
}

/// Stride-1 convolution (cross-correlation) with zero "same" padding of
/// `(k-1)/2 * dilation` per side.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    conv2d_with(input, kernel, bias, dilation, Precision::Exact)
}

pub fn conv2d_with(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
    precision: Precision,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), dilation)?;
    check_bias(bias, g.cout)?;
    let data = match precision {
        Precision::Exact => conv_forward::<f64>(&g, input.data(), kernel.data(), bias.map(Tensor::data)),
        Precision::Fast => direct::forward(&g, input.data(), kernel.data(), bias.map(Tensor::data)),
    };
    Tensor::new(vec![g.n, g.cout, g.h, g.w], data)
}

fn conv_forward<T: GemmScalar>(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let kmat: Vec<T> = k.iter().map(|&v| T::from_f64(v)).collect();
    let (plane, patch) = (g.plane(), g.patch());
    let mut out = vec![0.0; g.n * g.cout * plane];
    let rows = g.rows_per_tile();
    out.par_chunks_mut(g.cout * plane)
        .enumerate()
        .for_each(|(s, os)| {
            let xs = &x[s * g.cin * plane..(s + 1) * g.cin * plane];
            let mut cols = vec![T::default(); patch * rows * g.w];
            let mut tile = vec![T::default(); g.cout * rows * g.w];
            let mut y0 = 0;
            while y0 < g.h {
                let y1 = (y0 + rows).min(g.h);
                let tp = (y1 - y0) * g.w;
                g.im2col(xs, y0, y1, &mut cols[..patch * tp]);
                T::gemm(
                    g.cout,
                    patch,
                    tp,
                    &kmat,
                    Layout::row_major(patch),
                    &cols[..patch * tp],
                    Layout::row_major(tp),
                    T::default(),
                    &mut tile[..g.cout * tp],
                    Layout::row_major(tp),
                );
                for o in 0..g.cout {
                    let b = bias.map_or(0.0, |b| b[o]);
                    let dst = &mut os[o * plane + y0 * g.w..o * plane + y1 * g.w];
                    for (d, &t) in dst.iter_mut().zip(&tile[o * tp..(o + 1) * tp]) {
                        *d = b + t.to_f64();
                    }
                }
                y0 = y1;
            }
        });
    out
}

/// Gradients of [`conv2d`] with respect to its three inputs. Entries are
/// `None` when not requested.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    dilation: usize,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
    precision: Precision,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), dilation)?;
    if grad_out.shape() != [g.n, g.cout, g.h, g.w] {
        return Err(shape_err!("conv2d grad_out shape {:?}", grad_out.shape()));
    }
    let (dx, dk) = match precision {
        Precision::Exact => conv_backward::<f64>(&g, input.data(), kernel.data(), grad_out.data(), need_input, need_kernel),
        Precision::Fast => direct::backward(&g, input.data(), kernel.data(), grad_out.data(), need_input, need_kernel),
    };
    let bias = need_bias.then(|| {
        let plane = g.plane();
        let mut db = vec![0.0; g.cout];
        for s in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (s * g.cout + o) * plane;
                *acc += grad_out.data()[start..start + plane].iter().sum::<f64>();
            }
        }
        Tensor::new(vec![g.cout], db)
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        kernel: dk.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
        bias: bias.transpose()?,
    })
}

fn conv_backward<T: GemmScalar>(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let kmat: Vec<T> = k.iter().map(|&v| T::from_f64(v)).collect();
    let (plane, patch) = (g.plane(), g.patch());
    let rows = g.rows_per_tile();
    let per_sample: Vec<(Vec<f64>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * g.cin * plane..(s + 1) * g.cin * plane];
            let ds: Vec<T> = dout[s * g.cout * plane..(s + 1) * g.cout * plane]
                .iter()
                .map(|&v| T::from_f64(v))
                .collect();
            let mut dx_s = if need_dx { vec![0.0; g.cin * plane] } else { Vec::new() };
            let mut dk_s = if need_dk { vec![T::default(); g.cout * patch] } else { Vec::new() };
            let mut cols = vec![T::default(); patch * rows * g.w];
            let mut y0 = 0;
            while y0 < g.h {
                let y1 = (y0 + rows).min(g.h);
                let tp = (y1 - y0) * g.w;
                // dout restricted to this tile: cout x tp with row stride `plane`.
                let dtile = &ds[y0 * g.w..];
                let dlayout = Layout { rs: plane, cs: 1 };
                if need_dk {
                    g.im2col(xs, y0, y1, &mut cols[..patch * tp]);
                    T::gemm(
                        g.cout,
                        tp,
                        patch,
                        dtile,
                        dlayout,
                        &cols[..patch * tp],
                        Layout::transposed(tp),
                        T::from_f64(1.0),
                        &mut dk_s,
                        Layout::row_major(patch),
                    );
                }
                if need_dx {
                    T::gemm(
                        patch,
                        g.cout,
                        tp,
                        &kmat,
                        Layout::transposed(patch),
                        dtile,
                        dlayout,
                        T::default(),
                        &mut cols[..patch * tp],
                        Layout::row_major(tp),
                    );
                    g.col2im(&cols[..patch * tp], y0, y1, &mut dx_s);
                }
                y0 = y1;
            }
            (dx_s, dk_s)
        })
        .collect();
    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.n * g.cin * plane);
        for (d, _) in &per_sample {
            dx.extend_from_slice(d);
        }
        dx
    });
    let dk = need_dk.then(|| {
        let mut dk = vec![0.0; g.cout * patch];
        for (_, d) in &per_sample {
            for (acc, &v) in dk.iter_mut().zip(d) {
                *acc += v.to_f64();
            }
        }
        dk
    });
    (dx, dk)
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of the first maximum in row-major scan order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("maxpool2 needs even spatial dimensions, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_idx = base + 2 * y * w + 2 * xo;
                let mut best = x[best_idx];
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + a) * w + 2 * xo + b;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nearest2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                out[nc * oh * ow + y * ow + xo] = x[nc * h * w + (y / 2) * w + xo / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let d = grad_out.data();
    let mut dx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let o = nc * oh * ow + 2 * y * ow + 2 * x;
                dx[nc * h * w + y * w + x] = d[o] + d[o + 1] + d[o + ow] + d[o + ow + 1];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope >= 0.0) {
        return Err(invalid!("leaky_relu slope must be >= 0, got {slope}"));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v >= 0.0 { g } else { slope * g })
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, 0.0)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Folds one batch's statistics into the running averages. `var` is the
    /// biased batch variance over `count` elements per channel.
    pub fn update(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = count as f64 / (count as f64 - 1.0);
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
        }
    }
}

/// Per-channel mean and biased variance over N, H, W.
pub(crate) fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += d[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut q = 0.0;
        for i in 0..n {
            q += d[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / count;
    }
    Ok((mean, var))
}

/// Normalizes `x` per channel with the given statistics, returning
/// `(x_hat, gamma * x_hat + beta)`.
pub(crate) fn batchnorm_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batchnorm affine parameters must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let plane = h * w;
    let mut xhat = x.clone();
    let mut y = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for (xh, yv) in xhat.data_mut()[range.clone()].iter_mut().zip(&mut y.data_mut()[range]) {
                *xh = (*xh - mean[ch]) * inv_std[ch];
                *yv = g * *xh + b;
            }
        }
    }
    Ok((xhat, y))
}

/// Batch normalization over (N, H, W) per channel. Train mode normalizes by
/// the batch statistics and folds them into `state`; eval mode uses the
/// running statistics.
pub fn batchnorm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if state.running_mean.len() != c {
        return Err(shape_err!("batchnorm state has {} channels, input {c}", state.running_mean.len()));
    }
    match mode {
        Mode::Train => {
            let count = n * h * w;
            if count < 2 {
                return Err(invalid!("batchnorm in train mode needs N*H*W >= 2, got {count}"));
            }
            let (mean, var) = channel_moments(x)?;
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
            let (_, y) = batchnorm_apply(x, gamma, beta, &mean, &inv)?;
            state.update(&mean, &var, count);
            Ok(y)
        }
        Mode::Eval => {
            let inv: Vec<f64> = state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
            Ok(batchnorm_apply(x, gamma, beta, &state.running_mean, &inv)?.1)
        }
    }
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(numel: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid!("dropout probability must lie in [0, 1), got {p}"));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..numel)
        .map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 })
        .collect())
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid!("dropout probability must lie in [0, 1), got {p}"));
    }
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => {
            let mask = dropout_mask(x.numel(), p, rng)?;
            let mut y = x.clone();
            for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Ok(y)
        }
    }
}

/// Concatenates two `[N,C,H,W]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!("concat of {:?} and {:?}", a.shape(), b.shape()));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub(crate) fn split_channels(grad: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = grad.dims4()?;
    let cb = c - ca;
    let plane = h * w;
    let mut ga = Vec::with_capacity(n * ca * plane);
    let mut gb = Vec::with_capacity(n * cb * plane);
    for i in 0..n {
        let base = i * c * plane;
        ga.extend_from_slice(&grad.data()[base..base + ca * plane]);
        gb.extend_from_slice(&grad.data()[base + ca * plane..base + c * plane]);
    }
    Ok((Tensor::new(vec![n, ca, h, w], ga)?, Tensor::new(vec![n, cb, h, w], gb)?))
}

/// `x [M,K] * w [K,N] (+ bias [N])`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (m, k) = x.dims2()?;
    let (kw, n) = w.dims2()?;
    if k != kw {
        return Err(shape_err!("linear: input {:?} vs weight {:?}", x.shape(), w.shape()));
    }
    let mut out = vec![0.0; m * n];
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(shape_err!("linear bias must be [{n}], got {:?}", b.shape()));
        }
        for row in out.chunks_mut(n) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    f64::gemm(m, k, n, x.data(), Layout::row_major(k), w.data(), Layout::row_major(n), beta, &mut out, Layout::row_major(n));
    Tensor::new(vec![m, n], out)
}

/// Gradients of [`linear`]: `(dx, dw, dbias)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, k) = x.dims2()?;
    let (_, n) = w.dims2()?;
    if grad_out.shape() != [m, n] {
        return Err(shape_err!("linear grad_out shape {:?}", grad_out.shape()));
    }
    let mut dx = vec![0.0; m * k];
    f64::gemm(m, n, k, grad_out.data(), Layout::row_major(n), w.data(), Layout::transposed(n), 0.0, &mut dx, Layout::row_major(k));
    let mut dw = vec![0.0; k * n];
    f64::gemm(k, m, n, x.data(), Layout::transposed(k), grad_out.data(), Layout::row_major(n), 0.0, &mut dw, Layout::row_major(n));
    let mut db = vec![0.0; n];
    for row in grad_out.data().chunks(n) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((
        Tensor::new(vec![m, k], dx)?,
        Tensor::new(vec![k, n], dw)?,
        Tensor::new(vec![n], db)?,
    ))
}

pub fn transpose2(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let d = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// V-Net soft Dice loss `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`
/// over every element of the batch.
pub fn soft_dice(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let (num, den) = soft_dice_terms(pred, target, eps)?;
    Ok(1.0 - num / den)
}

pub(crate) fn soft_dice_terms(pred: &Tensor, target: &Tensor, eps: f64) -> Result<(f64, f64)> {
    pred.expect_same_shape(target)?;
    if let Some(v) = pred.data().iter().chain(target.data()).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid!("soft Dice inputs must lie in [0, 1], found {v}"));
    }
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        inter += p * g;
        pp += p * p;
        gg += g * g;
    }
    Ok((2.0 * inter + eps, pp + gg + eps))
}

pub fn soft_dice_backward(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    let (num, den) = soft_dice_terms(pred, target, eps)?;
    // d/dp [1 - num/den] = -(2 g den - num 2 p) / den^2
    pred.zip_map(target, |p, g| -(2.0 * g * den - 2.0 * p * num) / (den * den))
}
