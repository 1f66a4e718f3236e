//! Direct `f32` convolution used by [`Precision::Fast`](super::Precision).
//!
//! Each input channel is zero padded and stored with row length `wp = w + 2*pw`,
//! so a kernel tap becomes a constant offset into the flat buffer and the
//! output is computed on a `h x wp` grid whose extra columns are dropped.
//! Every output lane sums its terms in the same (channel, tap) order on every
//! instruction set, so results do not depend on the CPU.

use rayon::prelude::*;

use super::ops::ConvGeom;

const LANES: usize = 32;
const OUT_BLOCK: usize = 4;

/// Padded-width layout shared by forward and backward passes.
#[derive(Clone, Copy)]
pub(crate) struct Frame {
    pub wp: usize,
    pub plane: usize,
    pub ph: usize,
    pub pw: usize,
    /// Output positions computed per channel (`h * wp` rounded up to `LANES`).
    pub span: usize,
}

impl Frame {
    pub fn new(g: &ConvGeom) -> Self {
        let (ph, pw) = ((g.kh - 1) / 2 * g.dil, (g.kw - 1) / 2 * g.dil);
        let wp = g.w + 2 * pw;
        let plane = (g.h + 2 * ph) * wp;
        Frame {
            wp,
            plane,
            ph,
            pw,
            span: (g.h * wp).div_ceil(LANES) * LANES,
        }
    }

    pub fn offsets(&self, g: &ConvGeom) -> Vec<usize> {
        let mut v = Vec::with_capacity(g.kh * g.kw);
        for i in 0..g.kh {
            for j in 0..g.kw {
                v.push(i * g.dil * self.wp + j * g.dil);
            }
        }
        v
    }

    /// Zero-padded copy of `c` planes of size `h x w`, with enough trailing
    /// zeros for every tap offset.
    pub fn pad(&self, src: &[f64], c: usize, h: usize, w: usize, max_off: usize) -> Vec<f32> {
        let mut out = vec![0f32; c * self.plane + max_off + self.span];
        for ch in 0..c {
            for y in 0..h {
                let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                let d = ch * self.plane + (y + self.ph) * self.wp + self.pw;
                for (o, &v) in out[d..d + w].iter_mut().zip(s) {
                    *o = v as f32;
                }
            }
        }
        out
    }

    /// `c` planes laid out on the `h x wp` output grid (zero in the extra
    /// columns), each `span` long.
    pub fn widen(&self, src: &[f64], c: usize, h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0f32; padded_rows(c) * self.span];
        for ch in 0..c {
            for y in 0..h {
                let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                let d = ch * self.span + y * self.wp;
                for (o, &v) in out[d..d + w].iter_mut().zip(s) {
                    *o = v as f32;
                }
            }
        }
        out
    }
}

/// Rows allocated for `c` output channels.
pub(crate) fn padded_rows(c: usize) -> usize {
    c.div_ceil(OUT_BLOCK) * OUT_BLOCK
}

/// Kernel `[cout, cin, taps]` regrouped as `[cout/OUT_BLOCK][cin][taps][OUT_BLOCK]`,
/// zero filled past `cout`.
pub(crate) fn pack_kernel(k: impl Fn(usize, usize, usize) -> f64, cout: usize, cin: usize, taps: usize) -> Vec<f32> {
    let blocks = cout.div_ceil(OUT_BLOCK);
    let mut out = vec![0f32; blocks * cin * taps * OUT_BLOCK];
    for o in 0..cout {
        let (b, q) = (o / OUT_BLOCK, o % OUT_BLOCK);
        for c in 0..cin {
            for t in 0..taps {
                out[((b * cin + c) * taps + t) * OUT_BLOCK + q] = k(o, c, t) as f32;
            }
        }
    }
    out
}

/// `out[o][p] = sum_c sum_t k[o][c][t] * x[c*plane + p + offs[t]]` for `p < span`.
/// `out` holds `cout` rounded up to `OUT_BLOCK` rows of `span`.
pub(crate) fn correlate(x: &[f32], plane: usize, cin: usize, k: &[f32], offs: &[usize], cout: usize, span: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { correlate_avx512(x, plane, cin, k, offs, cout, span, out) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { correlate_avx2(x, plane, cin, k, offs, cout, span, out) };
        }
    }
    correlate_body(x, plane, cin, k, offs, cout, span, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn correlate_avx512(x: &[f32], plane: usize, cin: usize, k: &[f32], offs: &[usize], cout: usize, span: usize, out: &mut [f32]) {
    correlate_body(x, plane, cin, k, offs, cout, span, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn correlate_avx2(x: &[f32], plane: usize, cin: usize, k: &[f32], offs: &[usize], cout: usize, span: usize, out: &mut [f32]) {
    correlate_body(x, plane, cin, k, offs, cout, span, out)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_body(x: &[f32], plane: usize, cin: usize, k: &[f32], offs: &[usize], cout: usize, span: usize, out: &mut [f32]) {
    let taps = offs.len();
    for b in 0..cout.div_ceil(OUT_BLOCK) {
        let kb = &k[b * cin * taps * OUT_BLOCK..(b + 1) * cin * taps * OUT_BLOCK];
        for p in (0..span).step_by(LANES) {
            let mut acc = [[0f32; LANES]; OUT_BLOCK];
            for c in 0..cin {
                let base = c * plane + p;
                for (t, &off) in offs.iter().enumerate() {
                    let src: &[f32; LANES] = x[base + off..base + off + LANES].try_into().unwrap();
                    let kq: &[f32; OUT_BLOCK] = kb[(c * taps + t) * OUT_BLOCK..][..OUT_BLOCK].try_into().unwrap();
                    for q in 0..OUT_BLOCK {
                        for l in 0..LANES {
                            acc[q][l] += kq[q] * src[l];
                        }
                    }
                }
            }
            for (q, a) in acc.iter().enumerate() {
                let row = (b * OUT_BLOCK + q) * span;
                out[row + p..row + p + LANES].copy_from_slice(a);
            }
        }
    }
}

const CROSS_LANES: usize = 16;
/// Below this many positions per channel the kernel gradient goes through sgemm.
const GEMM_SPAN_LIMIT: usize = 1024;
const TAP_BLOCK: usize = 4;

/// `dk[o][c][t] = sum_p dout[o][p] * x[c*plane + p + offs[t]]`, with `dout`
/// rows of length `span` (rounded up to `OUT_BLOCK` rows).
pub(crate) fn cross(dout: &[f32], cout: usize, span: usize, x: &[f32], plane: usize, cin: usize, offs: &[usize]) -> Vec<f32> {
    if span < GEMM_SPAN_LIMIT {
        return cross_gemm(dout, cout, span, x, plane, cin, offs);
    }
    let mut dk = vec![0f32; cout * cin * offs.len()];
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { cross_avx512(dout, cout, span, x, plane, cin, offs, &mut dk) };
            return dk;
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { cross_avx2(dout, cout, span, x, plane, cin, offs, &mut dk) };
            return dk;
        }
    }
    cross_body(dout, cout, span, x, plane, cin, offs, &mut dk);
    dk
}

/// One sgemm per tap: `dk[:, :, t] = dout * X_t^T`.
fn cross_gemm(dout: &[f32], cout: usize, span: usize, x: &[f32], plane: usize, cin: usize, offs: &[usize]) -> Vec<f32> {
    let taps = offs.len();
    let mut dk = vec![0f32; cout * cin * taps];
    for (t, &off) in offs.iter().enumerate() {
        assert!(off + (cin - 1) * plane + span <= x.len() && cout * span <= dout.len());
        // SAFETY: A is cout x span (row stride span), B is span x cin read from
        // x[off + p + c*plane], C is cout x cin inside dk at offset t; the
        // assert above bounds every read.
        unsafe {
            matrixmultiply::sgemm(
                cout,
                span,
                cin,
                1.0,
                dout.as_ptr(),
                span as isize,
                1,
                x.as_ptr().add(off),
                1,
                plane as isize,
                0.0,
                dk.as_mut_ptr().add(t),
                (cin * taps) as isize,
                taps as isize,
            );
        }
    }
    dk
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn cross_avx512(dout: &[f32], cout: usize, span: usize, x: &[f32], plane: usize, cin: usize, offs: &[usize], dk: &mut [f32]) {
    cross_body(dout, cout, span, x, plane, cin, offs, dk)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn cross_avx2(dout: &[f32], cout: usize, span: usize, x: &[f32], plane: usize, cin: usize, offs: &[usize], dk: &mut [f32]) {
    cross_body(dout, cout, span, x, plane, cin, offs, dk)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn cross_body(dout: &[f32], cout: usize, span: usize, x: &[f32], plane: usize, cin: usize, offs: &[usize], dk: &mut [f32]) {
    let taps = offs.len();
    for b in 0..cout.div_ceil(OUT_BLOCK) {
        let rows = &dout[b * OUT_BLOCK * span..(b + 1) * OUT_BLOCK * span];
        for c in 0..cin {
            let xc = &x[c * plane..];
            let mut t = 0;
            while t + TAP_BLOCK <= taps {
                cross_tile::<TAP_BLOCK>(rows, span, xc, &offs[t..t + TAP_BLOCK], b, c, t, cout, cin, taps, dk);
                t += TAP_BLOCK;
            }
            while t < taps {
                cross_tile::<1>(rows, span, xc, &offs[t..t + 1], b, c, t, cout, cin, taps, dk);
                t += 1;
            }
        }
    }
}

/// Accumulates an `OUT_BLOCK x T` tile of kernel-gradient entries.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn cross_tile<const T: usize>(
    rows: &[f32],
    span: usize,
    xc: &[f32],
    offs: &[usize],
    b: usize,
    c: usize,
    t0: usize,
    cout: usize,
    cin: usize,
    taps: usize,
    dk: &mut [f32],
) {
    let mut acc = [[[0f32; CROSS_LANES]; T]; OUT_BLOCK];
    let mut sv = [[0f32; CROSS_LANES]; T];
    let mut dv = [[0f32; CROSS_LANES]; OUT_BLOCK];
    for p in (0..span).step_by(CROSS_LANES) {
        for j in 0..T {
            sv[j].copy_from_slice(&xc[offs[j] + p..offs[j] + p + CROSS_LANES]);
        }
        for q in 0..OUT_BLOCK {
            dv[q].copy_from_slice(&rows[q * span + p..q * span + p + CROSS_LANES]);
        }
        for q in 0..OUT_BLOCK {
            for j in 0..T {
                for l in 0..CROSS_LANES {
                    acc[q][j][l] += dv[q][l] * sv[j][l];
                }
            }
        }
    }
    for (q, aq) in acc.iter().enumerate() {
        let o = b * OUT_BLOCK + q;
        if o < cout {
            for (j, a) in aq.iter().enumerate() {
                dk[(o * cin + c) * taps + t0 + j] = a.iter().sum();
            }
        }
    }
}

/// Forward convolution of every sample; output in `[N, Cout, H, W]` order.
pub(crate) fn forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let f = Frame::new(g);
    let offs = f.offsets(g);
    let taps = offs.len();
    let max_off = offs[taps - 1];
    let kp = pack_kernel(|o, c, t| k[(o * g.cin + c) * taps + t], g.cout, g.cin, taps);
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * plane];
    out.par_chunks_mut(g.cout * plane).enumerate().for_each(|(s, os)| {
        let xp = f.pad(&x[s * g.cin * plane..(s + 1) * g.cin * plane], g.cin, g.h, g.w, max_off);
        let mut buf = vec![0f32; padded_rows(g.cout) * f.span];
        correlate(&xp, f.plane, g.cin, &kp, &offs, g.cout, f.span, &mut buf);
        for o in 0..g.cout {
            let b = bias.map_or(0.0, |b| b[o]);
            for y in 0..g.h {
                let src = &buf[o * f.span + y * f.wp..][..g.w];
                let dst = &mut os[(o * g.h + y) * g.w..][..g.w];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = b + v as f64;
                }
            }
        }
    });
    out
}

/// Input and kernel gradients; the kernel gradient is summed over samples
/// in sample order.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let f = Frame::new(g);
    let offs = f.offsets(g);
    let taps = offs.len();
    let max_off = offs[taps - 1];
    let plane = g.h * g.w;
    // Input gradient is a correlation of dout with the flipped, transposed kernel.
    let kt = need_dx.then(|| pack_kernel(|c, o, t| k[(o * g.cin + c) * taps + (taps - 1 - t)], g.cin, g.cout, taps));
    let per_sample: Vec<(Vec<f64>, Vec<f32>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let ds = &dout[s * g.cout * plane..(s + 1) * g.cout * plane];
            let dk_s = if need_dk {
                let xp = f.pad(&x[s * g.cin * plane..(s + 1) * g.cin * plane], g.cin, g.h, g.w, max_off);
                cross(&f.widen(ds, g.cout, g.h, g.w), g.cout, f.span, &xp, f.plane, g.cin, &offs)
            } else {
                Vec::new()
            };
            let dx_s = match &kt {
                Some(kt) => {
                    let dp = f.pad(ds, g.cout, g.h, g.w, max_off);
                    let mut buf = vec![0f32; padded_rows(g.cin) * f.span];
                    correlate(&dp, f.plane, g.cout, kt, &offs, g.cin, f.span, &mut buf);
                    let mut dx = vec![0.0; g.cin * plane];
                    for c in 0..g.cin {
                        for y in 0..g.h {
                            let src = &buf[c * f.span + y * f.wp..][..g.w];
                            for (d, &v) in dx[(c * g.h + y) * g.w..][..g.w].iter_mut().zip(src) {
                                *d = v as f64;
                            }
                        }
                    }
                    dx
                }
                None => Vec::new(),
            };
            (dx_s, dk_s)
        })
        .collect();
    let dx = need_dx.then(|| per_sample.iter().flat_map(|(d, _)| d.iter().copied()).collect());
    let dk = need_dk.then(|| {
        let mut dk = vec![0.0; g.cout * g.cin * taps];
        for (_, d) in &per_sample {
            for (acc, &v) in dk.iter_mut().zip(d) {
                *acc += v as f64;
            }
        }
        dk
    });
    (dx, dk)
}
