//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hcl_core::{HyperConvLayer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six nested loops, zero padding, "same" output size.
pub fn conv_reference(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, dil: usize) -> Tensor {
    let s = x.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let ks = k.shape();
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (ph, pw) = ((kh / 2 * dil) as isize, (kw / 2 * dil) as isize);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for i in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = r as isize + (u * dil) as isize - ph;
                                let z = c as isize + (v * dil) as isize - pw;
                                if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                    continue;
                                }
                                acc += kd[((o * cin + i) * kh + u) * kw + v]
                                    * xd[((b * cin + i) * h + y as usize) * w + z as usize];
                            }
                        }
                    }
                    out[((b * cout + o) * h + r) * w + c] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, h, w], out).unwrap()
}

pub fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .filter(|e| e.is_finite())
        .fold(0.0, f64::max)
}

/// Largest error relative to the largest reference magnitude.
pub fn scaled_err(a: &Tensor, reference: &Tensor) -> f64 {
    let scale = reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(reference).unwrap() / scale
}

/// Evaluates the hypernetwork MLP at a single coordinate with plain loops,
/// returning the `Nin * Nout` outputs (pair offsets included).
pub fn mlp_at(layer: &HyperConvLayer, row: f64, col: f64) -> Vec<f64> {
    let params = layer.parameters();
    let slope = layer.spec().leak_slope;
    let mut h = vec![row, col];
    for l in 0..4 {
        let (w, b) = (params[2 * l], params[2 * l + 1]);
        let (fin, fout) = (w.shape()[0], w.shape()[1]);
        h = (0..fout)
            .map(|j| {
                let z = b.data()[j] + (0..fin).map(|i| h[i] * w.data()[i * fout + j]).sum::<f64>();
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            })
            .collect();
    }
    let (fw, fb) = (params[8], params[9]);
    let pairs = fb.numel();
    let nl = fw.shape()[0];
    let offsets = layer.spec().pair_offset.then(|| params[10]);
    (0..pairs)
        .map(|p| {
            fb.data()[p]
                + (0..nl).map(|i| h[i] * fw.data()[i * pairs + p]).sum::<f64>()
                + offsets.map_or(0.0, |o| o.data()[p])
        })
        .collect()
}

/// Kernel `[Nout, Nin, h, w]` assembled from per-coordinate MLP calls.
pub fn kernel_reference(layer: &HyperConvLayer) -> Tensor {
    let s = layer.spec();
    let (nin, nout, kh, kw) = (s.in_channels, s.out_channels, s.kernel_h, s.kernel_w);
    let mut out = vec![0.0; nout * nin * kh * kw];
    for u in 0..kh {
        for v in 0..kw {
            let vals = mlp_at(layer, u as f64 - (kh / 2) as f64, v as f64 - (kw / 2) as f64);
            for q in 0..nout {
                for c in 0..nin {
                    out[((q * nin + c) * kh + u) * kw + v] = vals[q * nin + c];
                }
            }
        }
    }
    Tensor::new(vec![nout, nin, kh, kw], out).unwrap()
}

/// Gives every parameter of `layer` fresh normal values.
pub fn randomize(layer: &mut HyperConvLayer, seed: u64) {
    let mut r = rng(seed);
    for t in layer.parameters_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
}

/// Naive discrete Laplacian: mean over interior cells of
/// `|k[r-1,c] + k[r+1,c] + k[r,c-1] + k[r,c+1] - 4 k[r,c]|`.
pub fn laplacian_reference(k: &[f64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let at = |y: usize, x: usize| k[y * w + x];
            total += (at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c)).abs();
            count += 1;
        }
    }
    total / count as f64
}
