//! Raw numeric kernels behind the differentiable ops. Shapes are validated by
//! the callers in `autodiff`; these functions assume consistent inputs.

use crate::parallel;
use crate::tensor::Tensor;

/// Stride and zero padding of a 3-D convolution, per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    /// Stride 1 with `(k-1)/2` padding, which preserves odd-kernel dims.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self { stride: [1; 3], pad: [(kernel[0] - 1) / 2, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2] }
    }

    pub fn out_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if self.stride[a] == 0 || padded < kernel[a] {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output dims of the transposed convolution: `(i-1)*s - 2p + k`.
    pub fn transposed_out_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] == 0 || self.stride[a] == 0 {
                return None;
            }
            let full = (input[a] - 1) * self.stride[a] + kernel[a];
            if full <= 2 * self.pad[a] {
                return None;
            }
            out[a] = full - 2 * self.pad[a];
        }
        Some(out)
    }
}

/// Output indices `i` in `[0, out)` whose tap `j` lands inside `[0, dim)`.
fn valid_range(out: usize, dim: usize, j: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= i*s + j - p < dim
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let hi = if dim + pad > j { ((dim + pad - j - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn dims5(t: &Tensor) -> (usize, usize, [usize; 3]) {
    let s = t.shape();
    (s[0], s[1], [s[2], s[3], s[4]])
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Iterates the runs of (output, input) index pairs connected by kernel tap
/// `j`: `f(o, i, len, step)` covers outputs `o..o+len` and inputs
/// `i, i+step, ...` along the last axis.
#[inline]
fn for_each_run(
    out_d: [usize; 3],
    in_d: [usize; 3],
    j: [usize; 3],
    g: &Conv3dGeom,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let r0 = valid_range(out_d[0], in_d[0], j[0], g.stride[0], g.pad[0]);
    let r1 = valid_range(out_d[1], in_d[1], j[1], g.stride[1], g.pad[1]);
    let r2 = valid_range(out_d[2], in_d[2], j[2], g.stride[2], g.pad[2]);
    if r2.1 <= r2.0 {
        return;
    }
    let y2 = r2.0 * g.stride[2] + j[2] - g.pad[2];
    for i0 in r0.0..r0.1 {
        let y0 = i0 * g.stride[0] + j[0] - g.pad[0];
        for i1 in r1.0..r1.1 {
            let y1 = i1 * g.stride[1] + j[1] - g.pad[1];
            let obase = (i0 * out_d[1] + i1) * out_d[2];
            let ibase = (y0 * in_d[1] + y1) * in_d[2];
            f(obase + r2.0, ibase + y2, r2.1 - r2.0, g.stride[2]);
        }
    }
}

/// Strided input slice of a run.
#[inline]
fn run_input(src: &[f64], i: usize, len: usize, step: usize) -> impl Iterator<Item = &f64> {
    src[i..i + (len - 1) * step + 1].iter().step_by(step)
}

/// `out[b,o,i] = sum_{c,j} x[b,c,i*s+j-p] * k[o,c,j]`.
pub fn conv3d_forward(x: &Tensor, k: &Tensor, geom: &Conv3dGeom, out_d: [usize; 3]) -> Tensor {
    let (b, c_in, in_d) = dims5(x);
    let (c_out, _, kd) = dims5(k);
    let ov = vol(out_d);
    let iv = vol(in_d);
    let kv = vol(kd);
    let mut out = vec![0.0; b * c_out * ov];
    let xd = x.data();
    let kdat = k.data();
    parallel::for_each_chunk(&mut out, ov, |slab, dst| {
        let (bi, o) = (slab / c_out, slab % c_out);
        for c in 0..c_in {
            let src = &xd[(bi * c_in + c) * iv..(bi * c_in + c + 1) * iv];
            for j0 in 0..kd[0] {
                for j1 in 0..kd[1] {
                    for j2 in 0..kd[2] {
                        let w = kdat[(o * c_in + c) * kv + (j0 * kd[1] + j1) * kd[2] + j2];
                        if w == 0.0 {
                            continue;
                        }
                        for_each_run(out_d, in_d, [j0, j1, j2], geom, |o, i, len, step| {
                            if step == 1 {
                                for (d, v) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                                    *d += w * v;
                                }
                            } else {
                                for (d, v) in dst[o..o + len].iter_mut().zip(run_input(src, i, len, step)) {
                                    *d += w * v;
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    Tensor::new(vec![b, c_out, out_d[0], out_d[1], out_d[2]], out).expect("conv3d shape")
}

/// Adjoint of [`conv3d_forward`] with respect to its input; this is also the
/// forward pass of the transposed convolution.
pub fn conv3d_backward_input(g: &Tensor, k: &Tensor, geom: &Conv3dGeom, in_d: [usize; 3]) -> Tensor {
    let (b, c_out, out_d) = dims5(g);
    let (_, c_in, kd) = dims5(k);
    let ov = vol(out_d);
    let iv = vol(in_d);
    let kv = vol(kd);
    let mut gx = vec![0.0; b * c_in * iv];
    let gd = g.data();
    let kdat = k.data();
    parallel::for_each_chunk(&mut gx, iv, |slab, dst| {
        let (bi, c) = (slab / c_in, slab % c_in);
        for o in 0..c_out {
            let src = &gd[(bi * c_out + o) * ov..(bi * c_out + o + 1) * ov];
            for j0 in 0..kd[0] {
                for j1 in 0..kd[1] {
                    for j2 in 0..kd[2] {
                        let w = kdat[(o * c_in + c) * kv + (j0 * kd[1] + j1) * kd[2] + j2];
                        if w == 0.0 {
                            continue;
                        }
                        for_each_run(out_d, in_d, [j0, j1, j2], geom, |o, i, len, step| {
                            if step == 1 {
                                for (d, v) in dst[i..i + len].iter_mut().zip(&src[o..o + len]) {
                                    *d += w * v;
                                }
                            } else {
                                for (k, v) in src[o..o + len].iter().enumerate() {
                                    dst[i + k * step] += w * v;
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    Tensor::new(vec![b, c_in, in_d[0], in_d[1], in_d[2]], gx).expect("conv3d grad shape")
}

/// Gradient of [`conv3d_forward`] with respect to its kernel.
pub fn conv3d_backward_kernel(g: &Tensor, x: &Tensor, geom: &Conv3dGeom, kd: [usize; 3]) -> Tensor {
    let (b, c_out, out_d) = dims5(g);
    let (_, c_in, in_d) = dims5(x);
    let ov = vol(out_d);
    let iv = vol(in_d);
    let kv = vol(kd);
    let mut gk = vec![0.0; c_out * c_in * kv];
    let gd = g.data();
    let xd = x.data();
    parallel::for_each_chunk(&mut gk, kv, |slab, dst| {
        let (o, c) = (slab / c_in, slab % c_in);
        for j0 in 0..kd[0] {
            for j1 in 0..kd[1] {
                for j2 in 0..kd[2] {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let gs = &gd[(bi * c_out + o) * ov..(bi * c_out + o + 1) * ov];
                        let xs = &xd[(bi * c_in + c) * iv..(bi * c_in + c + 1) * iv];
                        for_each_run(out_d, in_d, [j0, j1, j2], geom, |o, i, len, step| {
                            acc += gs[o..o + len].iter().zip(run_input(xs, i, len, step)).map(|(a, b)| a * b).sum::<f64>();
                        });
                    }
                    dst[(j0 * kd[1] + j1) * kd[2] + j2] = acc;
                }
            }
        }
    });
    Tensor::new(vec![c_out, c_in, kd[0], kd[1], kd[2]], gk).expect("conv3d kernel grad shape")
}

/// Adds `bias[c]` to every element of channel `c` of a `[B, C, ...]` tensor.
pub fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let s = x.shape().to_vec();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    parallel::for_each_chunk(x.data_mut(), inner, |slab, dst| {
        let b = bias[slab % c];
        dst.iter_mut().for_each(|v| *v += b);
    });
}

/// Sum over batch and spatial axes per channel.
pub fn channel_sums(g: &Tensor) -> Vec<f64> {
    let s = g.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let gd = g.data();
    (0..c)
        .map(|ch| {
            (0..b).map(|bi| gd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter().sum::<f64>()).sum()
        })
        .collect()
}

pub fn avg_pool3d_forward(x: &Tensor, kd: [usize; 3], stride: [usize; 3], out_d: [usize; 3]) -> Tensor {
    let (b, c, in_d) = dims5(x);
    let ov = vol(out_d);
    let iv = vol(in_d);
    let scale = 1.0 / vol(kd) as f64;
    let xd = x.data();
    let mut out = vec![0.0; b * c * ov];
    parallel::for_each_chunk(&mut out, ov, |slab, dst| {
        let src = &xd[slab * iv..(slab + 1) * iv];
        for i0 in 0..out_d[0] {
            for i1 in 0..out_d[1] {
                for i2 in 0..out_d[2] {
                    let mut acc = 0.0;
                    for j0 in 0..kd[0] {
                        for j1 in 0..kd[1] {
                            let row = ((i0 * stride[0] + j0) * in_d[1] + i1 * stride[1] + j1) * in_d[2];
                            for j2 in 0..kd[2] {
                                acc += src[row + i2 * stride[2] + j2];
                            }
                        }
                    }
                    dst[(i0 * out_d[1] + i1) * out_d[2] + i2] = acc * scale;
                }
            }
        }
    });
    Tensor::new(vec![b, c, out_d[0], out_d[1], out_d[2]], out).expect("pool shape")
}

pub fn avg_pool3d_backward(g: &Tensor, kd: [usize; 3], stride: [usize; 3], in_d: [usize; 3]) -> Tensor {
    let (b, c, out_d) = dims5(g);
    let ov = vol(out_d);
    let iv = vol(in_d);
    let scale = 1.0 / vol(kd) as f64;
    let gd = g.data();
    let mut gx = vec![0.0; b * c * iv];
    parallel::for_each_chunk(&mut gx, iv, |slab, dst| {
        let src = &gd[slab * ov..(slab + 1) * ov];
        for i0 in 0..out_d[0] {
            for i1 in 0..out_d[1] {
                for i2 in 0..out_d[2] {
                    let v = src[(i0 * out_d[1] + i1) * out_d[2] + i2] * scale;
                    for j0 in 0..kd[0] {
                        for j1 in 0..kd[1] {
                            let row = ((i0 * stride[0] + j0) * in_d[1] + i1 * stride[1] + j1) * in_d[2];
                            for j2 in 0..kd[2] {
                                dst[row + i2 * stride[2] + j2] += v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![b, c, in_d[0], in_d[1], in_d[2]], gx).expect("pool grad shape")
}

/// `y[b,o] = sum_d x[b,d] * w[o,d] + bias[o]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; b * out];
    parallel::for_each_chunk(&mut y, out, |row, dst| {
        let xr = &xd[row * d..(row + 1) * d];
        for (o, slot) in dst.iter_mut().enumerate() {
            let wr = &wd[o * d..(o + 1) * d];
            let mut acc = 0.0;
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *slot = acc + bias.map_or(0.0, |bt| bt.data()[o]);
        }
    });
    Tensor::new(vec![b, out], y).expect("linear shape")
}

/// Returns `(grad_input, grad_weight)` for [`linear_forward`].
pub fn linear_backward(g: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor) {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    let mut gx = vec![0.0; b * d];
    parallel::for_each_chunk(&mut gx, d, |row, dst| {
        for o in 0..out {
            let go = gd[row * out + o];
            if go == 0.0 {
                continue;
            }
            for (slot, wv) in dst.iter_mut().zip(&wd[o * d..(o + 1) * d]) {
                *slot += go * wv;
            }
        }
    });
    let mut gw = vec![0.0; out * d];
    parallel::for_each_chunk(&mut gw, d, |o, dst| {
        for row in 0..b {
            let go = gd[row * out + o];
            if go == 0.0 {
                continue;
            }
            for (slot, xv) in dst.iter_mut().zip(&xd[row * d..(row + 1) * d]) {
                *slot += go * xv;
            }
        }
    });
    (
        Tensor::new(vec![b, d], gx).expect("linear grad shape"),
        Tensor::new(vec![out, d], gw).expect("linear weight grad shape"),
    )
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let count = (b * inner) as f64;
    let xd = x.data();
    let stats = parallel::map_indices(c, |ch| {
        let mut sum = 0.0;
        for bi in 0..b {
            sum += xd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for bi in 0..b {
            for v in &xd[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                sq += (v - mean) * (v - mean);
            }
        }
        (mean, sq / count)
    });
    stats.into_iter().unzip()
}

/// Returns `xhat = (x - mean) * inv_std` and `gamma * xhat + shift` per channel.
pub fn channel_normalize(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], shift: &[f64]) -> (Tensor, Tensor) {
    let s = x.shape();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let xd = x.data();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (slab, (h, d)) in xhat.chunks_mut(inner).zip(y.chunks_mut(inner)).enumerate() {
        let ch = slab % c;
        let src = &xd[slab * inner..(slab + 1) * inner];
        for ((h, d), v) in h.iter_mut().zip(d.iter_mut()).zip(src) {
            *h = (v - mean[ch]) * inv_std[ch];
            *d = gamma[ch] * *h + shift[ch];
        }
    }
    (Tensor::new(s.to_vec(), xhat).expect("shape"), Tensor::new(s.to_vec(), y).expect("shape"))
}

/// Per-channel `(Σ g, Σ g·h)` in one pass.
pub fn channel_dot_sums(g: &Tensor, h: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = g.shape();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let (mut sg, mut sgh) = (vec![0.0; c], vec![0.0; c]);
    for (slab, (gs, hs)) in g.data().chunks(inner).zip(h.data().chunks(inner)).enumerate() {
        let ch = slab % c;
        let (mut a, mut b) = (0.0, 0.0);
        for (gv, hv) in gs.iter().zip(hs) {
            a += gv;
            b += gv * hv;
        }
        sg[ch] += a;
        sgh[ch] += b;
    }
    (sg, sgh)
}

/// `y = (x - mean[c]) * scale[c] + shift[c]` per channel.
pub fn channel_affine(x: &Tensor, mean: &[f64], scale: &[f64], shift: &[f64]) -> Tensor {
    let s = x.shape();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    parallel::for_each_chunk(&mut y, inner, |slab, dst| {
        let ch = slab % c;
        let src = &xd[slab * inner..(slab + 1) * inner];
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - mean[ch]) * scale[ch] + shift[ch];
        }
    });
    Tensor::new(s.to_vec(), y).expect("affine shape")
}
