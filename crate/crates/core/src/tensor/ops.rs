//! Forward and backward kernels on raw buffers. The tape wires these up.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv2d_geom(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, c, h, w) = input
        .dims4()
        .map_err(|_| Error::shape("conv2d", format!("input must be NCHW, got {:?}", input.shape())))?;
    let (o, ki, kh, kw) = kernel.dims4().map_err(|_| {
        Error::shape("conv2d", format!("kernel must be OIKhKw, got {:?}", kernel.shape()))
    })?;
    if ki != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channel axis (1) is {c} but kernel input axis (1) is {ki}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    let oh = conv_out_size(h, kh, stride, pad).ok_or_else(|| {
        Error::shape("conv2d", format!("height axis (2): {h} + 2*{pad} < kernel {kh}"))
    })?;
    let ow = conv_out_size(w, kw, stride, pad).ok_or_else(|| {
        Error::shape("conv2d", format!("width axis (3): {w} + 2*{pad} < kernel {kw}"))
    })?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < inp
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if inp + pad > k {
        ((inp + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            let out_base = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let in_base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = tap_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let wv = kernel[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(g.ow, g.w, kx, g.stride, g.pad);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * g.stride + kx - g.pad;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut out[out_base + oy * g.ow + x0..out_base + oy * g.ow + x1];
                            let irow = &input[in_base + iy * g.w + ix0..];
                            if g.stride == 1 {
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            } else {
                                for (o, i) in orow.iter_mut().zip(irow.iter().step_by(g.stride)) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut gin = if need_input {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };
    let mut gk = if need_kernel {
        vec![0.0; kernel.len()]
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        for o in 0..g.o {
            let out_base = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let in_base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = tap_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let kidx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = kernel[kidx];
                        let (x0, x1) = tap_range(g.ow, g.w, kx, g.stride, g.pad);
                        let mut acc = 0.0;
                        if x0 < x1 {
                            let ix0 = x0 * g.stride + kx - g.pad;
                            let span = (x1 - x0 - 1) * g.stride + 1;
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let go = &grad_out[out_base + oy * g.ow + x0..out_base + oy * g.ow + x1];
                                let ib = in_base + iy * g.w + ix0;
                                if need_input {
                                    let gi = &mut gin[ib..ib + span];
                                    for (gi, go) in gi.iter_mut().step_by(g.stride).zip(go) {
                                        *gi += go * wv;
                                    }
                                }
                                if need_kernel {
                                    let inp = &input[ib..ib + span];
                                    for (i, go) in inp.iter().step_by(g.stride).zip(go) {
                                        acc += go * i;
                                    }
                                }
                            }
                        }
                        if need_kernel {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Zero-padded cross-correlation along the channel axis of an `N x C` descriptor.
pub(crate) fn conv1d_channels_forward(input: &[f64], n: usize, c: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for i in 0..c {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    acc += kv * input[b * c + src as usize];
                }
            }
            out[b * c + i] = acc;
        }
    }
    out
}

pub(crate) fn conv1d_channels_backward(
    input: &[f64],
    n: usize,
    c: usize,
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let half = (kernel.len() / 2) as isize;
    let mut gin = vec![0.0; n * c];
    let mut gk = vec![0.0; kernel.len()];
    for b in 0..n {
        for i in 0..c {
            let go = grad_out[b * c + i];
            for (j, &kv) in kernel.iter().enumerate() {
                let src = i as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    let s = b * c + src as usize;
                    gin[s] += go * kv;
                    gk[j] += go * input[s];
                }
            }
        }
    }
    (gin, gk)
}

/// Shape both operands broadcast to: equal rank, each axis equal or 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "broadcast",
            format!("rank mismatch {a:?} vs {b:?}"),
        ));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(
                "broadcast",
                format!("axis {axis}: {x} vs {y} in {a:?} and {b:?}"),
            )),
        })
        .collect()
}

/// For every flat index of `out_shape`, the flat index into `in_shape`.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for axis in (0..rank).rev() {
        in_strides[axis] = if in_shape[axis] == 1 { 0 } else { s };
        s *= in_shape[axis];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat_in = 0usize;
    for _ in 0..total {
        map.push(flat_in);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            flat_in += in_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            flat_in -= in_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    map
}

/// Neumaier-compensated sum. Reductions over whole feature maps use it so
/// that finite-difference probes are not swamped by summation rounding.
pub(crate) fn accurate_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source index pair and weights for align-corners-false bilinear sampling.
pub(crate) fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let l1 = src - i0 as f64;
            let l1 = if i1 == i0 { 0.0 } else { l1 };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                dst[oy * ow + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let gi = &mut gin[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                gi[y0 * w + x0] += g * wy0 * wx0;
                gi[y0 * w + x1] += g * wy0 * wx1;
                gi[y1 * w + x0] += g * wy1 * wx0;
                gi[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    gin
}
