//! Single-sample CxHxW kernels: same-padded convolution (im2col + sgemm),
//! pooling, nearest upsampling and their adjoints.

use crate::tensor::Tensor;

use super::params::ConvLayer;

/// Saved state for the convolution adjoint.
#[derive(Debug, Clone)]
pub(crate) struct ConvTrace {
    /// im2col matrix `(in_ch * k * k) x (out_h * out_w)`; empty for 1x1/stride-1
    /// layers, whose column matrix is the input itself.
    col: Vec<f32>,
    input: Option<Tensor>,
    in_shape: (usize, usize, usize),
}

fn out_dim(n: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (n + 2 * pad - k) / stride + 1
}

fn im2col(input: &Tensor, k: usize, stride: usize) -> (Vec<f32>, usize, usize) {
    let (c, h, w) = input.chw();
    let pad = (k / 2) as isize;
    let oh = out_dim(h, k, stride);
    let ow = out_dim(w, k, stride);
    let p = oh * ow;
    let mut col = vec![0.0f32; c * k * k * p];
    let src = input.data();
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let shift = kx as isize - pad;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

fn col2im(col: &[f32], shape: (usize, usize, usize), k: usize, stride: usize) -> Tensor {
    let (c, h, w) = shape;
    let pad = (k / 2) as isize;
    let oh = out_dim(h, k, stride);
    let ow = out_dim(w, k, stride);
    let p = oh * ow;
    let mut out = Tensor::zeros(&[c, h, w]);
    let dst = out.data_mut();
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides above address only elements inside `a`, `b` and `c`,
    // whose lengths are checked by every caller's shape bookkeeping.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(layer: &ConvLayer, input: &Tensor) -> (Tensor, ConvTrace) {
    let (c, h, w) = input.chw();
    let k = layer.kernel_size();
    let o = layer.out_channels();
    debug_assert_eq!(c, layer.in_channels());
    let direct = k == 1 && layer.stride == 1;
    let (col, oh, ow) = if direct {
        (Vec::new(), h, w)
    } else {
        im2col(input, k, layer.stride)
    };
    let p = oh * ow;
    let ckk = c * k * k;
    let mut out = vec![0.0f32; o * p];
    for (oc, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(layer.bias.data()[oc]);
    }
    let b = if direct { input.data() } else { &col[..] };
    gemm(o, ckk, p, layer.weight.data(), ckk as isize, 1, b, p as isize, 1, 1.0, &mut out);
    let trace = ConvTrace {
        col,
        input: direct.then(|| input.clone()),
        in_shape: (c, h, w),
    };
    (Tensor::from_raw(vec![o, oh, ow], out), trace)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the input gradient is
/// skipped when `need_input` is false.
pub(crate) fn conv_backward(
    layer: &ConvLayer,
    trace: &ConvTrace,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c, _, _) = trace.in_shape;
    let k = layer.kernel_size();
    let (o, oh, ow) = grad_out.chw();
    let p = oh * ow;
    let ckk = c * k * k;
    let col: &[f32] = match &trace.input {
        Some(t) => t.data(),
        None => &trace.col,
    };
    let g = grad_out.data();

    let mut gw = vec![0.0f32; o * ckk];
    // gW = gout * col^T
    gemm(o, p, ckk, g, p as isize, 1, col, 1, p as isize, 0.0, &mut gw);
    let gb: Vec<f32> = g.chunks(p).map(|ch| ch.iter().sum()).collect();

    let gin = need_input.then(|| {
        let mut gcol = vec![0.0f32; ckk * p];
        // gcol = W^T * gout
        gemm(
            ckk,
            o,
            p,
            layer.weight.data(),
            1,
            ckk as isize,
            g,
            p as isize,
            1,
            0.0,
            &mut gcol,
        );
        if trace.input.is_some() {
            Tensor::from_raw(vec![c, oh, ow], gcol)
        } else {
            col2im(&gcol, trace.in_shape, k, layer.stride)
        }
    });
    (
        gin,
        Tensor::from_raw(layer.weight.shape().to_vec(), gw),
        Tensor::from_raw(vec![o], gb),
    )
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the positivity of the ReLU output.
pub(crate) fn relu_backward(grad: &mut Tensor, output: &Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the flat argmax index of every output cell.
pub(crate) fn max_pool2(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = input.chw();
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    (Tensor::from_raw(vec![c, oh, ow], out), arg)
}

pub(crate) fn max_pool2_backward(grad: &Tensor, argmax: &[u32], in_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = in_shape;
    let mut out = Tensor::zeros(&[c, h, w]);
    let dst = out.data_mut();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        dst[i as usize] += g;
    }
    out
}

/// 2x2 average pooling of a single-channel mask.
pub(crate) fn avg_pool2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.chw();
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push(0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]));
            }
        }
    }
    Tensor::from_raw(vec![c, oh, ow], out)
}

pub(crate) fn upsample2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.chw();
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let s = &src[ci * h * w + (y / 2) * w..ci * h * w + (y / 2 + 1) * w];
            let d = &mut out[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
            for (x, v) in d.iter_mut().enumerate() {
                *v = s[x / 2];
            }
        }
    }
    Tensor::from_raw(vec![c, oh, ow], out)
}

pub(crate) fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (c, oh, ow) = grad.chw();
    let (h, w) = (oh / 2, ow / 2);
    let src = grad.data();
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            let s = &src[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
            let d = &mut out[ci * h * w + (y / 2) * w..ci * h * w + (y / 2 + 1) * w];
            for (x, &g) in s.iter().enumerate() {
                d[x / 2] += g;
            }
        }
    }
    Tensor::from_raw(vec![c, h, w], out)
}

/// `x * (1 + m)` with a single-channel gate `m` broadcast over channels.
pub(crate) fn gate_with_mask(x: &mut Tensor, mask: &Tensor) {
    let (c, h, w) = x.chw();
    let m = mask.data();
    debug_assert_eq!(m.len(), h * w);
    for ci in 0..c {
        for (v, &g) in x.data_mut()[ci * h * w..(ci + 1) * h * w].iter_mut().zip(m) {
            *v += *v * g;
        }
    }
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = a.chw();
    let (cb, hb, wb) = b.chw();
    debug_assert_eq!((h, w), (hb, wb));
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_raw(vec![ca + cb, h, w], data)
}

pub(crate) fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (c, h, w) = t.chw();
    let (a, b) = t.data().split_at(first * h * w);
    (
        Tensor::from_raw(vec![first, h, w], a.to_vec()),
        Tensor::from_raw(vec![c - first, h, w], b.to_vec()),
    )
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
