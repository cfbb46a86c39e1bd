//! Primitive tensor operations: forward and backward kernels.
//!
//! Every kernel is a straight-line loop nest with ascending index order, so
//! results are bit-deterministic regardless of how callers schedule work.
//! Weight-gradient kernels are written per output row / channel: computing a
//! subset of rows yields bit-identical values to the corresponding rows of a
//! full computation, which is what makes gated backward exact.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-norm normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Exponential factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

// ── Shape helpers ───────────────────────────────────────────────────

/// Output spatial size for a conv/pool window; errors on degenerate setups.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidLayer(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidLayer(format!(
            "window {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Valid output-coordinate range `[lo, hi)` such that the input coordinate
/// `o * stride + k_off - pad` stays inside `[0, in_size)`.
#[inline]
fn valid_out_range(
    k_off: usize,
    pad: usize,
    stride: usize,
    in_size: usize,
    out_size: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi_in = in_size + pad;
    if hi_in <= k_off {
        return (0, 0);
    }
    let hi = ((hi_in - 1 - k_off) / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

// ── Matmul (fully-connected) ────────────────────────────────────────

/// y[b,o] = sum_i x[b,i] * w[o,i]
pub fn matmul_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b_n, in_n) = (x.shape()[0], x.shape()[1]);
    let (out_n, w_in) = (w.shape()[0], w.shape()[1]);
    if in_n != w_in {
        return Err(Error::ShapeMismatch { expected: w.shape().to_vec(), got: x.shape().to_vec() });
    }
    let mut y = Tensor::zeros(&[b_n, out_n]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for b in 0..b_n {
        let xrow = &xd[b * in_n..(b + 1) * in_n];
        for o in 0..out_n {
            let wrow = &wd[o * in_n..(o + 1) * in_n];
            let mut acc = T::ZERO;
            for i in 0..in_n {
                acc += xrow[i] * wrow[i];
            }
            yd[b * out_n + o] = acc;
        }
    }
    Ok(y)
}

/// dx[b,i] = sum_o dy[b,o] * w[o,i]
pub fn matmul_backward_input<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (b_n, out_n) = (dy.shape()[0], dy.shape()[1]);
    let in_n = w.shape()[1];
    let mut dx = Tensor::zeros(&[b_n, in_n]);
    let dyd = dy.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    for b in 0..b_n {
        let dxrow = &mut dxd[b * in_n..(b + 1) * in_n];
        for o in 0..out_n {
            let g = dyd[b * out_n + o];
            let wrow = &wd[o * in_n..(o + 1) * in_n];
            for i in 0..in_n {
                dxrow[i] += g * wrow[i];
            }
        }
    }
    dx
}

/// Weight gradient for the listed output rows only, packed in listing order.
/// Row `o`: dw[o,i] = sum_b dy[b,o] * x[b,i]
pub fn matmul_backward_weight_rows<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    rows: &[usize],
) -> Tensor<T> {
    let (b_n, out_n) = (dy.shape()[0], dy.shape()[1]);
    let in_n = x.shape()[1];
    let mut dw = Tensor::zeros(&[rows.len(), in_n]);
    let dyd = dy.data();
    let xd = x.data();
    let dwd = dw.data_mut();
    for (r, &o) in rows.iter().enumerate() {
        let drow = &mut dwd[r * in_n..(r + 1) * in_n];
        for b in 0..b_n {
            let g = dyd[b * out_n + o];
            let xrow = &xd[b * in_n..(b + 1) * in_n];
            for i in 0..in_n {
                drow[i] += g * xrow[i];
            }
        }
    }
    dw
}

// ── Bias add ────────────────────────────────────────────────────────

/// 2-d input: bias per column; 4-d input: bias per channel.
pub fn bias_add_forward<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = x.clone();
    let bd = bias.data();
    match x.shape() {
        [b_n, out_n] => {
            if bd.len() != *out_n {
                return Err(Error::ShapeMismatch {
                    expected: vec![*out_n],
                    got: bias.shape().to_vec(),
                });
            }
            let yd = y.data_mut();
            for b in 0..*b_n {
                for o in 0..*out_n {
                    yd[b * out_n + o] += bd[o];
                }
            }
        }
        [b_n, c_n, h, w] => {
            if bd.len() != *c_n {
                return Err(Error::ShapeMismatch {
                    expected: vec![*c_n],
                    got: bias.shape().to_vec(),
                });
            }
            let plane = h * w;
            let yd = y.data_mut();
            for b in 0..*b_n {
                for c in 0..*c_n {
                    let base = (b * c_n + c) * plane;
                    for p in 0..plane {
                        yd[base + p] += bd[c];
                    }
                }
            }
        }
        other => {
            return Err(Error::ShapeMismatch { expected: vec![0, 0], got: other.to_vec() });
        }
    }
    Ok(y)
}

/// Bias gradient for the listed rows/channels, packed in listing order.
pub fn bias_backward_rows<T: Scalar>(dy: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let mut db = Tensor::zeros(&[rows.len()]);
    let dyd = dy.data();
    let dbd = db.data_mut();
    match dy.shape() {
        [b_n, out_n] => {
            for (r, &o) in rows.iter().enumerate() {
                let mut acc = T::ZERO;
                for b in 0..*b_n {
                    acc += dyd[b * out_n + o];
                }
                dbd[r] = acc;
            }
        }
        [b_n, c_n, h, w] => {
            let plane = h * w;
            for (r, &c) in rows.iter().enumerate() {
                let mut acc = T::ZERO;
                for b in 0..*b_n {
                    let base = (b * c_n + c) * plane;
                    for p in 0..plane {
                        acc += dyd[base + p];
                    }
                }
                dbd[r] = acc;
            }
        }
        _ => unreachable!("bias grad on non 2d/4d tensor"),
    }
    db
}

// ── Conv2d ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

/// x: [B, Cin, H, W], w: [Cout, Cin, Kh, Kw] -> [B, Cout, Ho, Wo]
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let [b_n, c_in, h, wd_] = x.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0; 4], got: x.shape().to_vec() });
    };
    let [c_out, wc_in, kh, kw] = w.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0; 4], got: w.shape().to_vec() });
    };
    if wc_in != c_in {
        return Err(Error::ShapeMismatch { expected: w.shape().to_vec(), got: x.shape().to_vec() });
    }
    let (b_n, c_in, h, w_in) = (*b_n, *c_in, *h, *wd_);
    let (c_out, kh, kw) = (*c_out, *kh, *kw);
    let ho = conv_out_size(h, kh, geom.stride, geom.padding)?;
    let wo = conv_out_size(w_in, kw, geom.stride, geom.padding)?;

    let mut y = Tensor::zeros(&[b_n, c_out, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    let yd = y.data_mut();
    let (s, p) = (geom.stride, geom.padding);

    for b in 0..b_n {
        for co in 0..c_out {
            let ybase = (b * c_out + co) * ho * wo;
            for ci in 0..c_in {
                let xbase = (b * c_in + ci) * h * w_in;
                let wbase = (co * c_in + ci) * kh * kw;
                for k_r in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(k_r, p, s, h, ho);
                    for k_c in 0..kw {
                        let (ow_lo, ow_hi) = valid_out_range(k_c, p, s, w_in, wo);
                        let wv = wdat[wbase + k_r * kw + k_c];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + k_r - p;
                            let xrow = xbase + ih * w_in;
                            let yrow = ybase + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * s + k_c - p;
                                yd[yrow + ow] += wv * xd[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// dx for conv2d. dy: [B, Cout, Ho, Wo] -> [B, Cin, H, W]
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: &[usize],
    geom: ConvGeom,
) -> Tensor<T> {
    let (b_n, c_out, ho, wo) =
        (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (c_in, h, w_in) = (in_shape[1], in_shape[2], in_shape[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (s, p) = (geom.stride, geom.padding);

    let mut dx = Tensor::zeros(in_shape);
    let dyd = dy.data();
    let wdat = w.data();
    let dxd = dx.data_mut();

    for b in 0..b_n {
        for co in 0..c_out {
            let dybase = (b * c_out + co) * ho * wo;
            for ci in 0..c_in {
                let dxbase = (b * c_in + ci) * h * w_in;
                let wbase = (co * c_in + ci) * kh * kw;
                for k_r in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(k_r, p, s, h, ho);
                    for k_c in 0..kw {
                        let (ow_lo, ow_hi) = valid_out_range(k_c, p, s, w_in, wo);
                        let wv = wdat[wbase + k_r * kw + k_c];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + k_r - p;
                            let dxrow = dxbase + ih * w_in;
                            let dyrow = dybase + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * s + k_c - p;
                                dxd[dxrow + iw] += wv * dyd[dyrow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Weight gradient for the listed output channels only, packed in listing
/// order: [rows.len(), Cin, Kh, Kw].
pub fn conv2d_backward_weight_rows<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    kernel: (usize, usize),
    geom: ConvGeom,
    rows: &[usize],
) -> Tensor<T> {
    let (b_n, c_out, ho, wo) =
        (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (c_in, h, w_in) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = kernel;
    let (s, p) = (geom.stride, geom.padding);

    let mut dw = Tensor::zeros(&[rows.len(), c_in, kh, kw]);
    let dyd = dy.data();
    let xd = x.data();
    let dwd = dw.data_mut();

    for (r, &co) in rows.iter().enumerate() {
        for b in 0..b_n {
            let dybase = (b * c_out + co) * ho * wo;
            for ci in 0..c_in {
                let xbase = (b * c_in + ci) * h * w_in;
                let wbase = (r * c_in + ci) * kh * kw;
                for k_r in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(k_r, p, s, h, ho);
                    for k_c in 0..kw {
                        let (ow_lo, ow_hi) = valid_out_range(k_c, p, s, w_in, wo);
                        let mut acc = T::ZERO;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + k_r - p;
                            let xrow = xbase + ih * w_in;
                            let dyrow = dybase + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * s + k_c - p;
                                acc += dyd[dyrow + ow] * xd[xrow + iw];
                            }
                        }
                        dwd[wbase + k_r * kw + k_c] += acc;
                    }
                }
            }
        }
    }
    dw
}

// ── ReLU ────────────────────────────────────────────────────────────

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Pass-through where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    let xd = x.data();
    for (g, &v) in dx.data_mut().iter_mut().zip(xd.iter()) {
        if v <= T::ZERO {
            *g = T::ZERO;
        }
    }
    dx
}

// ── Pooling ─────────────────────────────────────────────────────────

/// Max pool over non-padded windows; ties resolve to the lowest flat index.
/// Returns the output and one flat input index per output element.
pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b_n, c_n, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0; 4], got: x.shape().to_vec() });
    };
    let (b_n, c_n, h, w) = (*b_n, *c_n, *h, *w);
    let ho = conv_out_size(h, kernel, stride, 0)?;
    let wo = conv_out_size(w, kernel, stride, 0)?;
    let mut y = Tensor::zeros(&[b_n, c_n, ho, wo]);
    let mut arg = vec![0u32; b_n * c_n * ho * wo];
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..b_n {
        for c in 0..c_n {
            let xbase = (b * c_n + c) * h * w;
            let ybase = (b * c_n + c) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = xd[xbase + oh * stride * w + ow * stride];
                    let mut best_idx = xbase + oh * stride * w + ow * stride;
                    for k_r in 0..kernel {
                        for k_c in 0..kernel {
                            let idx = xbase + (oh * stride + k_r) * w + ow * stride + k_c;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    yd[ybase + oh * wo + ow] = best;
                    arg[ybase + oh * wo + ow] = best_idx as u32;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    arg: &[u32],
    in_shape: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (g, &idx) in dy.data().iter().zip(arg.iter()) {
        dxd[idx as usize] += *g;
    }
    dx
}

pub fn avg_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let [b_n, c_n, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0; 4], got: x.shape().to_vec() });
    };
    let (b_n, c_n, h, w) = (*b_n, *c_n, *h, *w);
    let ho = conv_out_size(h, kernel, stride, 0)?;
    let wo = conv_out_size(w, kernel, stride, 0)?;
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let mut y = Tensor::zeros(&[b_n, c_n, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..b_n {
        for c in 0..c_n {
            let xbase = (b * c_n + c) * h * w;
            let ybase = (b * c_n + c) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::ZERO;
                    for k_r in 0..kernel {
                        for k_c in 0..kernel {
                            acc += xd[xbase + (oh * stride + k_r) * w + ow * stride + k_c];
                        }
                    }
                    yd[ybase + oh * wo + ow] = acc * inv;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    in_shape: &[usize],
) -> Tensor<T> {
    let (b_n, c_n, ho, wo) =
        (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let mut dx = Tensor::zeros(in_shape);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for b in 0..b_n {
        for c in 0..c_n {
            let xbase = (b * c_n + c) * h * w;
            let ybase = (b * c_n + c) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dyd[ybase + oh * wo + ow] * inv;
                    for k_r in 0..kernel {
                        for k_c in 0..kernel {
                            dxd[xbase + (oh * stride + k_r) * w + ow * stride + k_c] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ── Batch norm ──────────────────────────────────────────────────────

/// Per-channel statistics saved by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Biased per-channel batch variance (used for running-stat updates).
    pub var: Vec<T>,
}

/// Training mode: normalize with batch statistics.
pub fn batchnorm2d_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let [b_n, c_n, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0; 4], got: x.shape().to_vec() });
    };
    let (b_n, c_n, h, w) = (*b_n, *c_n, *h, *w);
    let plane = h * w;
    let count = b_n * plane;
    if count == 0 {
        return Err(Error::InvalidLayer("batch norm over zero elements".into()));
    }
    let inv_count = T::from_f64(1.0 / count as f64);
    let eps = T::from_f64(BN_EPS);

    let xd = x.data();
    let mut mean = vec![T::ZERO; c_n];
    let mut var = vec![T::ZERO; c_n];
    for c in 0..c_n {
        let mut acc = T::ZERO;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for p in 0..plane {
                acc += xd[base + p];
            }
        }
        let m = acc * inv_count;
        let mut vacc = T::ZERO;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for p in 0..plane {
                let d = xd[base + p] - m;
                vacc += d * d;
            }
        }
        mean[c] = m;
        var[c] = vacc * inv_count;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    let gd = gamma.data();
    let bd = beta.data();
    let yd = y.data_mut();
    for b in 0..b_n {
        for c in 0..c_n {
            let base = (b * c_n + c) * plane;
            let (m, istd, g, bt) = (mean[c], inv_std[c], gd[c], bd[c]);
            for p in 0..plane {
                yd[base + p] = g * ((xd[base + p] - m) * istd) + bt;
            }
        }
    }
    Ok((y, BnSaved { mean, inv_std, var }))
}

/// Evaluation mode: normalize with running statistics.
pub fn batchnorm2d_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b_n, c_n, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0; 4], got: x.shape().to_vec() });
    };
    let (b_n, c_n, plane) = (*b_n, *c_n, h * w);
    let eps = T::from_f64(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for c in 0..c_n {
        let istd = T::ONE / (running_var.data()[c] + eps).sqrt();
        let m = running_mean.data()[c];
        let g = gamma.data()[c];
        let bt = beta.data()[c];
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for p in 0..plane {
                yd[base + p] = g * ((xd[base + p] - m) * istd) + bt;
            }
        }
    }
    Ok(y)
}

/// Per-channel reduction sums needed by both the input gradient and the
/// affine-parameter gradients: s1[c] = sum dy, s2[c] = sum dy * xhat.
pub fn batchnorm2d_reduce<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    saved: &BnSaved<T>,
    channels: &[usize],
) -> (Vec<T>, Vec<T>) {
    let (b_n, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let dyd = dy.data();
    let xd = x.data();
    let mut s1 = vec![T::ZERO; channels.len()];
    let mut s2 = vec![T::ZERO; channels.len()];
    for (r, &c) in channels.iter().enumerate() {
        let (m, istd) = (saved.mean[c], saved.inv_std[c]);
        let mut a1 = T::ZERO;
        let mut a2 = T::ZERO;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for p in 0..plane {
                let g = dyd[base + p];
                a1 += g;
                a2 += g * (xd[base + p] - m) * istd;
            }
        }
        s1[r] = a1;
        s2[r] = a2;
    }
    (s1, s2)
}

/// Input gradient for training-mode batch norm. `s1`/`s2` are the
/// full-channel reductions from [`batchnorm2d_reduce`] over all channels.
pub fn batchnorm2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    s1: &[T],
    s2: &[T],
) -> Tensor<T> {
    let (b_n, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let count = b_n * plane;
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut dx = Tensor::zeros(x.shape());
    let dyd = dy.data();
    let xd = x.data();
    let gd = gamma.data();
    let dxd = dx.data_mut();
    for c in 0..c_n {
        let (m, istd) = (saved.mean[c], saved.inv_std[c]);
        let scale = gd[c] * istd;
        let mean_dy = s1[c] * inv_count;
        let mean_dy_xhat = s2[c] * inv_count;
        for b in 0..b_n {
            let base = (b * c_n + c) * plane;
            for p in 0..plane {
                let xhat = (xd[base + p] - m) * istd;
                dxd[base + p] = scale * (dyd[base + p] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    dx
}

// ── Flatten ─────────────────────────────────────────────────────────

pub fn flatten_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let b = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    x.clone().reshaped(&[b, rest]).expect("flatten preserves element count")
}

// ── Softmax cross-entropy ───────────────────────────────────────────

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn softmax_cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u32]) -> Result<T> {
    let (loss, _) = softmax_ce_inner(logits, labels, false)?;
    Ok(loss)
}

/// Loss plus gradient with respect to the logits (already divided by the
/// batch size, ready to seed a backward sweep).
pub fn softmax_cross_entropy_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
) -> Result<(T, Tensor<T>)> {
    let (loss, grad) = softmax_ce_inner(logits, labels, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn softmax_ce_inner<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    want_grad: bool,
) -> Result<(T, Option<Tensor<T>>)> {
    let [b_n, c_n] = logits.shape() else {
        return Err(Error::ShapeMismatch { expected: vec![0, 0], got: logits.shape().to_vec() });
    };
    let (b_n, c_n) = (*b_n, *c_n);
    if labels.len() != b_n {
        return Err(Error::ShapeMismatch { expected: vec![b_n], got: vec![labels.len()] });
    }
    for &l in labels {
        if l as usize >= c_n {
            return Err(Error::Dataset(format!("label {l} out of range for {c_n} classes")));
        }
    }
    if b_n == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    let ld = logits.data();
    let inv_b = T::from_f64(1.0 / b_n as f64);
    let mut grad = if want_grad { Some(Tensor::zeros(&[b_n, c_n])) } else { None };
    let mut total = T::ZERO;
    for b in 0..b_n {
        let row = &ld[b * c_n..(b + 1) * c_n];
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maximum(v);
        }
        let mut z = T::ZERO;
        for &v in row {
            z += (v - m).exp();
        }
        let label = labels[b] as usize;
        total += z.ln() + m - row[label];
        if let Some(g) = grad.as_mut() {
            let gd = g.data_mut();
            for c in 0..c_n {
                let p = (row[c] - m).exp() / z;
                let delta = if c == label { T::ONE } else { T::ZERO };
                gd[b * c_n + c] = (p - delta) * inv_b;
            }
        }
    }
    Ok((total * inv_b, grad))
}
