//! Forward and backward kernels for every layer type.
//!
//! The gradient tape and the plain (inference) forward path both call these,
//! so there is exactly one implementation of each op's math. Convolution runs
//! through im2col + a small matmul; the naive sliding-window oracle lives in
//! the test suite and pins the im2col path to 1e-6.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// out[m x n] += a[m x k] . b[k x n]
fn matmul_nn<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[m x n] += a[m x k] . b[n x k]^T
fn matmul_nt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m x n] += a[k x m]^T . b[k x n]
fn matmul_tn<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::ZERO {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += a_pi * b_row[j];
            }
        }
    }
}

/// Spatial size after a windowed op: floor((len + 2*pad - kernel)/stride) + 1.
pub fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let spatial = oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * spatial);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * spatial;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy as usize >= h {
                        dst.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src_row = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    if stride == 1 {
                        // contiguous span: ix = ox + kj - pad for ox in 0..ow
                        let shift = kj as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        dst[..ox_lo.min(ow)].iter_mut().for_each(|v| *v = T::ZERO);
                        if ox_hi > ox_lo {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                        dst[ox_hi.max(ox_lo)..]
                            .iter_mut()
                            .for_each(|v| *v = T::ZERO);
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *v = if ix >= 0 && (ix as usize) < w {
                                src_row[ix as usize]
                            } else {
                                T::ZERO
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Float>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let spatial = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * spatial;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row =
                        &mut dx[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    if stride == 1 {
                        let shift = kj as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        if ox_hi > ox_lo {
                            let dst_lo = (ox_lo as isize + shift) as usize;
                            for (d, s) in dst_row[dst_lo..dst_lo + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&src[ox_lo..ox_hi])
                            {
                                *d += *s;
                            }
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    /// im2col row count: c * kh * kw
    ckk: usize,
}

fn conv_geometry<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let (n, c, h, w) = x.dims4("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weights must be [F, C, kH, kW], got {:?}", ws),
        });
    }
    let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != c {
        return Err(Error::ChannelMismatch {
            layer: "conv2d".into(),
            expected: wc,
            actual: c,
        });
    }
    if bias.shape() != [f] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias must be [{}], got {:?}", f, bias.shape()),
        });
    }
    let oh = out_extent(h, kh, stride, pad).ok_or_else(|| Error::ShapeMismatch {
        op: "conv2d",
        detail: format!(
            "kernel {}x{} stride {} does not fit {}x{} (pad {})",
            kh, kw, stride, h, w, pad
        ),
    })?;
    let ow = out_extent(w, kw, stride, pad).ok_or_else(|| Error::ShapeMismatch {
        op: "conv2d",
        detail: format!(
            "kernel {}x{} stride {} does not fit {}x{} (pad {})",
            kh, kw, stride, h, w, pad
        ),
    })?;
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh,
        ow,
        ckk: c * kh * kw,
    })
}

/// Cross-correlation with bias, NCHW in, NFH'W' out.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, bias, stride, pad)?;
    let spatial = g.oh * g.ow;
    let image = g.c * g.h * g.w;
    let mut out = vec![T::ZERO; g.n * g.f * spatial];
    let mut col = vec![T::ZERO; g.ckk * spatial];
    for img in 0..g.n {
        im2col(
            &x.data()[img * image..(img + 1) * image],
            g.c,
            g.h,
            g.w,
            g.kh,
            g.kw,
            stride,
            pad,
            g.oh,
            g.ow,
            &mut col,
        );
        let out_img = &mut out[img * g.f * spatial..(img + 1) * g.f * spatial];
        matmul_nn(weight.data(), &col, g.f, g.ckk, spatial, out_img);
        for fi in 0..g.f {
            let b = bias.data()[fi];
            for v in &mut out_img[fi * spatial..(fi + 1) * spatial] {
                *v += b;
            }
        }
    }
    Tensor::from_vec(&[g.n, g.f, g.oh, g.ow], out)
}

/// Gradients w.r.t. input, weights, and bias.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(x, weight, bias, stride, pad)?;
    let spatial = g.oh * g.ow;
    let image = g.c * g.h * g.w;
    debug_assert_eq!(dy.shape(), [g.n, g.f, g.oh, g.ow]);

    let mut dx = vec![T::ZERO; g.n * image];
    let mut dw = vec![T::ZERO; g.f * g.ckk];
    let mut db = vec![T::ZERO; g.f];
    let mut col = vec![T::ZERO; g.ckk * spatial];
    let mut dcol = vec![T::ZERO; g.ckk * spatial];

    for img in 0..g.n {
        let dy_img = &dy.data()[img * g.f * spatial..(img + 1) * g.f * spatial];
        im2col(
            &x.data()[img * image..(img + 1) * image],
            g.c,
            g.h,
            g.w,
            g.kh,
            g.kw,
            stride,
            pad,
            g.oh,
            g.ow,
            &mut col,
        );
        // dW += dY . col^T
        matmul_nt(dy_img, &col, g.f, spatial, g.ckk, &mut dw);
        // dcol = W^T . dY, scattered back to dx
        dcol.iter_mut().for_each(|v| *v = T::ZERO);
        matmul_tn(weight.data(), dy_img, g.ckk, g.f, spatial, &mut dcol);
        col2im_add(
            &dcol,
            g.c,
            g.h,
            g.w,
            g.kh,
            g.kw,
            stride,
            pad,
            g.oh,
            g.ow,
            &mut dx[img * image..(img + 1) * image],
        );
        for fi in 0..g.f {
            let mut acc = T::ZERO;
            for v in &dy_img[fi * spatial..(fi + 1) * spatial] {
                acc += *v;
            }
            db[fi] += acc;
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[g.f], db)?,
    ))
}

fn bn_check<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ChannelMismatch {
            layer: "batchnorm".into(),
            expected: gamma.shape().first().copied().unwrap_or(0),
            actual: c,
        });
    }
    Ok((n, c, h, w))
}

/// Batch statistics produced by a train-mode batchnorm pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub invstd: Tensor<T>,
}

/// Train-mode batchnorm: normalize by this batch's per-channel statistics.
pub fn batchnorm_train_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    let m = T::from_usize(n * h * w);
    let plane = h * w;
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut acc = T::ZERO;
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for v in &x.data()[base..base + plane] {
                acc += *v;
            }
        }
        let mu = acc / m;
        let mut acc2 = T::ZERO;
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for v in &x.data()[base..base + plane] {
                let d = *v - mu;
                acc2 += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = acc2 / m;
    }
    let invstd: Vec<T> = var.iter().map(|v| T::ONE / (*v + eps).sqrt()).collect();
    let mut out = vec![T::ZERO; x.elements()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mu, istd, g, b) = (mean[ch], invstd[ch], gamma.data()[ch], beta.data()[ch]);
            for i in 0..plane {
                out[base + i] = (x.data()[base + i] - mu) * istd * g + b;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), out)?,
        BatchStats {
            mean: Tensor::from_vec(&[c], mean)?,
            var: Tensor::from_vec(&[c], var)?,
            invstd: Tensor::from_vec(&[c], invstd)?,
        },
    ))
}

pub fn batchnorm_train_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("batchnorm_backward")?;
    let plane = h * w;
    let m = T::from_usize(n * plane);
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ch in 0..c {
        let (mu, istd) = (stats.mean.data()[ch], stats.invstd.data()[ch]);
        let mut dg = T::ZERO;
        let mut db = T::ZERO;
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in 0..plane {
                let xhat = (x.data()[base + i] - mu) * istd;
                dg += dy.data()[base + i] * xhat;
                db += dy.data()[base + i];
            }
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
    }
    let mut dx = vec![T::ZERO; x.elements()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mu, istd, g) = (
                stats.mean.data()[ch],
                stats.invstd.data()[ch],
                gamma.data()[ch],
            );
            let (dg, db) = (dgamma[ch], dbeta[ch]);
            for i in 0..plane {
                let xhat = (x.data()[base + i] - mu) * istd;
                dx[base + i] = g * istd * (dy.data()[base + i] - db / m - xhat * dg / m);
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Eval-mode batchnorm: normalize by running statistics.
pub fn batchnorm_eval_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    let plane = h * w;
    let mut out = vec![T::ZERO; x.elements()];
    for ch in 0..c {
        let istd = T::ONE / (running_var.data()[ch] + eps).sqrt();
        let (mu, g, b) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in 0..plane {
                out[base + i] = (x.data()[base + i] - mu) * istd * g + b;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn batchnorm_eval_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("batchnorm_backward")?;
    let plane = h * w;
    let mut dx = vec![T::ZERO; x.elements()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ch in 0..c {
        let istd = T::ONE / (running_var.data()[ch] + eps).sqrt();
        let (mu, g) = (running_mean.data()[ch], gamma.data()[ch]);
        let mut dg = T::ZERO;
        let mut db = T::ZERO;
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in 0..plane {
                let d = dy.data()[base + i];
                dx[base + i] = d * g * istd;
                dg += d * (x.data()[base + i] - mu) * istd;
                db += d;
            }
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

pub fn relu_forward<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    // NaN passes through rather than clamping to zero, so poisoned
    // activations surface at the loss check instead of vanishing
    let data = x
        .data()
        .iter()
        .map(|v| {
            if *v > T::ZERO || v.is_nan() {
                *v
            } else {
                T::ZERO
            }
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(xv, dv)| if *xv > T::ZERO { *dv } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Max pooling (no padding). Returns the output and flat argmax indices into
/// the input, one per output element; ties resolve to the first scanned
/// position (row-major within the window).
pub fn maxpool_forward<T: Float>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool")?;
    let oh = out_extent(h, kernel, stride, 0).ok_or_else(|| Error::ShapeMismatch {
        op: "maxpool",
        detail: format!(
            "kernel {} stride {} does not fit {}x{}",
            kernel, stride, h, w
        ),
    })?;
    let ow = out_extent(w, kernel, stride, 0).ok_or_else(|| Error::ShapeMismatch {
        op: "maxpool",
        detail: format!(
            "kernel {} stride {} does not fit {}x{}",
            kernel, stride, h, w
        ),
    })?;
    let mut out = vec![T::ZERO; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (oy * stride) * w + ox * stride;
                    let mut best = x.data()[best_idx];
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (oy * stride + ki) * w + (ox * stride + kj);
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((img * c + ch) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool_backward<T: Float>(
    x_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (o, src) in argmax.iter().enumerate() {
        dx.data_mut()[*src] += dy.data()[o];
    }
    dx
}

/// Channel concatenation of two NCHW tensors; `a`'s channels come first.
pub fn concat_channels_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if n != nb || h != hb || w != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            detail: format!(
                "operands {:?} and {:?} differ outside the channel axis",
                a.shape(),
                b.shape()
            ),
        });
    }
    let plane = h * w;
    let mut out = vec![T::ZERO; n * (ca + cb) * plane];
    for img in 0..n {
        let dst = img * (ca + cb) * plane;
        out[dst..dst + ca * plane]
            .copy_from_slice(&a.data()[img * ca * plane..(img + 1) * ca * plane]);
        out[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data()[img * cb * plane..(img + 1) * cb * plane]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out)
}

/// Split a concat gradient back into the two operands.
pub fn concat_channels_backward<T: Float>(
    dy: &Tensor<T>,
    ca: usize,
    cb: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dy.dims4("concat_channels_backward")?;
    debug_assert_eq!(c, ca + cb);
    let plane = h * w;
    let mut da = vec![T::ZERO; n * ca * plane];
    let mut db = vec![T::ZERO; n * cb * plane];
    for img in 0..n {
        let src = img * c * plane;
        da[img * ca * plane..(img + 1) * ca * plane]
            .copy_from_slice(&dy.data()[src..src + ca * plane]);
        db[img * cb * plane..(img + 1) * cb * plane]
            .copy_from_slice(&dy.data()[src + ca * plane..src + c * plane]);
    }
    Ok((
        Tensor::from_vec(&[n, ca, h, w], da)?,
        Tensor::from_vec(&[n, cb, h, w], db)?,
    ))
}

/// Spatial mean per channel: NCHW -> NC.
pub fn global_avg_pool_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let m = T::from_usize(plane);
    let mut out = vec![T::ZERO; n * c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let mut acc = T::ZERO;
            for v in &x.data()[base..base + plane] {
                acc += *v;
            }
            out[img * c + ch] = acc / m;
        }
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Float>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let plane = h * w;
    let m = T::from_usize(plane);
    let mut dx = Tensor::zeros(x_shape);
    for img in 0..n {
        for ch in 0..c {
            let g = dy.data()[img * c + ch] / m;
            let base = (img * c + ch) * plane;
            for v in &mut dx.data_mut()[base..base + plane] {
                *v = g;
            }
        }
    }
    dx
}

/// y[N, K] = x[N, C] . w[K, C]^T + b[K]
pub fn dense_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = x.dims2("dense")?;
    let (k, wc) = weight.dims2("dense")?;
    if wc != c {
        return Err(Error::ChannelMismatch {
            layer: "dense".into(),
            expected: wc,
            actual: c,
        });
    }
    if bias.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            detail: format!("bias must be [{}], got {:?}", k, bias.shape()),
        });
    }
    let mut out = vec![T::ZERO; n * k];
    matmul_nt(x.data(), weight.data(), n, c, k, &mut out);
    for row in 0..n {
        for j in 0..k {
            out[row * k + j] += bias.data()[j];
        }
    }
    Tensor::from_vec(&[n, k], out)
}

pub fn dense_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c) = x.dims2("dense_backward")?;
    let (k, _) = weight.dims2("dense_backward")?;
    let mut dx = vec![T::ZERO; n * c];
    matmul_nn(dy.data(), weight.data(), n, k, c, &mut dx);
    let mut dw = vec![T::ZERO; k * c];
    matmul_tn(dy.data(), x.data(), k, n, c, &mut dw);
    let mut db = vec![T::ZERO; k];
    for row in 0..n {
        for (j, slot) in db.iter_mut().enumerate() {
            *slot += dy.data()[row * k + j];
        }
    }
    Ok((
        Tensor::from_vec(&[n, c], dx)?,
        Tensor::from_vec(&[k, c], dw)?,
        Tensor::from_vec(&[k], db)?,
    ))
}

/// Mean cross-entropy over the batch; also returns the softmax probabilities
/// needed for the backward pass.
pub fn softmax_cross_entropy_forward<T: Float>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{} logit rows vs {} labels", n, labels.len()),
        });
    }
    let mut probs = vec![T::ZERO; n * k];
    let mut loss = T::ZERO;
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut max = r[0];
        for v in r.iter().skip(1) {
            max = max.maximum(*v);
        }
        let mut denom = T::ZERO;
        for (j, v) in r.iter().enumerate() {
            let e = (*v - max).exp();
            probs[row * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[row * k + j] /= denom;
        }
        loss += -(probs[row * k + label].ln());
    }
    Ok((loss / T::from_usize(n), Tensor::from_vec(&[n, k], probs)?))
}

pub fn softmax_cross_entropy_backward<T: Float>(
    probs: &Tensor<T>,
    labels: &[usize],
    dloss: T,
) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = dloss / T::from_usize(n);
    let mut dlogits = probs.clone();
    for (row, label) in labels.iter().enumerate() {
        dlogits.data_mut()[row * k + label] -= T::ONE;
    }
    for v in dlogits.data_mut() {
        *v *= scale;
    }
    dlogits
}

/// Scalar projection sum(weights .* x); the reduction used to drive arbitrary
/// op outputs to a scalar loss (gradient checking relies on it).
pub fn weighted_sum_forward<T: Float>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<T> {
    if x.shape() != weights.shape() {
        return Err(Error::ShapeMismatch {
            op: "weighted_sum",
            detail: format!("x {:?} vs weights {:?}", x.shape(), weights.shape()),
        });
    }
    let mut acc = T::ZERO;
    for (a, b) in x.data().iter().zip(weights.data()) {
        acc += *a * *b;
    }
    Ok(acc)
}

/// Fraction of rows whose argmax equals the label; ties take the lowest index.
pub fn accuracy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if r[j] > r[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
