//! Forward/backward pairs for the layer set the models need.
//!
//! Every operation works on row-major [`Tensor`]s in `[N, C, H, W]` (conv
//! stack) or `[N, D]` (dense stack) layout. Backward functions return the
//! input gradient and, where applicable, parameter gradients; accumulation
//! into parameter slots is the caller's job (see `layers`).
//!
//! Convolutions are lowered to one GEMM per sample over an im2col buffer;
//! batches are processed in parallel with per-worker scratch, and gradient
//! reductions use fixed-size sample chunks folded in order, so results do
//! not depend on scheduling.

use rayon::prelude::*;

use super::gemm::{dgemm, dgemm_rowmajor};
use super::tensor::Tensor;
use crate::error::{arg_err, dim_err};
use crate::rng::Rng;
use crate::{Error, Result};
use rand::Rng as _;

/// Padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Elementwise non-linearity kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Elu,
    Linear,
}

/// Work is split into fixed-size sample chunks for parallel gradient
/// reductions; partials are folded in chunk order for determinism.
const GRAD_CHUNK: usize = 8;

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 4 {
        return Err(dim_err("conv2d", "input [N,C,H,W]", format!("{ishape:?}")));
    }
    if kshape.len() != 4 {
        return Err(dim_err("conv2d", "kernel [F,C,kh,kw]", format!("{kshape:?}")));
    }
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc != c {
        return Err(dim_err(
            "conv2d",
            format!("kernel channels {c} for input {ishape:?}"),
            format!("kernel {kshape:?}"),
        ));
    }
    if bias.shape() != [f] {
        return Err(dim_err("conv2d", format!("bias [{f}]"), format!("{:?}", bias.shape())));
    }
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(dim_err(
                    "conv2d",
                    format!("kernel no larger than input {h}x{w}"),
                    format!("kernel {kh}x{kw}"),
                ));
            }
            (h - kh + 1, w - kw + 1, 0usize, 0usize)
        }
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(arg_err(
                    "conv2d",
                    format!("same padding requires odd kernel dims, got {kh}x{kw}"),
                ));
            }
            (h, w, (kh - 1) / 2, (kw - 1) / 2)
        }
    };
    Ok((n, c, h, w, f, kh, kw, oh, ow, pt * 1000 + pl))
}

/// Fill the im2col buffer for one sample: rows index `(c, kh, kw)`, columns
/// index `(oh, ow)`. Out-of-image taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64], // one sample, length C*H*W
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
    buf: &mut [f64], // length (C*kh*kw) * (oh*ow)
) {
    let ohow = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                let brow = &mut buf[row * ohow..(row + 1) * ohow];
                for ohi in 0..oh {
                    let ih = ohi as isize + khi as isize - pt as isize;
                    let dst = &mut brow[ohi * ow..(ohi + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let ih = ih as usize;
                    // iw = owi + kwi - pl must lie in [0, w)
                    let start = pl.saturating_sub(kwi).min(ow);
                    let end = (w + pl - kwi).min(ow);
                    dst[..start].iter_mut().for_each(|v| *v = 0.0);
                    if end > start {
                        let src = &xc[ih * w + start + kwi - pl..ih * w + end + kwi - pl];
                        dst[start..end].copy_from_slice(src);
                    }
                    dst[end.max(start)..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}

/// Scatter-add the column gradient of one sample back into image layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64], // (C*kh*kw) x (oh*ow)
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
    dx: &mut [f64], // one sample, length C*H*W
) {
    let ohow = oh * ow;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                let brow = &cols[row * ohow..(row + 1) * ohow];
                for ohi in 0..oh {
                    let ih = ohi as isize + khi as isize - pt as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    let start = pl.saturating_sub(kwi).min(ow);
                    let end = (w + pl - kwi).min(ow);
                    if end > start {
                        let src = &brow[ohi * ow + start..ohi * ow + end];
                        let dst = &mut dxc[ih * w + start + kwi - pl..ih * w + end + kwi - pl];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) of a `[N,C,H,W]` batch with a
/// `[F,C,kh,kw]` kernel and `[F]` bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let (n, c, h, w, f, kh, kw, oh, ow, packed) = conv_dims(input, kernel, bias, padding)?;
    let (pt, pl) = (packed / 1000, packed % 1000);
    let ckk = c * kh * kw;
    let ohow = oh * ow;
    let mut out = vec![0.0; n * f * ohow];
    let xs = input.data();
    let krn = kernel.data();
    let b = bias.data();
    out.par_chunks_mut(f * ohow)
        .enumerate()
        .for_each_init(
            || vec![0.0; ckk * ohow],
            |buf, (ni, out_n)| {
                let x = &xs[ni * c * h * w..(ni + 1) * c * h * w];
                im2col(x, c, h, w, kh, kw, oh, ow, pt, pl, buf);
                // out_n[F, OHOW] = kernel[F, CKK] * buf[CKK, OHOW]
                dgemm_rowmajor(f, ckk, ohow, 1.0, krn, buf, 0.0, out_n);
                for fi in 0..f {
                    let row = &mut out_n[fi * ohow..(fi + 1) * ohow];
                    let bf = b[fi];
                    row.iter_mut().for_each(|v| *v += bf);
                }
            },
        );
    Tensor::new(&[n, f, oh, ow], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias given the upstream
/// gradient `dy` of shape `[N,F,oh,ow]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w, f, kh, kw, oh, ow, packed) = conv_dims(input, kernel, bias, padding)?;
    let (pt, pl) = (packed / 1000, packed % 1000);
    if dy.shape() != [n, f, oh, ow] {
        return Err(dim_err(
            "conv2d_backward",
            format!("[{n},{f},{oh},{ow}]"),
            format!("{:?}", dy.shape()),
        ));
    }
    let ckk = c * kh * kw;
    let ohow = oh * ow;
    let xs = input.data();
    let krn = kernel.data();
    let dys = dy.data();

    // dbias[f] = sum over samples and positions.
    let mut dbias = vec![0.0; f];
    for ni in 0..n {
        for fi in 0..f {
            let row = &dys[(ni * f + fi) * ohow..(ni * f + fi + 1) * ohow];
            dbias[fi] += row.iter().sum::<f64>();
        }
    }

    // dW = sum_n dy_n [F, OHOW] x im2col_n^T [OHOW, CKK]; chunked partials
    // folded in order.
    let sample_idx: Vec<usize> = (0..n).collect();
    let partials: Vec<Vec<f64>> = sample_idx
        .par_chunks(GRAD_CHUNK)
        .map_init(
            || vec![0.0; ckk * ohow],
            |buf, chunk| {
                let mut dw = vec![0.0; f * ckk];
                for &ni in chunk {
                    let x = &xs[ni * c * h * w..(ni + 1) * c * h * w];
                    im2col(x, c, h, w, kh, kw, oh, ow, pt, pl, buf);
                    let dyn_ = &dys[ni * f * ohow..(ni + 1) * f * ohow];
                    // dw[F,CKK] += dy_n[F,OHOW] * buf^T (view via strides)
                    dgemm(f, ohow, ckk, 1.0, dyn_, ohow, 1, buf, 1, ohow, 1.0, &mut dw, ckk, 1);
                }
                dw
            },
        )
        .collect();
    let mut dkernel = vec![0.0; f * ckk];
    for part in &partials {
        for (d, p) in dkernel.iter_mut().zip(part) {
            *d += p;
        }
    }

    // dX per sample: cols = kernel^T [CKK,F] x dy_n [F,OHOW], then col2im.
    let mut dx = vec![0.0; n * c * h * w];
    dx.par_chunks_mut(c * h * w)
        .enumerate()
        .for_each_init(
            || vec![0.0; ckk * ohow],
            |cols, (ni, dx_n)| {
                let dyn_ = &dys[ni * f * ohow..(ni + 1) * f * ohow];
                dgemm(ckk, f, ohow, 1.0, krn, 1, ckk, dyn_, ohow, 1, 0.0, cols, ohow, 1);
                col2im_add(cols, c, h, w, kh, kw, oh, ow, pt, pl, dx_n);
            },
        );

    Ok((
        Tensor::new(&[n, c, h, w], dx)?,
        Tensor::new(kernel.shape(), dkernel)?,
        Tensor::new(&[f], dbias)?,
    ))
}

/// Max pooling over non-overlapping `ph x pw` windows; a trailing remainder
/// that does not fill a window is dropped. Returns the output and the
/// argmax index of every output element within its sample (`c*H*W + h*W + w`),
/// with exact ties broken to the lowest linear index.
pub fn maxpool2d(input: &Tensor, size: (usize, usize)) -> Result<(Tensor, Vec<u32>)> {
    let (ph, pw) = size;
    if ph == 0 || pw == 0 {
        return Err(arg_err("maxpool2d", format!("pool size {ph}x{pw}")));
    }
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(dim_err("maxpool2d", "input [N,C,H,W]", format!("{shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / ph, w / pw);
    if oh == 0 || ow == 0 {
        return Err(arg_err(
            "maxpool2d",
            format!("pool {ph}x{pw} larger than input {h}x{w}"),
        ));
    }
    let xs = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    let chw = c * h * w;
    out.par_chunks_mut(c * oh * ow)
        .zip(arg.par_chunks_mut(c * oh * ow))
        .enumerate()
        .for_each(|(ni, (out_n, arg_n))| {
            let x = &xs[ni * chw..(ni + 1) * chw];
            for ci in 0..c {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dh in 0..ph {
                            let hh = ohi * ph + dh;
                            for dw in 0..pw {
                                let ww = owi * pw + dw;
                                let idx = ci * h * w + hh * w + ww;
                                let v = x[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        let o = ci * oh * ow + ohi * ow + owi;
                        out_n[o] = best;
                        arg_n[o] = best_idx;
                    }
                }
            }
        });
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

/// Route the upstream gradient to the argmax positions recorded by
/// [`maxpool2d`].
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let per_out = dy.numel() / n;
    let dys = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    dx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, dx_n)| {
        let dyn_ = &dys[ni * per_out..(ni + 1) * per_out];
        let arg_n = &argmax[ni * per_out..(ni + 1) * per_out];
        for (g, &idx) in dyn_.iter().zip(arg_n) {
            dx_n[idx as usize] += g;
        }
    });
    Tensor::new(input_shape, dx)
}

/// Affine map `[N, D_in] x [D_in, D_out] + [D_out]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[0] {
        return Err(dim_err(
            "dense",
            format!("input [N,{}] for weight {:?}", wshape.first().copied().unwrap_or(0), wshape),
            format!("input {ishape:?}"),
        ));
    }
    let (n, din, dout) = (ishape[0], ishape[1], wshape[1]);
    if bias.shape() != [dout] {
        return Err(dim_err("dense", format!("bias [{dout}]"), format!("{:?}", bias.shape())));
    }
    let mut out = vec![0.0; n * dout];
    par_dense_gemm(n, din, dout, input.data(), weight.data(), &mut out);
    let b = bias.data();
    for row in out.chunks_mut(dout) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Tensor::new(&[n, dout], out)
}

/// `c[m,n] = a[m,k] * b[k,n]`, splitting output columns across workers for
/// large problems. Column blocks are disjoint, so the result is identical
/// to a single call.
fn par_dense_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const PAR_MACS: usize = 1 << 23;
    if m * k * n < PAR_MACS || n < 128 {
        dgemm_rowmajor(m, k, n, 1.0, a, b, 0.0, c);
        return;
    }
    let blocks = (rayon::current_num_threads() * 2).max(2);
    let bw = n.div_ceil(blocks);
    let col_blocks: Vec<(usize, usize)> = (0..blocks)
        .map(|i| (i * bw, ((i + 1) * bw).min(n)))
        .filter(|(s, e)| e > s)
        .collect();
    // Safety of parallel writes: blocks address disjoint column ranges.
    let c_ptr = SendPtr(c.as_mut_ptr());
    col_blocks.par_iter().for_each(|&(s, e)| {
        let cols = e - s;
        let c_block = unsafe { std::slice::from_raw_parts_mut(c_ptr.0.add(s), (m - 1) * n + cols) };
        dgemm(m, k, cols, 1.0, a, k, 1, &b[s..], n, 1, 0.0, c_block, n, 1);
    });
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// Gradients of [`dense`] w.r.t. input, weight and bias.
pub fn dense_backward(input: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[1];
    if dy.shape() != [n, dout] {
        return Err(dim_err(
            "dense_backward",
            format!("[{n},{dout}]"),
            format!("{:?}", dy.shape()),
        ));
    }
    // dX = dY * W^T
    let mut dx = vec![0.0; n * din];
    dgemm(n, dout, din, 1.0, dy.data(), dout, 1, weight.data(), 1, dout, 0.0, &mut dx, din, 1);
    // dW = X^T * dY
    let mut dw = vec![0.0; din * dout];
    dgemm(din, n, dout, 1.0, input.data(), 1, din, dy.data(), dout, 1, 0.0, &mut dw, dout, 1);
    // db = column sums of dY
    let mut db = vec![0.0; dout];
    for row in dy.data().chunks(dout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok((
        Tensor::new(&[n, din], dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[dout], db)?,
    ))
}

/// Elementwise non-linearity. ELU uses alpha = 1.
pub fn activation(input: &Tensor, kind: Act) -> Tensor {
    let mut out = input.clone();
    activation_inplace(&mut out, kind);
    out
}

pub(crate) fn activation_inplace(t: &mut Tensor, kind: Act) {
    match kind {
        Act::Linear => {}
        Act::Relu => t.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        }),
        Act::Elu => t.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = v.exp_m1();
            }
        }),
    }
}

/// Gradient of [`activation`] computed from its *output* values. The ReLU
/// subgradient at exactly 0 is taken as 0.
pub fn activation_backward(output: &Tensor, kind: Act, dy: &Tensor) -> Result<Tensor> {
    if output.shape() != dy.shape() {
        return Err(dim_err(
            "activation_backward",
            format!("{:?}", output.shape()),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut dx = dy.clone();
    match kind {
        Act::Linear => {}
        Act::Relu => {
            for (d, &o) in dx.data_mut().iter_mut().zip(output.data()) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        Act::Elu => {
            for (d, &o) in dx.data_mut().iter_mut().zip(output.data()) {
                if o < 0.0 {
                    *d *= o + 1.0;
                }
            }
        }
    }
    Ok(dx)
}

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Cache produced by the train-mode forward pass of batch norm.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(dim_err("batchnorm", "input [N,C,H,W]", format!("{shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err(
            "batchnorm",
            format!("gamma/beta [{c}]"),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    Ok((n, c, h, w))
}

/// Train-mode batch norm: normalize per channel over `(N, H, W)`, scale and
/// shift, and update running stats with the given momentum.
pub fn batchnorm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = bn_check(input, gamma, beta)?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let xs = input.data();
    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; c];
    let g = gamma.data();
    let b = beta.data();
    for ci in 0..c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &v in &xs[base..base + hw] {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sumsq / m - mean * mean).max(0.0);
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ci] = is;
        stats.mean[ci] = momentum * stats.mean[ci] + (1.0 - momentum) * mean;
        stats.var[ci] = momentum * stats.var[ci] + (1.0 - momentum) * var;
        let (gc, bc) = (g[ci], b[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let xh = (xs[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gc * xh + bc;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BnCache {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Eval-mode batch norm using running statistics; a pure function of its
/// inputs.
pub fn batchnorm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = bn_check(input, gamma, beta)?;
    let hw = h * w;
    let xs = input.data();
    let mut out = vec![0.0; xs.len()];
    let g = gamma.data();
    let b = beta.data();
    for ci in 0..c {
        let is = 1.0 / (stats.var[ci] + eps).sqrt();
        let mean = stats.mean[ci];
        let (gc, bc) = (g[ci], b[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                out[i] = gc * (xs[i] - mean) * is + bc;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Gradients of train-mode batch norm w.r.t. input, gamma and beta.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let shape = cache.xhat.shape().to_vec();
    if dy.shape() != shape.as_slice() {
        return Err(dim_err("batchnorm_backward", format!("{shape:?}"), format!("{:?}", dy.shape())));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let m = (n * hw) as f64;
    let xh = cache.xhat.data();
    let dys = dy.data();
    let g = gamma.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; dys.len()];
    for ci in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                sum_dy += dys[i];
                sum_dy_xh += dys[i] * xh[i];
            }
        }
        dgamma[ci] = sum_dy_xh;
        dbeta[ci] = sum_dy;
        let scale = g[ci] * cache.inv_std[ci] / m;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                dx[i] = scale * (m * dys[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    Ok((
        Tensor::new(&shape, dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// Inverted dropout: each element is zeroed with probability `rate` and
/// survivors are scaled by `1/(1-rate)`, so eval mode is the identity.
/// Returns the output and the survivor mask.
pub fn dropout_train(input: &Tensor, rate: f64, rng: &mut Rng) -> Result<(Tensor, Vec<u8>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(arg_err("dropout", format!("rate {rate} not in [0, 1)")));
    }
    let mut out = input.clone();
    if rate == 0.0 {
        return Ok((out, vec![1; input.numel()]));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut mask = vec![0u8; input.numel()];
    for (v, mk) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
        if rng.gen::<f64>() < rate {
            *v = 0.0;
        } else {
            *v *= scale;
            *mk = 1;
        }
    }
    Ok((out, mask))
}

/// Gradient of [`dropout_train`] given the survivor mask.
pub fn dropout_backward(mask: &[u8], rate: f64, dy: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (1.0 - rate);
    let mut dx = dy.clone();
    for (d, &mk) in dx.data_mut().iter_mut().zip(mask) {
        *d = if mk == 1 { *d * scale } else { 0.0 };
    }
    Ok(dx)
}

/// Row-wise softmax with max-subtraction; the single source of probability
/// normalization in the crate.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(dim_err("softmax_rows", "[N,K]", format!("{shape:?}")));
    }
    let k = shape[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over a batch of logits, with the stabilized
/// probabilities as a by-product.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(dim_err("softmax_xent", "[N,K]", format!("{shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(dim_err("softmax_xent", format!("{n} labels"), format!("{}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(arg_err("softmax_xent", format!("label {bad} out of range [0, {k})")));
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    for (ni, &y) in labels.iter().enumerate() {
        loss -= probs.data()[ni * k + y].max(f64::MIN_POSITIVE).ln();
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_xent" });
    }
    Ok((loss, probs))
}

/// Gradient of the mean cross-entropy w.r.t. the logits.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut dl = probs.clone();
    let inv_n = 1.0 / n as f64;
    for (ni, &y) in labels.iter().enumerate() {
        let row = &mut dl.data_mut()[ni * k..(ni + 1) * k];
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(dl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let k = t(&[1, 1, 1, 1], vec![1.0]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&x, &k, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_sums_windows() {
        // 4x4 ones, 2x2 ones kernel, valid -> 3x3 of 4.0 (hand summation).
        let x = Tensor::full(&[1, 1, 4, 4], 1.0).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0).unwrap();
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&x, &k, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_same_padding_keeps_dims() {
        let x = Tensor::full(&[2, 3, 8, 10], 0.5).unwrap();
        let k = Tensor::full(&[4, 3, 3, 3], 0.1).unwrap();
        let b = Tensor::zeros(&[4]);
        let y = conv2d(&x, &k, &b, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 4, 8, 10]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let k = Tensor::zeros(&[3, 1, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let err = conv2d(&x, &k, &b, Padding::Valid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[3, 1, 3, 3]"), "{msg}");
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x, (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        // ties go to the lowest linear index
        let x = Tensor::full(&[1, 1, 2, 2], 7.0).unwrap();
        let (_, arg) = maxpool2d(&x, (2, 2)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_constant_input_gives_constant_output() {
        let x = Tensor::full(&[2, 3, 6, 6], 1.25).unwrap();
        let (y, _) = maxpool2d(&x, (2, 2)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn maxpool_truncates_remainder() {
        let x = Tensor::zeros(&[1, 1, 5, 7]);
        let (y, _) = maxpool2d(&x, (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert!(maxpool2d(&x, (0, 2)).is_err());
    }

    #[test]
    fn dense_identity_and_affine_example() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w_id = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b0 = Tensor::zeros(&[2]);
        let y = dense(&x, &w_id, &b0).unwrap();
        assert_eq!(y.data(), x.data());
        let b = t(&[2], vec![3.0, 3.0]);
        let y = dense(&x, &w_id, &b).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
        let w_bad = Tensor::zeros(&[3, 2]);
        assert!(dense(&x, &w_bad, &b0).is_err());
    }

    #[test]
    fn activation_values() {
        let x = t(&[1, 4], vec![-1.0, 0.0, 2.0, -3.0]);
        let r = activation(&x, Act::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0, 0.0]);
        let e = activation(&x, Act::Elu);
        assert!((e.data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((e.data()[0] + 0.632120558828557).abs() < 1e-12);
        assert_eq!(e.data()[1], 0.0);
        assert_eq!(e.data()[2], 2.0);
        let l = activation(&x, Act::Linear);
        assert_eq!(l.data(), x.data());
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut rng = rng_from_seed(3);
        let x = Tensor::from_fn(&[4, 2, 3, 3], |_| rng.gen::<f64>() * 5.0 + 1.0).unwrap();
        let gamma = Tensor::full(&[2], 1.0).unwrap();
        let beta = Tensor::zeros(&[2]);
        let mut stats = RunningStats::new(2);
        let (y, _) = batchnorm_train(&x, &gamma, &beta, &mut stats, 0.9, 1e-5).unwrap();
        // each channel of the output has mean ~0 and std ~1
        for ci in 0..2 {
            let mut vals = vec![];
            for ni in 0..4 {
                let base = (ni * 2 + ci) * 9;
                vals.extend_from_slice(&y.data()[base..base + 9]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v.sqrt() - 1.0).abs() < 1e-3, "std {}", v.sqrt());
        }
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let x = t(&[1, 1, 2, 2], vec![0.5, -0.5, 1.5, 2.0]);
        let gamma = Tensor::full(&[1], 1.0).unwrap();
        let beta = Tensor::zeros(&[1]);
        let stats = RunningStats {
            mean: vec![0.0],
            var: vec![1.0],
        };
        let y = batchnorm_eval(&x, &gamma, &beta, &stats, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_examples() {
        let mut rng = rng_from_seed(9);
        let x = Tensor::full(&[100], 2.0).unwrap();
        let (y, _) = dropout_train(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(dropout_train(&x, 1.0, &mut rng).is_err());

        // law of large numbers at rate 0.5
        let x = Tensor::full(&[100_000], 1.0).unwrap();
        let (y, mask) = dropout_train(&x, 0.5, &mut rng).unwrap();
        let surviving = mask.iter().filter(|&&m| m == 1).count() as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&surviving), "surviving {surviving}");
        let mean_out: f64 = y.data().iter().sum::<f64>() / 100_000.0;
        assert!((mean_out - 1.0).abs() < 0.02, "mean {mean_out}");
    }

    #[test]
    fn softmax_xent_uniform_and_overflow() {
        let logits = Tensor::full(&[1, 10], 3.0).unwrap();
        let (loss, probs) = softmax_xent(&logits, &[4]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585092994046).abs() < 1e-12);
        for &p in probs.data() {
            assert!((p - 0.1).abs() < 1e-12);
        }
        let logits = t(&[1, 2], vec![1000.0, 0.0]);
        let (_, probs) = softmax_xent(&logits, &[0]).unwrap();
        assert!((probs.data()[0] - 1.0).abs() < 1e-12);
        assert!(probs.data()[1].abs() < 1e-12);
        assert!(probs.all_finite());
        assert!(softmax_xent(&logits, &[2]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rng_from_seed(11);
        for _ in 0..50 {
            let logits = Tensor::from_fn(&[3, 7], |_| (rng.gen::<f64>() - 0.5) * 200.0).unwrap();
            let p = softmax_rows(&logits).unwrap();
            for row in p.data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
