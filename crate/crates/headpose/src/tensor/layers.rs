//! Forward and backward kernels for the layer set.
//!
//! Convolutions go through an im2col buffer per sample and run in parallel
//! over samples; every output element is reduced in a fixed order, so the
//! kernels stay bit-deterministic under any thread schedule.

use rayon::prelude::*;

use super::graph::BnCache;
use super::{axpy, dot, Tensor};

const BN_EPS: f64 = 1e-5;

/// Gather the im2col rows for one sample: row per output position, laid out
/// as (ky, kx, in_c) to match the NHWC input, so each (ky, kx) slot is one
/// contiguous copy.
fn im2col_sample(
    x: &Tensor,
    n: usize,
    in_c: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let row_len = ksize * ksize * in_c;
    let xdata = x.data();
    let sample = &xdata[n * h * w * in_c..(n + 1) * h * w * in_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..ksize {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..ksize {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    let dst = &mut row[(ky * ksize + kx) * in_c..(ky * ksize + kx + 1) * in_c];
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = (iy as usize * w + ix as usize) * in_c;
                        dst.copy_from_slice(&sample[src..src + in_c]);
                    } else {
                        dst.fill(0.0);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    in_c: usize,
    out_c: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(x.shape()[3], in_c);
    let oh = (h + 2 * pad - ksize) / stride + 1;
    let ow = (w + 2 * pad - ksize) / stride + 1;
    let row_len = ksize * ksize * in_c;
    let wdata = weight.data();
    let bdata = bias.data();

    let mut out = Tensor::zeros(&[n, oh, ow, out_c]);
    let sample_out = oh * ow * out_c;
    out.data_mut()
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(i, chunk)| {
            let mut col = vec![0.0; oh * ow * row_len];
            im2col_sample(x, i, in_c, ksize, stride, pad, oh, ow, &mut col);
            for pos in 0..oh * ow {
                let row = &col[pos * row_len..(pos + 1) * row_len];
                let dst = &mut chunk[pos * out_c..(pos + 1) * out_c];
                for oc in 0..out_c {
                    dst[oc] = dot(row, &wdata[oc * row_len..(oc + 1) * row_len]) + bdata[oc];
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    in_c: usize,
    out_c: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let row_len = ksize * ksize * in_c;
    let wdata = weight.data();
    let go = grad_out.data();

    struct SampleGrads {
        gx: Vec<f64>,
        gw: Vec<f64>,
        gb: Vec<f64>,
    }

    // Per-sample partials in parallel, then a fixed-order reduction over
    // samples keeps the result independent of the thread schedule.
    let partials: Vec<SampleGrads> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![0.0; oh * ow * row_len];
            im2col_sample(x, i, in_c, ksize, stride, pad, oh, ow, &mut col);
            let mut gw = vec![0.0; out_c * row_len];
            let mut gb = vec![0.0; out_c];
            let mut gcol = vec![0.0; oh * ow * row_len];
            let gsample = &go[i * oh * ow * out_c..(i + 1) * oh * ow * out_c];
            for pos in 0..oh * ow {
                let g = &gsample[pos * out_c..(pos + 1) * out_c];
                let row = &col[pos * row_len..(pos + 1) * row_len];
                let grow = &mut gcol[pos * row_len..(pos + 1) * row_len];
                for oc in 0..out_c {
                    let gv = g[oc];
                    if gv != 0.0 {
                        axpy(&mut gw[oc * row_len..(oc + 1) * row_len], gv, row);
                        axpy(grow, gv, &wdata[oc * row_len..(oc + 1) * row_len]);
                    }
                    gb[oc] += gv;
                }
            }
            // col2im: scatter the column gradient back onto the input grid.
            let mut gx = vec![0.0; h * w * in_c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let grow = &gcol[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
                    for ky in 0..ksize {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..ksize {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let src = &grow[(ky * ksize + kx) * in_c..(ky * ksize + kx + 1) * in_c];
                            let dst_base = (iy as usize * w + ix as usize) * in_c;
                            for c in 0..in_c {
                                gx[dst_base + c] += src[c];
                            }
                        }
                    }
                }
            }
            SampleGrads { gx, gw, gb }
        })
        .collect();

    let mut gx = Tensor::zeros(&[n, h, w, in_c]);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[out_c]);
    for (i, p) in partials.iter().enumerate() {
        gx.data_mut()[i * h * w * in_c..(i + 1) * h * w * in_c].copy_from_slice(&p.gx);
        for (o, v) in gw.data_mut().iter_mut().zip(&p.gw) {
            *o += v;
        }
        for (o, v) in gb.data_mut().iter_mut().zip(&p.gb) {
            *o += v;
        }
    }
    (gx, gw, gb)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut gx = grad_out.clone();
    for (g, v) in gx.data_mut().iter_mut().zip(x.data()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, channels: usize) -> (Tensor, BnCache) {
    let count = x.len() / channels;
    let m = count as f64;
    let mut mean = vec![0.0; channels];
    for (i, v) in x.data().iter().enumerate() {
        mean[i % channels] += v;
    }
    for mu in &mut mean {
        *mu /= m;
    }
    let mut var = vec![0.0; channels];
    for (i, v) in x.data().iter().enumerate() {
        let d = v - mean[i % channels];
        var[i % channels] += d * d;
    }
    for s in &mut var {
        *s /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut x_hat = x.clone();
    for (i, v) in x_hat.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        *v = (*v - mean[c]) * inv_std[c];
    }
    let mut y = x_hat.clone();
    let (g, b) = (gamma.data(), beta.data());
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        *v = *v * g[c] + b[c];
    }
    (y, BnCache { mean, var, x_hat })
}

pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    channels: usize,
) -> Tensor {
    let (g, b) = (gamma.data(), beta.data());
    let (rm, rv) = (running_mean.data(), running_var.data());
    let scale: Vec<f64> = (0..channels).map(|c| g[c] / (rv[c] + BN_EPS).sqrt()).collect();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        *v = (*v - rm[c]) * scale[c] + b[c];
    }
    y
}

pub fn batch_norm_backward_train(
    gamma: &Tensor,
    cache: &BnCache,
    grad_out: &Tensor,
    channels: usize,
) -> (Tensor, Tensor, Tensor) {
    let m = (grad_out.len() / channels) as f64;
    let inv_std: Vec<f64> = cache.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for (i, g) in grad_out.data().iter().enumerate() {
        let c = i % channels;
        sum_g[c] += g;
        sum_gx[c] += g * cache.x_hat.data()[i];
    }

    let gd = gamma.data();
    let mut gx = grad_out.clone();
    for (i, v) in gx.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        let xh = cache.x_hat.data()[i];
        *v = gd[c] * inv_std[c] * (*v - sum_g[c] / m - xh * sum_gx[c] / m);
    }
    let ggamma = Tensor::from_vec(&[channels], sum_gx).expect("shape");
    let gbeta = Tensor::from_vec(&[channels], sum_g).expect("shape");
    (gx, ggamma, gbeta)
}

pub fn batch_norm_backward_eval(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    grad_out: &Tensor,
    channels: usize,
) -> (Tensor, Tensor, Tensor) {
    let (rm, rv) = (running_mean.data(), running_var.data());
    let inv_std: Vec<f64> = (0..channels).map(|c| 1.0 / (rv[c] + BN_EPS).sqrt()).collect();
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for (i, g) in grad_out.data().iter().enumerate() {
        let c = i % channels;
        sum_g[c] += g;
        sum_gx[c] += g * (x.data()[i] - rm[c]) * inv_std[c];
    }
    let gd = gamma.data();
    let mut gx = grad_out.clone();
    for (i, v) in gx.data_mut().iter_mut().enumerate() {
        let c = i % channels;
        *v *= gd[c] * inv_std[c];
    }
    let ggamma = Tensor::from_vec(&[channels], sum_gx).expect("shape");
    let gbeta = Tensor::from_vec(&[channels], sum_g).expect("shape");
    (gx, ggamma, gbeta)
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Tensor::zeros(&[n, h * factor, w * factor, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n {
        for oy in 0..h * factor {
            let iy = oy / factor;
            for ox in 0..w * factor {
                let ix = ox / factor;
                let src = ((i * h + iy) * w + ix) * c;
                let dst = ((i * h * factor + oy) * w * factor + ox) * c;
                yd[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    y
}

/// Gradient of nearest upsampling: sum each factor x factor block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Tensor {
    let (n, oh, ow, c) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let (h, w) = (oh / factor, ow / factor);
    let mut gx = Tensor::zeros(&[n, h, w, c]);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for i in 0..n {
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                let ix = ox / factor;
                let src = ((i * oh + oy) * ow + ox) * c;
                let dst = ((i * h + iy) * w + ix) * c;
                for ch in 0..c {
                    gxd[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    gx
}

pub fn fc_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, in_f: usize, out_f: usize) -> Tensor {
    let n = x.shape()[0];
    debug_assert_eq!(x.len() / n, in_f);
    let wd = weight.data();
    let bd = bias.data();
    let mut y = Tensor::zeros(&[n, 1, 1, out_f]);
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n {
        let row = &xd[i * in_f..(i + 1) * in_f];
        for of in 0..out_f {
            yd[i * out_f + of] = dot(row, &wd[of * in_f..(of + 1) * in_f]) + bd[of];
        }
    }
    y
}

pub fn fc_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    in_f: usize,
    out_f: usize,
) -> (Tensor, Tensor, Tensor) {
    let n = x.shape()[0];
    let wd = weight.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[out_f]);
    for i in 0..n {
        let xrow = &xd[i * in_f..(i + 1) * in_f];
        let grow = &gd[i * out_f..(i + 1) * out_f];
        let gxrow = &mut gx.data_mut()[i * in_f..(i + 1) * in_f];
        for of in 0..out_f {
            let gv = grow[of];
            if gv != 0.0 {
                axpy(gxrow, gv, &wd[of * in_f..(of + 1) * in_f]);
            }
        }
        for of in 0..out_f {
            let gv = grow[of];
            if gv != 0.0 {
                axpy(&mut gw.data_mut()[of * in_f..(of + 1) * in_f], gv, xrow);
            }
            gb.data_mut()[of] += gv;
        }
    }
    (gx, gw, gb)
}

pub fn spatial_softmax_forward(x: &Tensor) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let pixels = h * w;
    let mut y = x.clone();
    let yd = y.data_mut();
    for i in 0..n {
        let base = i * pixels * c;
        for ch in 0..c {
            let mut maxv = f64::NEG_INFINITY;
            for p in 0..pixels {
                maxv = maxv.max(yd[base + p * c + ch]);
            }
            let mut sum = 0.0;
            for p in 0..pixels {
                let e = (yd[base + p * c + ch] - maxv).exp();
                yd[base + p * c + ch] = e;
                sum += e;
            }
            for p in 0..pixels {
                yd[base + p * c + ch] /= sum;
            }
        }
    }
    y
}

pub fn spatial_softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let (n, h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let pixels = h * w;
    let yd = y.data();
    let gd = grad_out.data();
    let mut gx = Tensor::zeros(y.shape());
    let gxd = gx.data_mut();
    for i in 0..n {
        let base = i * pixels * c;
        for ch in 0..c {
            let mut dotgy = 0.0;
            for p in 0..pixels {
                dotgy += gd[base + p * c + ch] * yd[base + p * c + ch];
            }
            for p in 0..pixels {
                let idx = base + p * c + ch;
                gxd[idx] = yd[idx] * (gd[idx] - dotgy);
            }
        }
    }
    gx
}

pub fn pair_softmax_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let yd = y.data_mut();
    debug_assert_eq!(yd.len() % 2, 0);
    for pair in yd.chunks_mut(2) {
        let m = pair[0].max(pair[1]);
        let e0 = (pair[0] - m).exp();
        let e1 = (pair[1] - m).exp();
        let s = e0 + e1;
        pair[0] = e0 / s;
        pair[1] = e1 / s;
    }
    y
}

pub fn pair_softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(y.shape());
    let yd = y.data();
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for i in (0..yd.len()).step_by(2) {
        let dotgy = gd[i] * yd[i] + gd[i + 1] * yd[i + 1];
        gxd[i] = yd[i] * (gd[i] - dotgy);
        gxd[i + 1] = yd[i + 1] * (gd[i + 1] - dotgy);
    }
    gx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let pixels = (h * w) as f64;
    let mut y = Tensor::zeros(&[n, 1, 1, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n {
        for p in 0..h * w {
            let base = (i * h * w + p) * c;
            for ch in 0..c {
                yd[i * c + ch] += xd[base + ch];
            }
        }
        for ch in 0..c {
            yd[i * c + ch] /= pixels;
        }
    }
    y
}

pub fn global_avg_pool_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let scale = 1.0 / (h * w) as f64;
    let mut gx = Tensor::zeros(in_shape);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for i in 0..n {
        for p in 0..h * w {
            let base = (i * h * w + p) * c;
            for ch in 0..c {
                gxd[base + ch] = gd[i * c + ch] * scale;
            }
        }
    }
    gx
}

pub fn concat_forward(parts: &[&Tensor]) -> Tensor {
    let (n, h, w) = (parts[0].shape()[0], parts[0].shape()[1], parts[0].shape()[2]);
    let cs: Vec<usize> = parts.iter().map(|p| p.shape()[3]).collect();
    let c_total: usize = cs.iter().sum();
    let mut y = Tensor::zeros(&[n, h, w, c_total]);
    let yd = y.data_mut();
    for pos in 0..n * h * w {
        let mut offset = 0;
        for (part, c) in parts.iter().zip(&cs) {
            let src = &part.data()[pos * c..(pos + 1) * c];
            yd[pos * c_total + offset..pos * c_total + offset + c].copy_from_slice(src);
            offset += c;
        }
    }
    y
}

/// Extract the channel band `[offset, offset+c)` of a concat gradient.
pub fn concat_slice_backward(grad_out: &Tensor, offset: usize, c: usize) -> Tensor {
    let (n, h, w, c_total) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let mut gx = Tensor::zeros(&[n, h, w, c]);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for pos in 0..n * h * w {
        gxd[pos * c..(pos + 1) * c].copy_from_slice(&gd[pos * c_total + offset..pos * c_total + offset + c]);
    }
    gx
}
