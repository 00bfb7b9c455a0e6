//! Slice-level numeric kernels used by the tape.
//!
//! Grouped convolutions go through im2col + GEMM; depthwise convolutions
//! (one input channel per group, one output per group) use direct loops,
//! which are both faster at small channel counts and sum in the same order
//! as a naive reference loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom { stride, padding, dilation, groups }
    }

    pub const fn unit() -> Self {
        ConvGeom::new(1, 0, 1, 1)
    }
}

/// Output extent of a convolution / pooling window along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Result<usize> {
    if stride == 0 || dilation == 0 || kernel == 0 {
        return Err(Error::invalid("stride, dilation and kernel must be positive"));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return Err(Error::shape(format!(
            "non-positive output extent: input {input} padding {padding} kernel span {span}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// Validated convolution problem dimensions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn new(x_shape: &[usize], w_shape: &[usize], geom: ConvGeom) -> Result<Self> {
        let (n, c, h, w) = match x_shape {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input must be NCHW, got {x_shape:?}"))),
        };
        let (o, cg, kh, kw) = match w_shape {
            &[o, cg, kh, kw] => (o, cg, kh, kw),
            _ => return Err(Error::shape(format!("conv2d kernel must be OIHW, got {w_shape:?}"))),
        };
        if geom.groups == 0 || c % geom.groups != 0 || o % geom.groups != 0 {
            return Err(Error::shape(format!(
                "channels {c} / outputs {o} not divisible by groups {}",
                geom.groups
            )));
        }
        if cg != c / geom.groups {
            return Err(Error::shape(format!(
                "kernel expects {cg} input channels per group, input has {}",
                c / geom.groups
            )));
        }
        let oh = conv_output_extent(h, kh, geom.stride, geom.padding, geom.dilation)?;
        let ow = conv_output_extent(w, kw, geom.stride, geom.padding, geom.dilation)?;
        Ok(ConvDims { n, c, h, w, o, kh, kw, oh, ow, geom })
    }

    fn is_depthwise(&self) -> bool {
        self.geom.groups == self.c && self.o == self.c
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0 && self.geom.groups == 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }
}

/// Pointwise convolutions with at most this many weights skip the GEMM
/// packing overhead and run as plain multiply-adds.
const SMALL_POINTWISE: usize = 1024;

/// `c = a * b + beta * c` for row/column-strided operands; `c` is row-major m x n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller guarantees that the strided views stay inside `a`, `b`
    // and `c`; every call site below derives the strides from the slice shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(d: &ConvDims, x: &[f64], sample: usize, group: usize, col: &mut [f64]) {
    let cg = d.c / d.geom.groups;
    let p = d.oh * d.ow;
    let ConvGeom { stride, padding, dilation, .. } = d.geom;
    for ci in 0..cg {
        let chan = group * cg + ci;
        let plane = &x[(sample * d.c + chan) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    let line = &mut dst[oy * d.ow..][..d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..][..d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, col: &[f64], sample: usize, group: usize, dx: &mut [f64]) {
    let cg = d.c / d.geom.groups;
    let p = d.oh * d.ow;
    let ConvGeom { stride, padding, dilation, .. } = d.geom;
    for ci in 0..cg {
        let chan = group * cg + ci;
        let plane = &mut dx[(sample * d.c + chan) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &col[row * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..][..d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.o * d.oh * d.ow];
    if d.is_depthwise() {
        depthwise_forward(d, x, w, &mut out);
        return out;
    }
    let p = d.oh * d.ow;
    if d.is_pointwise() {
        for s in 0..d.n {
            let xs = &x[s * d.c * p..][..d.c * p];
            let dst = &mut out[s * d.o * p..][..d.o * p];
            if d.c * d.o <= SMALL_POINTWISE {
                for (o, line) in dst.chunks_exact_mut(p).enumerate() {
                    for (c, src) in xs.chunks_exact(p).enumerate() {
                        let wv = w[o * d.c + c];
                        line.iter_mut().zip(src).for_each(|(v, &xv)| *v += wv * xv);
                    }
                }
            } else {
                gemm(d.o, d.c, p, w, d.c, 1, xs, p, 1, 0.0, dst);
            }
        }
        return out;
    }
    let groups = d.geom.groups;
    let cg = d.c / groups;
    let og = d.o / groups;
    let k = cg * d.kh * d.kw;
    let mut col = vec![0.0; k * p];
    for s in 0..d.n {
        for g in 0..groups {
            im2col(d, x, s, g, &mut col);
            let wg = &w[g * og * k..][..og * k];
            let dst = &mut out[(s * d.o + g * og) * p..][..og * p];
            gemm(og, k, p, wg, k, 1, &col, p, 1, 0.0, dst);
        }
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    if d.is_depthwise() {
        depthwise_backward(d, x, w, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw);
    }
    let p = d.oh * d.ow;
    if d.is_pointwise() {
        for s in 0..d.n {
            let xs = &x[s * d.c * p..][..d.c * p];
            let dys = &dy[s * d.o * p..][..d.o * p];
            let small = d.c * d.o <= SMALL_POINTWISE;
            if let Some(dw) = dw.as_deref_mut() {
                // dW[o, c] += dY[o, :] . X[c, :]
                if small {
                    for (o, gl) in dys.chunks_exact(p).enumerate() {
                        for (c, src) in xs.chunks_exact(p).enumerate() {
                            dw[o * d.c + c] += gl.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                } else {
                    gemm(d.o, p, d.c, dys, p, 1, xs, 1, p, 1.0, dw);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dX = W^T dY
                let dxs = &mut dx[s * d.c * p..][..d.c * p];
                if small {
                    for (c, line) in dxs.chunks_exact_mut(p).enumerate() {
                        for (o, gl) in dys.chunks_exact(p).enumerate() {
                            let wv = w[o * d.c + c];
                            line.iter_mut().zip(gl).for_each(|(v, &g)| *v += wv * g);
                        }
                    }
                } else {
                    gemm(d.c, d.o, p, w, 1, d.c, dys, p, 1, 0.0, dxs);
                }
            }
        }
        return (dx, dw);
    }
    let groups = d.geom.groups;
    let cg = d.c / groups;
    let og = d.o / groups;
    let k = cg * d.kh * d.kw;
    let mut col = vec![0.0; k * p];
    let mut dcol = vec![0.0; k * p];
    for s in 0..d.n {
        for g in 0..groups {
            let dyg = &dy[(s * d.o + g * og) * p..][..og * p];
            if let Some(dw) = dw.as_deref_mut() {
                im2col(d, x, s, g, &mut col);
                gemm(og, p, k, dyg, p, 1, &col, 1, p, 1.0, &mut dw[g * og * k..][..og * k]);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &w[g * og * k..][..og * k];
                gemm(k, og, p, wg, 1, k, dyg, p, 1, 0.0, &mut dcol);
                col2im(d, &dcol, s, g, dx);
            }
        }
    }
    (dx, dw)
}

/// Output positions `o` in `[lo, hi)` whose input `o * stride + offset - padding`
/// lies inside `[0, extent)`.
fn valid_range(out: usize, stride: usize, offset: usize, padding: usize, extent: usize) -> (usize, usize) {
    let lo = if padding > offset { (padding - offset).div_ceil(stride) } else { 0 };
    let hi = if extent + padding > offset { (extent + padding - offset).div_ceil(stride) } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

fn depthwise_forward(d: &ConvDims, x: &[f64], w: &[f64], out: &mut [f64]) {
    let ConvGeom { stride, padding, dilation, .. } = d.geom;
    let (oh, ow) = (d.oh, d.ow);
    for s in 0..d.n {
        for c in 0..d.c {
            let plane = &x[(s * d.c + c) * d.h * d.w..][..d.h * d.w];
            let dst = &mut out[(s * d.c + c) * oh * ow..][..oh * ow];
            let kernel = &w[c * d.kh * d.kw..][..d.kh * d.kw];
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(oh, stride, ky * dilation, padding, d.h);
                for kx in 0..d.kw {
                    let wv = kernel[ky * d.kw + kx];
                    let (x0, x1) = valid_range(ow, stride, kx * dilation, padding, d.w);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 * stride + kx * dilation - padding;
                    for oy in y0..y1 {
                        let iy = oy * stride + ky * dilation - padding;
                        let src = &plane[iy * d.w..][..d.w];
                        let line = &mut dst[oy * ow + x0..oy * ow + x1];
                        if stride == 1 {
                            for (v, &xv) in line.iter_mut().zip(&src[ix0..ix0 + (x1 - x0)]) {
                                *v += wv * xv;
                            }
                        } else {
                            for (i, v) in line.iter_mut().enumerate() {
                                *v += wv * src[ix0 + i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(d: &ConvDims, x: &[f64], w: &[f64], dy: &[f64], mut dx: Option<&mut [f64]>, mut dw: Option<&mut [f64]>) {
    let ConvGeom { stride, padding, dilation, .. } = d.geom;
    let (oh, ow) = (d.oh, d.ow);
    let kk = d.kh * d.kw;
    let plane = d.h * d.w;
    for s in 0..d.n {
        for c in 0..d.c {
            let base = (s * d.c + c) * plane;
            let xs = &x[base..base + plane];
            let g = &dy[(s * d.c + c) * oh * ow..][..oh * ow];
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(oh, stride, ky * dilation, padding, d.h);
                for kx in 0..d.kw {
                    let wv = w[c * kk + ky * d.kw + kx];
                    let (x0, x1) = valid_range(ow, stride, kx * dilation, padding, d.w);
                    if x0 >= x1 {
                        continue;
                    }
                    let n = x1 - x0;
                    let ix0 = x0 * stride + kx * dilation - padding;
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * stride + ky * dilation - padding;
                        let gl = &g[oy * ow + x0..][..n];
                        let row = iy * d.w + ix0;
                        if stride == 1 {
                            for (gv, xv) in gl.iter().zip(&xs[row..row + n]) {
                                acc += gv * xv;
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                for (dv, gv) in dx[base + row..base + row + n].iter_mut().zip(gl) {
                                    *dv += wv * gv;
                                }
                            }
                        } else {
                            for (i, gv) in gl.iter().enumerate() {
                                acc += gv * xs[row + i * stride];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                for (i, gv) in gl.iter().enumerate() {
                                    dx[base + row + i * stride] += wv * gv;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * kk + ky * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Max pooling with a square window; padding behaves as negative infinity.
/// Returns the pooled values and, per output, the flat input index selected.
pub(crate) fn max_pool_forward(
    shape: [usize; 4],
    x: &[f64],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], Vec<f64>, Vec<u32>)> {
    let [n, c, h, w] = shape;
    let oh = conv_output_extent(h, kernel, stride, padding, 1)?;
    let ow = conv_output_extent(w, kernel, stride, padding, 1)?;
    let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = plane * oh * ow + oy * ow + ox;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x[idx] > out[o] {
                            out[o] = x[idx];
                            arg[o] = idx as u32;
                        }
                    }
                }
            }
        }
    }
    Ok(([n, c, oh, ow], out, arg))
}

/// Average pooling that excludes padded positions from the divisor.
pub(crate) fn avg_pool_forward(
    shape: [usize; 4],
    x: &[f64],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], Vec<f64>)> {
    let [n, c, h, w] = shape;
    let oh = conv_output_extent(h, kernel, stride, padding, 1)?;
    let ow = conv_output_extent(w, kernel, stride, padding, 1)?;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1) = window(oy, stride, padding, kernel, h);
                let (x0, x1) = window(ox, stride, padding, kernel, w);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[base + iy * w + ix];
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(([n, c, oh, ow], out))
}

pub(crate) fn avg_pool_backward(
    in_shape: [usize; 4],
    out_shape: [usize; 4],
    dy: &[f64],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [n, c, h, w] = in_shape;
    let [_, _, oh, ow] = out_shape;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1) = window(oy, stride, padding, kernel, h);
                let (x0, x1) = window(ox, stride, padding, kernel, w);
                let g = dy[plane * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

fn window(o: usize, stride: usize, padding: usize, kernel: usize, extent: usize) -> (usize, usize) {
    let start = (o * stride) as isize - padding as isize;
    let end = (start + kernel as isize).min(extent as isize);
    (start.max(0) as usize, end.max(0) as usize)
}
