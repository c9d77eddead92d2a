//! Forward and backward kernels. All functions are pure; the tape wires them up.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Work size (multiply-adds) above which kernels fan out over threads.
const PAR_THRESHOLD: usize = 1 << 16;
/// Upper bound on im2col tile size, in elements.
const COL_TILE: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], pad: usize, stride: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::Shape(format!("conv2d wants CxHxW input and OxCxKxK kernel, got {input:?} / {kernel:?}")));
        }
        let (in_c, in_h, in_w) = (input[0], input[1], input[2]);
        let (out_c, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_c {
            return Err(Error::Shape(format!("conv2d kernel expects {kc} input channels, input has {in_c}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::Shape(format!("conv2d input {in_h}x{in_w} too small for kernel {kh} with pad {pad}")));
        }
        Ok(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            k: kh,
            pad,
            stride,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn rows_per_tile(&self) -> usize {
        (COL_TILE / (self.patch() * self.out_w).max(1)).clamp(1, self.out_h)
    }
}

/// Fills `cols` ((C*K*K) x (rows*W')) for output rows `oy0..oy0+rows`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, oy0: usize, rows: usize, cols: &mut [T]) {
    let n = rows * g.out_w;
    cols.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let c = row / (g.k * g.k);
        let ky = (row / g.k) % g.k;
        let kx = row % g.k;
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for r in 0..rows {
            let oy = oy0 + r;
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            let out = &mut dst[r * g.out_w..(r + 1) * g.out_w];
            if iy < 0 || iy >= g.in_h as isize {
                out.fill(T::zero());
                continue;
            }
            let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
            for (ox, o) in out.iter_mut().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                *o = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
            }
        }
    });
}

/// Scatter-adds a column tile back into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, oy0: usize, rows: usize, dx: &mut [T]) {
    let n = rows * g.out_w;
    let kk = g.k * g.k;
    dx.par_chunks_mut(g.in_h * g.in_w).enumerate().for_each(|(c, plane)| {
        for r in 0..kk {
            let (ky, kx) = (r / g.k, r % g.k);
            let src = &cols[(c * kk + r) * n..(c * kk + r + 1) * n];
            for rr in 0..rows {
                let iy = ((oy0 + rr) * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.in_w {
                        dst[ix as usize] += src[rr * g.out_w + ox];
                    }
                }
            }
        }
    });
}

/// Zero-padded cross-correlation, computed as im2col followed by a row-blocked
/// matrix multiply.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, pad: usize, stride: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), pad, stride)?;
    if let Some(b) = b {
        if b.len() != g.out_c {
            return Err(Error::Shape(format!("conv2d bias has {} entries for {} outputs", b.len(), g.out_c)));
        }
    }
    let plane = g.out_h * g.out_w;
    let kdim = g.patch();
    let mut y = vec![T::zero(); g.out_c * plane];
    if let Some(b) = b {
        for (o, chunk) in y.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[o]);
        }
    }
    let tile = g.rows_per_tile();
    let mut cols = vec![T::zero(); kdim * tile * g.out_w];
    let wd = w.data();
    let mut oy0 = 0;
    while oy0 < g.out_h {
        let rows = tile.min(g.out_h - oy0);
        let n = rows * g.out_w;
        let cols = &mut cols[..kdim * n];
        im2col(x.data(), &g, oy0, rows, cols);
        let cols = &*cols;
        let body = |(o, yrow): (usize, &mut [T])| {
            let dst = &mut yrow[oy0 * g.out_w..oy0 * g.out_w + n];
            let wrow = &wd[o * kdim..(o + 1) * kdim];
            for (kidx, &wv) in wrow.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let src = &cols[kidx * n..(kidx + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        };
        if g.out_c * kdim * n >= PAR_THRESHOLD {
            y.par_chunks_mut(plane).enumerate().for_each(body);
        } else {
            y.chunks_mut(plane).enumerate().for_each(body);
        }
        oy0 += rows;
    }
    Tensor::from_vec(vec![g.out_c, g.out_h, g.out_w], y)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    pad: usize,
    stride: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), pad, stride)?;
    let plane = g.out_h * g.out_w;
    let kdim = g.patch();
    let dyd = dy.data();
    let wd = w.data();
    let db: Vec<T> = dyd.chunks(plane).map(|c| c.iter().copied().sum()).collect();
    let mut dw = vec![T::zero(); g.out_c * kdim];
    let mut dx = if need_dx { Some(vec![T::zero(); x.len()]) } else { None };
    let tile = g.rows_per_tile();
    let mut cols = vec![T::zero(); kdim * tile * g.out_w];
    let mut dcols = if need_dx { vec![T::zero(); kdim * tile * g.out_w] } else { Vec::new() };
    let mut oy0 = 0;
    while oy0 < g.out_h {
        let rows = tile.min(g.out_h - oy0);
        let n = rows * g.out_w;
        let cols = &mut cols[..kdim * n];
        im2col(x.data(), &g, oy0, rows, cols);
        let cols = &*cols;
        // dW[o][k] += <dy[o][tile], cols[k]>
        dw.par_chunks_mut(kdim).enumerate().for_each(|(o, dwrow)| {
            let d = &dyd[o * plane + oy0 * g.out_w..o * plane + oy0 * g.out_w + n];
            for (kidx, acc) in dwrow.iter_mut().enumerate() {
                let src = &cols[kidx * n..(kidx + 1) * n];
                let mut s = T::zero();
                for (a, b) in d.iter().zip(src) {
                    s += *a * *b;
                }
                *acc += s;
            }
        });
        if let Some(dx) = dx.as_mut() {
            let dcols = &mut dcols[..kdim * n];
            // dcols[k] = sum_o W[o][k] * dy[o]
            dcols.par_chunks_mut(n).enumerate().for_each(|(kidx, dst)| {
                dst.fill(T::zero());
                for o in 0..g.out_c {
                    let wv = wd[o * kdim + kidx];
                    if wv == T::zero() {
                        continue;
                    }
                    let d = &dyd[o * plane + oy0 * g.out_w..o * plane + oy0 * g.out_w + n];
                    for (t, &s) in dst.iter_mut().zip(d) {
                        *t += wv * s;
                    }
                }
            });
            col2im(dcols, &g, oy0, rows, dx);
        }
        oy0 += rows;
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d).expect("shape")),
        dw: Tensor::from_vec(w.shape().to_vec(), dw)?,
        db: Tensor::from_vec(vec![g.out_c], db)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient convention: zero at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("shape")
}

pub struct GroupNormOut<T> {
    pub y: Tensor<T>,
    /// Per-group mean and reciprocal standard deviation.
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<GroupNormOut<T>> {
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!("group_norm expects CxHxW, got {:?}", x.shape())));
    }
    let (c, h, w) = x.chw();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape("group_norm affine parameters must have one entry per channel".into()));
    }
    let per = c / groups * h * w;
    let plane = h * w;
    let xd = x.data();
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    let mut y = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let seg = &xd[gi * per..(gi + 1) * per];
        let n = T::of(per as f64);
        let m = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        let r = T::one() / (var + T::of(eps)).sqrt();
        mean.push(m);
        rstd.push(r);
        for (i, (&v, out)) in seg.iter().zip(&mut y[gi * per..(gi + 1) * per]).enumerate() {
            let ch = gi * (c / groups) + i / plane;
            *out = (v - m) * r * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok(GroupNormOut { y: Tensor::from_vec(x.shape().to_vec(), y)?, mean, rstd })
}

pub struct GroupNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    rstd: &[T],
    dy: &Tensor<T>,
) -> GroupNormGrads<T> {
    let (c, h, w) = x.chw();
    let groups = mean.len();
    let cpg = c / groups;
    let plane = h * w;
    let per = cpg * plane;
    let (xd, dyd) = (x.data(), dy.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let (m, r) = (mean[gi], rstd[gi]);
        let n = T::of(per as f64);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in gi * per..(gi + 1) * per {
            let ch = i / plane;
            let xhat = (xd[i] - m) * r;
            dgamma[ch] += dyd[i] * xhat;
            dbeta[ch] += dyd[i];
            let dxhat = dyd[i] * gamma.data()[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for i in gi * per..(gi + 1) * per {
            let ch = i / plane;
            let xhat = (xd[i] - m) * r;
            let dxhat = dyd[i] * gamma.data()[ch];
            dx[i] = r / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    GroupNormGrads {
        dx: Tensor::from_vec(x.shape().to_vec(), dx).expect("shape"),
        dgamma: Tensor::from_vec(vec![c], dgamma).expect("shape"),
        dbeta: Tensor::from_vec(vec![c], dbeta).expect("shape"),
    }
}

/// 2x2 max pooling with stride 2. Returns the flat input index of each maximum;
/// ties go to the first index in row-major order.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.chw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max_pool2 needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(vec![c, oh, ow], y)?, arg))
}

pub fn max_pool2_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &d) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += d;
    }
    dx
}

/// Per-axis sampling taps for align-corners-false resizing.
fn resize_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("bilinear_resize needs positive dims".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let xd = x.data();
    let mut y = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let p = &xd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                y[(ch * out_h + oy) * out_w + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], y)
}

pub fn bilinear_resize_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (_, out_h, out_w) = dy.chw();
    if (h, w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let dd = dx.data_mut();
    for ch in 0..c {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let g = dy.data()[(ch * out_h + oy) * out_w + ox];
                let base = ch * h * w;
                dd[base + y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                dd[base + y0 * w + x1] += g * (T::one() - ly) * lx;
                dd[base + y1 * w + x0] += g * ly * (T::one() - lx);
                dd[base + y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

/// Row-major 2x3 affine mapping output cell coordinates to input cell coordinates.
pub type Affine = [[f64; 3]; 2];

pub const IDENTITY_AFFINE: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

/// Bilinear taps (flat index, weight) of one output cell. Taps outside the
/// input or with zero weight are omitted.
fn warp_taps(a: &Affine, ox: usize, oy: usize, h: usize, w: usize) -> ([(usize, f64); 4], usize) {
    let (fx, fy) = (ox as f64, oy as f64);
    let u = a[0][0] * fx + a[0][1] * fy + a[0][2];
    let v = a[1][0] * fx + a[1][1] * fy + a[1][2];
    let (u0, v0) = (u.floor(), v.floor());
    let (du, dv) = (u - u0, v - v0);
    let mut taps = [(0usize, 0.0f64); 4];
    let mut n = 0;
    for (iy, wy) in [(v0, 1.0 - dv), (v0 + 1.0, dv)] {
        if wy == 0.0 || iy < 0.0 || iy >= h as f64 {
            continue;
        }
        for (ix, wx) in [(u0, 1.0 - du), (u0 + 1.0, du)] {
            if wx == 0.0 || ix < 0.0 || ix >= w as f64 {
                continue;
            }
            taps[n] = (iy as usize * w + ix as usize, wy * wx);
            n += 1;
        }
    }
    (taps, n)
}

/// Inverse-mapped bilinear resampling; out-of-bounds reads are zero.
pub fn bilinear_warp<T: Scalar>(x: &Tensor<T>, affine: &Affine) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let taps: Vec<([(usize, f64); 4], usize)> =
        (0..h * w).map(|i| warp_taps(affine, i % w, i / w, h, w)).collect();
    let mut y = vec![T::zero(); c * h * w];
    let xd = x.data();
    y.par_chunks_mut(h * w).enumerate().for_each(|(ch, out)| {
        let p = &xd[ch * h * w..(ch + 1) * h * w];
        for (o, (t, n)) in out.iter_mut().zip(&taps) {
            let mut acc = T::zero();
            for &(idx, wt) in &t[..*n] {
                acc += p[idx] * T::of(wt);
            }
            *o = acc;
        }
    });
    Tensor::from_vec(vec![c, h, w], y).expect("shape")
}

pub fn bilinear_warp_backward<T: Scalar>(dy: &Tensor<T>, affine: &Affine) -> Tensor<T> {
    let (c, h, w) = dy.chw();
    let taps: Vec<([(usize, f64); 4], usize)> =
        (0..h * w).map(|i| warp_taps(affine, i % w, i / w, h, w)).collect();
    let mut dx = vec![T::zero(); c * h * w];
    let dd = dy.data();
    dx.par_chunks_mut(h * w).enumerate().for_each(|(ch, out)| {
        let g = &dd[ch * h * w..(ch + 1) * h * w];
        for (gv, (t, n)) in g.iter().zip(&taps) {
            for &(idx, wt) in &t[..*n] {
                out[idx] += *gv * T::of(wt);
            }
        }
    });
    Tensor::from_vec(vec![c, h, w], dx).expect("shape")
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let (_, h, w) = first.chw();
    let mut c = 0;
    let mut data = Vec::new();
    for x in xs {
        let (xc, xh, xw) = x.chw();
        if (xh, xw) != (h, w) {
            return Err(Error::Shape(format!("concat: spatial {xh}x{xw} vs {h}x{w}")));
        }
        c += xc;
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(vec![c, h, w], data)
}

/// Channel slice `[c0, c1)`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, c0: usize, c1: usize) -> Tensor<T> {
    let (_, h, w) = x.chw();
    Tensor::from_vec(vec![c1 - c0, h, w], x.data()[c0 * h * w..c1 * h * w].to_vec()).expect("shape")
}

/// Window `[y0, y0+h) x [x0, x0+w)`; coordinates may fall outside the input,
/// which reads as zero.
pub fn crop<T: Scalar>(x: &Tensor<T>, y0: isize, x0: isize, h: usize, w: usize) -> Tensor<T> {
    let (c, ih, iw) = x.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for r in 0..h {
            let sy = y0 + r as isize;
            if sy < 0 || sy >= ih as isize {
                continue;
            }
            let xs = x0.max(0);
            let xe = (x0 + w as isize).min(iw as isize);
            if xs >= xe {
                continue;
            }
            let src = &xd[(ch * ih + sy as usize) * iw + xs as usize..(ch * ih + sy as usize) * iw + xe as usize];
            let d0 = (ch * h + r) * w + (xs - x0) as usize;
            od[d0..d0 + src.len()].copy_from_slice(src);
        }
    }
    out
}

pub fn crop_backward<T: Scalar>(input_shape: &[usize], y0: isize, x0: isize, dy: &Tensor<T>) -> Tensor<T> {
    let (c, ih, iw) = (input_shape[0], input_shape[1], input_shape[2]);
    let (_, h, w) = dy.chw();
    let mut dx = Tensor::zeros(input_shape);
    for ch in 0..c {
        for r in 0..h {
            let sy = y0 + r as isize;
            if sy < 0 || sy >= ih as isize {
                continue;
            }
            for col in 0..w {
                let sx = x0 + col as isize;
                if sx >= 0 && sx < iw as isize {
                    dx.data_mut()[(ch * ih + sy as usize) * iw + sx as usize] += dy.data()[(ch * h + r) * w + col];
                }
            }
        }
    }
    dx
}

/// Copy of `base` with `patch` written at `(y0, x0)`. The patch must fit.
pub fn paste<T: Scalar>(base: &Tensor<T>, patch: &Tensor<T>, y0: usize, x0: usize) -> Result<Tensor<T>> {
    let (c, h, w) = base.chw();
    let (pc, ph, pw) = patch.chw();
    if pc != c || y0 + ph > h || x0 + pw > w {
        return Err(Error::Shape(format!("paste of {pc}x{ph}x{pw} at ({y0},{x0}) exceeds {c}x{h}x{w}")));
    }
    let mut out = base.clone();
    for ch in 0..c {
        for r in 0..ph {
            let d0 = (ch * h + y0 + r) * w + x0;
            let s0 = (ch * ph + r) * pw;
            out.data_mut()[d0..d0 + pw].copy_from_slice(&patch.data()[s0..s0 + pw]);
        }
    }
    Ok(out)
}

/// Gradients of `paste`: (d base, d patch).
pub fn paste_backward<T: Scalar>(patch_shape: &[usize], y0: usize, x0: usize, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (ph, pw) = (patch_shape[1], patch_shape[2]);
    let dpatch = crop(dy, y0 as isize, x0 as isize, ph, pw);
    let zeros = Tensor::zeros(patch_shape);
    let dbase = paste(dy, &zeros, y0, x0).expect("same geometry as forward");
    (dbase, dpatch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[2, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[2])), 0, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_kernel() {
        let x = Tensor::<f32>::full(&[1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.at3(0, 2, 2), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 4, 4), 4.0);
        assert_eq!(y.at3(0, 0, 2), 6.0);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[2, 2, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[2, 3, 2, 2]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), Some(&Tensor::zeros(&[3])), 1, 1).is_err());
    }

    #[test]
    fn conv_stride() {
        let x = Tensor::<f64>::from_fn(&[1, 5, 5], |i| i as f64);
        let w = t(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let y = conv2d(&x, &w, None, 1, 2).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data(), &[0., 2., 4., 10., 12., 14., 20., 22., 24.]);
    }

    #[test]
    fn relu_examples() {
        let x = t(&[1, 1, 3], &[-1.0, 2.5, 0.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.5, 0.0]);
        let g = relu_backward(&t(&[1, 1, 3], &[-1.0, 2.0, 0.0]), &Tensor::full(&[1, 1, 3], 1.0));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn group_norm_examples() {
        let x = Tensor::<f64>::full(&[4, 3, 3], 2.5);
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = group_norm(&x, 2, &ones, &zeros, 1e-5).unwrap().y;
        assert!(y.data().iter().all(|&v| v == 0.0));
        let r = Tensor::<f64>::from_fn(&[4, 3, 3], |i| (i as f64 * 1.7).sin());
        let y = group_norm(&r, 2, &zeros, &Tensor::full(&[4], 3.0), 1e-5).unwrap().y;
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert!(group_norm(&r, 3, &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::<f64>::full(&[2, 4, 4], 0.5);
        let (y, arg) = max_pool2(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        // tie-break: first index in row-major order
        assert_eq!(arg[0], 0);
        assert_eq!(arg[1], 2);
        assert!(max_pool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn resize_examples() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
        let one = t(&[1, 1, 1], &[7.0]);
        assert!(bilinear_resize(&one, 3, 5).unwrap().data().iter().all(|&v| v == 7.0));
        let row = t(&[1, 1, 2], &[0.0, 1.0]);
        assert_eq!(bilinear_resize(&row, 1, 4).unwrap().data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn warp_examples() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 5], |i| i as f64 + 1.0);
        assert_eq!(bilinear_warp(&x, &IDENTITY_AFFINE), x);
        let shift = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let y = bilinear_warp(&x, &shift);
        assert_eq!(y.at3(0, 1, 0), x.at3(0, 1, 1));
        assert_eq!(y.at3(1, 3, 3), x.at3(1, 3, 4));
        assert_eq!(y.at3(1, 3, 4), 0.0);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2, 3], |i| -(i as f64));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), &[4, 2, 3]);
        assert_eq!(slice_channels(&ab, 0, 2), a);
        assert_eq!(slice_channels(&ab, 2, 4), b);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 3, 3])]).is_err());
    }

    #[test]
    fn crop_and_paste() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let c = crop(&x, -1, 1, 3, 4);
        assert_eq!(c.data(), &[0., 0., 0., 0., 1., 2., 3., 0., 5., 6., 7., 0.]);
        let p = paste(&x, &Tensor::full(&[1, 2, 2], -1.0), 1, 2).unwrap();
        assert_eq!(p.at3(0, 1, 2), -1.0);
        assert_eq!(p.at3(0, 2, 3), -1.0);
        assert_eq!(p.at3(0, 0, 0), 0.0);
        assert!(paste(&x, &Tensor::zeros(&[1, 2, 2]), 3, 3).is_err());
    }
}
