//! Forward and backward kernels on raw row-major slices.
//!
//! These are shared by the eager helpers in [`super::ops`] and the recorded
//! tape operations, so both paths produce bit-identical values.

use super::Real;

pub const GELU_COEF: f64 = 0.044_715;
/// sqrt(2/pi)
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_SCALE) * (x + T::of(GELU_COEF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_SCALE) * (x + T::of(GELU_COEF) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_SCALE) * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `y[o][p] = b[o] + Σ_i w[o][i] · x[i][p]` over `plane` positions.
pub fn linear_fwd<T: Real>(
    x: &[T],
    cin: usize,
    plane: usize,
    w: &[T],
    cout: usize,
    b: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); cout * plane];
    for o in 0..cout {
        let row = &mut y[o * plane..(o + 1) * plane];
        if let Some(b) = b {
            row.fill(b[o]);
        }
        for i in 0..cin {
            let wv = w[o * cin + i];
            if wv == T::zero() {
                continue;
            }
            let xr = &x[i * plane..(i + 1) * plane];
            for (r, &xv) in row.iter_mut().zip(xr) {
                *r += wv * xv;
            }
        }
    }
    y
}

/// Input gradient of [`linear_fwd`]: `dx[i][p] = Σ_o w[o][i] · dy[o][p]`.
pub fn linear_bwd_input<T: Real>(
    dy: &[T],
    cout: usize,
    plane: usize,
    w: &[T],
    cin: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); cin * plane];
    for i in 0..cin {
        let row = &mut dx[i * plane..(i + 1) * plane];
        for o in 0..cout {
            let wv = w[o * cin + i];
            if wv == T::zero() {
                continue;
            }
            let dr = &dy[o * plane..(o + 1) * plane];
            for (r, &d) in row.iter_mut().zip(dr) {
                *r += wv * d;
            }
        }
    }
    dx
}

/// Weight and bias gradients of [`linear_fwd`].
pub fn linear_bwd_params<T: Real>(
    dy: &[T],
    cout: usize,
    plane: usize,
    x: &[T],
    cin: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for o in 0..cout {
        let dr = &dy[o * plane..(o + 1) * plane];
        let mut s = T::zero();
        for &d in dr {
            s += d;
        }
        db[o] = s;
        for i in 0..cin {
            let xr = &x[i * plane..(i + 1) * plane];
            let mut acc = T::zero();
            for (&d, &xv) in dr.iter().zip(xr) {
                acc += d * xv;
            }
            dw[o * cin + i] = acc;
        }
    }
    (dw, db)
}

/// Per-position normalization over channels. Returns `(xhat, inv_std)`.
pub fn layer_norm_stats<T: Real>(x: &[T], c: usize, plane: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let cn = T::of(c as f64);
    let mut mean = vec![T::zero(); plane];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&x[ch * plane..(ch + 1) * plane]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= cn;
    }
    let mut var = vec![T::zero(); plane];
    for ch in 0..c {
        for ((s, &v), &m) in var
            .iter_mut()
            .zip(&x[ch * plane..(ch + 1) * plane])
            .zip(&mean)
        {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&s| T::one() / (s / cn + eps).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); c * plane];
    for ch in 0..c {
        for p in 0..plane {
            xhat[ch * plane + p] = (x[ch * plane + p] - mean[p]) * inv_std[p];
        }
    }
    (xhat, inv_std)
}

/// Gradient of `xhat` with respect to `x` applied to `dxhat`.
pub fn layer_norm_bwd<T: Real>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    c: usize,
    plane: usize,
) -> Vec<T> {
    let cn = T::of(c as f64);
    let mut mean_d = vec![T::zero(); plane];
    let mut mean_dx = vec![T::zero(); plane];
    for ch in 0..c {
        for p in 0..plane {
            let i = ch * plane + p;
            mean_d[p] += dxhat[i];
            mean_dx[p] += dxhat[i] * xhat[i];
        }
    }
    for p in 0..plane {
        mean_d[p] /= cn;
        mean_dx[p] /= cn;
    }
    let mut dx = vec![T::zero(); c * plane];
    for ch in 0..c {
        for p in 0..plane {
            let i = ch * plane + p;
            dx[i] = inv_std[p] * (dxhat[i] - mean_d[p] - xhat[i] * mean_dx[p]);
        }
    }
    dx
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size `floor((in + 2·pad − k)/stride) + 1`, or `None` when < 1.
    pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = input + 2 * pad;
        if span < k || stride == 0 {
            None
        } else {
            Some((span - k) / stride + 1)
        }
    }

    /// Output columns `ox` for which `ox·stride + kx − pad` lies inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, kx: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let hi_num = extent as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

pub fn conv2d_fwd<T: Real>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k);
    let mut y = vec![T::zero(); g.cout * oh * ow];
    for co in 0..g.cout {
        let out = &mut y[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            out.fill(b[co]);
        }
        for ci in 0..g.cin {
            let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let wv = kernel[((co * g.cin + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, iw, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        let xrow = &xin[iy * iw..(iy + 1) * iw];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d_fwd`] with respect to its input (the transposed
/// convolution): maps `cout×out_h×out_w` back to `cin×in_h×in_w`.
pub fn conv2d_bwd_input<T: Real>(dy: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k);
    let mut dx = vec![T::zero(); g.cin * ih * iw];
    for ci in 0..g.cin {
        let din = &mut dx[ci * ih * iw..(ci + 1) * ih * iw];
        for co in 0..g.cout {
            let dout = &dy[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let wv = kernel[((co * g.cin + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, iw, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dout[oy * ow..(oy + 1) * ow];
                        let xrow = &mut din[iy * iw..(iy + 1) * iw];
                        for ox in ox0..ox1 {
                            xrow[ox * g.stride + kx - g.pad] += wv * drow[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Kernel gradient: `dk[co][ci][ky][kx] = Σ dy[co][oy][ox] · x[ci][iy][ix]`.
pub fn conv2d_bwd_kernel<T: Real>(dy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.k);
    let mut dk = vec![T::zero(); g.cout * g.cin * k * k];
    for co in 0..g.cout {
        let dout = &dy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, iw, ow);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dout[oy * ow..(oy + 1) * ow];
                        let xrow = &xin[iy * iw..(iy + 1) * iw];
                        for ox in ox0..ox1 {
                            acc += drow[ox] * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                    dk[((co * g.cin + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    dk
}

/// Per-channel sum over positions.
pub fn channel_sums<T: Real>(x: &[T], c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|ch| {
            let mut s = T::zero();
            for &v in &x[ch * plane..(ch + 1) * plane] {
                s += v;
            }
            s
        })
        .collect()
}

/// Source index for each element of `pixel_unshuffle(x, r)` output.
pub fn unshuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h / r, w / r);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                for y in 0..oh {
                    for x in 0..ow {
                        idx.push((ch * h + y * r + dy) * w + x * r + dx);
                    }
                }
            }
        }
    }
    idx
}

/// Adaptive pooling bins: `[floor(i·n/out), ceil((i+1)·n/out))`.
pub fn pool_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * n) / out, ((i + 1) * n).div_ceil(out)))
        .collect()
}
